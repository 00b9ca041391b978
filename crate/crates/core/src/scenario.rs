//! Domain types shared by the simulator, the learner and the planners.
//!
//! Radio quantities are kept in the units their field names carry (mW, dB,
//! dBm/Hz, Hz, ms); the accessor methods return the linearised values used
//! by the link-level formulas.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, ns};

pub type Point = [f64; 2];

/// Static description of base stations, UEs and radio/compute parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkScenario {
    pub n_bs: usize,
    pub n_ue: usize,
    pub bs_positions: Vec<Point>,
    pub ue_positions: Vec<Point>,
    pub tti_ms: f64,
    pub bandwidth_hz: f64,
    pub p_bs_mw: f64,
    pub p_ue_mw: f64,
    pub gain_bs: f64,
    pub gain_ue: f64,
    pub noise_psd_dbm_hz: f64,
    pub f_max_hz: f64,
    pub pathloss_exponent: f64,
    pub pathloss_ref_db: f64,
    pub max_retx: u32,
    /// Decode threshold in dB; `-inf` decodes every attempt with a positive rate.
    pub sinr_decode_threshold: f64,
    /// Upper bound on the TTIs a single failed attempt can occupy.
    pub max_attempt_ttis: u32,
    /// Probability that a co-channel transmitter in another cell is active.
    pub activity_factor: f64,
    /// Split each BS's bandwidth equally among the UEs it serves.
    pub share_bandwidth: bool,
    pub per_bs_capacity: usize,
    pub tasks: TaskModel,
}

/// Distribution of per-task payloads and computing demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub uplink_bits_min: f64,
    pub uplink_bits_max: f64,
    pub downlink_bits_min: f64,
    pub downlink_bits_max: f64,
    /// Median of the lognormal computing demand, in cycles.
    pub cycles_median: f64,
    /// Log-scale standard deviation of the computing demand.
    pub cycles_sigma: f64,
    /// Fraction of UEs, evenly interleaved by index, whose demand has the
    /// wider spread `heavy_sigma` at the same mean.
    pub heavy_share: f64,
    pub heavy_sigma: f64,
}

impl TaskModel {
    pub fn is_heavy(&self, ue: usize) -> bool {
        let h = self.heavy_share;
        ((ue + 1) as f64 * h).floor() > (ue as f64 * h).floor()
    }

    /// Lognormal `(median, sigma)` of UE `ue`'s computing demand.
    pub fn cycles_params(&self, ue: usize) -> (f64, f64) {
        if self.is_heavy(ue) {
            let (s, h) = (self.cycles_sigma, self.heavy_sigma);
            (self.cycles_median * ((s * s - h * h) / 2.0).exp(), h)
        } else {
            (self.cycles_median, self.cycles_sigma)
        }
    }
}

impl Default for TaskModel {
    fn default() -> Self {
        Self {
            uplink_bits_min: 1_000.0,
            uplink_bits_max: 10_000.0,
            downlink_bits_min: 1_000.0,
            downlink_bits_max: 10_000.0,
            cycles_median: 5.0e7,
            cycles_sigma: 0.5,
            heavy_share: 0.25,
            heavy_sigma: 1.2,
        }
    }
}

/// One UE's task: payload sizes and computing demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub ue_id: usize,
    pub uplink_bits: f64,
    pub downlink_bits: f64,
    pub cycles_per_bit: f64,
}

impl TaskSpec {
    pub fn total_cycles(&self) -> f64 {
        self.cycles_per_bit * self.uplink_bits
    }

    pub fn with_total_cycles(ue_id: usize, uplink_bits: f64, downlink_bits: f64, cycles: f64) -> Self {
        Self {
            ue_id,
            uplink_bits,
            downlink_bits,
            cycles_per_bit: cycles / uplink_bits,
        }
    }
}

/// Tail level, CVaR weight and delay threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSpec {
    pub alpha: f64,
    pub beta: f64,
    pub tau_th_ms: f64,
}

impl Default for RiskSpec {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.5,
            tau_th_ms: 30.0,
        }
    }
}

impl RiskSpec {
    pub fn new(alpha: f64, beta: f64, tau_th_ms: f64) -> Result<Self> {
        let r = Self {
            alpha,
            beta,
            tau_th_ms,
        };
        let v = r.violations();
        if v.is_empty() {
            Ok(r)
        } else {
            Err(Error::arg(
                v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
            ))
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            out.push(Violation::new("alpha", "0 < alpha < 1"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            out.push(Violation::new("beta", "0 < beta < 1"));
        }
        if !(self.tau_th_ms > 0.0) {
            out.push(Violation::new("tau_th_ms", "tau_th_ms > 0"));
        }
        out
    }
}

/// A violated invariant, named by field and rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

impl NetworkScenario {
    /// Noise power σ² = N0·w in mW.
    pub fn noise_mw(&self) -> f64 {
        dbm_to_mw(self.noise_psd_dbm_hz) * self.bandwidth_hz
    }

    pub fn tti_s(&self) -> f64 {
        self.tti_ms * 1e-3
    }

    pub fn decode_threshold_lin(&self) -> f64 {
        db_to_lin(self.sinr_decode_threshold)
    }

    pub fn distance_m(&self, ue: usize, bs: usize) -> f64 {
        distance(self.ue_positions[ue], self.bs_positions[bs])
    }

    /// Log-distance path loss in dB; distances below 1 m are clamped to 1 m.
    pub fn pathloss_db(&self, d_m: f64) -> f64 {
        self.pathloss_ref_db + 10.0 * self.pathloss_exponent * d_m.max(1.0).log10()
    }

    /// Linear channel gain L_mn (≤ 1) between a UE and a BS.
    pub fn pathloss_lin(&self, ue: usize, bs: usize) -> f64 {
        db_to_lin(-self.pathloss_db(self.distance_m(ue, bs)))
    }

    pub fn nearest_bs(&self, ue: usize) -> usize {
        (0..self.n_bs)
            .min_by(|&a, &b| {
                self.distance_m(ue, a)
                    .total_cmp(&self.distance_m(ue, b))
            })
            .expect("n_bs >= 1")
    }

    /// Every violated invariant; empty iff the scenario is valid.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut check = |ok: bool, field: &str, rule: &str| {
            if !ok {
                out.push(Violation::new(field, rule));
            }
        };
        check(self.n_bs >= 1, "n_bs", "n_bs >= 1");
        check(self.n_ue >= 1, "n_ue", "n_ue >= 1");
        check(
            self.bs_positions.len() == self.n_bs,
            "bs_positions",
            "one position per BS",
        );
        check(
            self.ue_positions.len() == self.n_ue,
            "ue_positions",
            "one position per UE",
        );
        check(
            self.bs_positions.iter().flatten().all(|c| c.is_finite()),
            "bs_positions",
            "positions finite",
        );
        check(
            self.ue_positions.iter().flatten().all(|c| c.is_finite()),
            "ue_positions",
            "positions finite",
        );
        check(self.tti_ms > 0.0 && self.tti_ms.is_finite(), "tti_ms", "tti_ms > 0");
        for (name, v) in [
            ("bandwidth_hz", self.bandwidth_hz),
            ("p_bs_mw", self.p_bs_mw),
            ("p_ue_mw", self.p_ue_mw),
            ("gain_bs", self.gain_bs),
            ("gain_ue", self.gain_ue),
            ("f_max_hz", self.f_max_hz),
        ] {
            check(v > 0.0 && v.is_finite(), name, &format!("{name} > 0"));
        }
        check(
            self.noise_psd_dbm_hz.is_finite(),
            "noise_psd_dbm_hz",
            "noise_psd_dbm_hz finite",
        );
        check(
            self.pathloss_exponent > 0.0 && self.pathloss_exponent.is_finite(),
            "pathloss_exponent",
            "pathloss_exponent > 0",
        );
        check(
            self.pathloss_ref_db.is_finite(),
            "pathloss_ref_db",
            "pathloss_ref_db finite",
        );
        check(
            !self.sinr_decode_threshold.is_nan() && self.sinr_decode_threshold < f64::INFINITY,
            "sinr_decode_threshold",
            "sinr_decode_threshold < +inf",
        );
        check(
            self.max_attempt_ttis >= 1,
            "max_attempt_ttis",
            "max_attempt_ttis >= 1",
        );
        check(
            (0.0..=1.0).contains(&self.activity_factor),
            "activity_factor",
            "0 <= activity_factor <= 1",
        );
        check(
            self.per_bs_capacity >= 1,
            "per_bs_capacity",
            "per_bs_capacity >= 1",
        );
        let t = &self.tasks;
        check(
            t.uplink_bits_min > 0.0 && t.uplink_bits_max >= t.uplink_bits_min,
            "uplink_bits_min",
            "0 < uplink_bits_min <= uplink_bits_max",
        );
        check(
            t.downlink_bits_min > 0.0 && t.downlink_bits_max >= t.downlink_bits_min,
            "downlink_bits_min",
            "0 < downlink_bits_min <= downlink_bits_max",
        );
        check(
            t.cycles_median > 0.0 && t.cycles_median.is_finite(),
            "cycles_median",
            "cycles_median > 0",
        );
        check(
            t.cycles_sigma >= 0.0 && t.cycles_sigma.is_finite(),
            "cycles_sigma",
            "cycles_sigma >= 0",
        );
        check(
            (0.0..=1.0).contains(&t.heavy_share),
            "heavy_share",
            "0 <= heavy_share <= 1",
        );
        check(
            t.heavy_sigma >= 0.0 && t.heavy_sigma.is_finite(),
            "heavy_sigma",
            "heavy_sigma >= 0",
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidScenario(v))
        }
    }

    /// A short stable identifier derived from the scenario contents.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(&Sha256::digest(&bytes)[..6])
    }

    /// The same network with a different computing budget per BS.
    pub fn with_f_max(&self, f_max_hz: f64) -> Self {
        Self {
            f_max_hz,
            ..self.clone()
        }
    }

    /// Keeps the first `n_ue` UEs.
    pub fn truncated(&self, n_ue: usize) -> Self {
        let n_ue = n_ue.min(self.n_ue);
        Self {
            n_ue,
            ue_positions: self.ue_positions[..n_ue].to_vec(),
            per_bs_capacity: self.per_bs_capacity.min(n_ue).max(1),
            ..self.clone()
        }
    }
}

/// Validation entry point mirroring [`NetworkScenario::violations`].
pub fn validate_scenario(s: &NetworkScenario) -> Vec<Violation> {
    s.violations()
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Square-grid topology: BSs at cell centres, UEs dropped uniformly over the
/// covered area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLayout {
    pub n_bs: usize,
    pub n_ue: usize,
    pub cell_side_m: f64,
}

impl GridLayout {
    pub fn columns(&self) -> usize {
        (self.n_bs as f64).sqrt().ceil().max(1.0) as usize
    }

    pub fn rows(&self) -> usize {
        self.n_bs.div_ceil(self.columns()).max(1)
    }

    pub fn bs_positions(&self) -> Vec<Point> {
        let cols = self.columns();
        (0..self.n_bs)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                [
                    (c as f64 + 0.5) * self.cell_side_m,
                    (r as f64 + 0.5) * self.cell_side_m,
                ]
            })
            .collect()
    }

    pub fn ue_positions(&self, seed: u64) -> Vec<Point> {
        let mut rng = seed::stream(seed, &[ns::LAYOUT]);
        let (w, h) = (
            self.columns() as f64 * self.cell_side_m,
            self.rows() as f64 * self.cell_side_m,
        );
        (0..self.n_ue)
            .map(|_| [rng.random::<f64>() * w, rng.random::<f64>() * h])
            .collect()
    }
}

/// Binary association v(m,n) and computing frequency f(m,n), row per UE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub assignment: Vec<Vec<bool>>,
    pub frequencies: Vec<Vec<f64>>,
}

impl AllocationPlan {
    pub fn empty(n_ue: usize, n_bs: usize) -> Self {
        Self {
            assignment: vec![vec![false; n_bs]; n_ue],
            frequencies: vec![vec![0.0; n_bs]; n_ue],
        }
    }

    /// Builds a plan from a per-UE serving BS and per-UE frequency.
    pub fn from_serving(n_bs: usize, serving: &[Option<usize>], freq_hz: &[f64]) -> Self {
        let mut p = Self::empty(serving.len(), n_bs);
        for (m, (bs, &f)) in serving.iter().zip(freq_hz).enumerate() {
            if let Some(n) = *bs {
                p.assignment[m][n] = true;
                p.frequencies[m][n] = f;
            }
        }
        p
    }

    pub fn n_ue(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_bs(&self) -> usize {
        self.assignment.first().map_or(0, Vec::len)
    }

    /// First BS the UE is assigned to.
    pub fn serving_bs(&self, ue: usize) -> Option<usize> {
        self.assignment[ue].iter().position(|&v| v)
    }

    pub fn serving(&self) -> Vec<Option<usize>> {
        (0..self.n_ue()).map(|m| self.serving_bs(m)).collect()
    }

    pub fn frequency(&self, ue: usize) -> Option<f64> {
        self.serving_bs(ue).map(|n| self.frequencies[ue][n])
    }

    pub fn served_ues(&self) -> Vec<usize> {
        (0..self.n_ue())
            .filter(|&m| self.serving_bs(m).is_some())
            .collect()
    }

    /// Number of UEs associated with each BS.
    pub fn loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.n_bs()];
        for row in &self.assignment {
            for (n, &v) in row.iter().enumerate() {
                loads[n] += usize::from(v);
            }
        }
        loads
    }
}

/// Relative slack on the per-BS frequency budget, absorbing rounding in
/// allocations that sum to exactly `f_max`.
pub const FREQ_BUDGET_RTOL: f64 = 1e-9;

/// Checks a plan against the constraints of the allocation problem.
pub fn validate_plan(p: &AllocationPlan, s: &NetworkScenario) -> Result<Vec<Violation>> {
    let dims_ok = p.assignment.len() == s.n_ue
        && p.frequencies.len() == s.n_ue
        && p.assignment.iter().all(|r| r.len() == s.n_bs)
        && p.frequencies.iter().all(|r| r.len() == s.n_bs);
    if !dims_ok {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", s.n_ue, s.n_bs),
            found: format!(
                "{}x{} assignment, {}x{} frequencies",
                p.assignment.len(),
                p.assignment.first().map_or(0, Vec::len),
                p.frequencies.len(),
                p.frequencies.first().map_or(0, Vec::len)
            ),
        });
    }
    let mut out = Vec::new();
    for (m, row) in p.assignment.iter().enumerate() {
        if row.iter().filter(|&&v| v).count() > 1 {
            out.push(Violation::new(
                format!("assignment[{m}]"),
                "sum_n v(m,n) <= 1",
            ));
        }
    }
    for (n, &load) in p.loads().iter().enumerate() {
        if load > s.per_bs_capacity {
            out.push(Violation::new(
                format!("bs[{n}]"),
                format!("sum_m v(m,n) <= {}", s.per_bs_capacity),
            ));
        }
    }
    for n in 0..s.n_bs {
        let total: f64 = (0..s.n_ue).map(|m| p.frequencies[m][n]).sum();
        if total > s.f_max_hz * (1.0 + FREQ_BUDGET_RTOL) {
            out.push(Violation::new(
                format!("bs[{n}]"),
                "sum_m f(m,n) <= f_max_hz",
            ));
        }
    }
    for m in 0..s.n_ue {
        for n in 0..s.n_bs {
            let (v, f) = (p.assignment[m][n], p.frequencies[m][n]);
            let field = format!("frequencies[{m}][{n}]");
            if !f.is_finite() || f < 0.0 {
                out.push(Violation::new(field, "f(m,n) finite and >= 0"));
            } else if v && f <= 0.0 {
                out.push(Violation::new(field, "f(m,n) > 0 where v(m,n) = 1"));
            } else if !v && f != 0.0 {
                out.push(Violation::new(field, "f(m,n) = 0 where v(m,n) = 0"));
            }
        }
    }
    Ok(out)
}
