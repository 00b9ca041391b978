//! Joint task assignment and computing-frequency allocation.
//!
//! Assignment minimises the worst per-UE transmission cost (bottleneck
//! assignment by binary search over thresholds with a capacity-respecting
//! matching check, then a min-sum tie-break among the bottleneck-optimal
//! assignments). Frequencies follow the closed form that equalises
//! `a_m / f_m` on every BS. When bandwidth is shared the transmission costs
//! depend on the loads, so the two steps are iterated.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::risk;
use crate::scenario::{AllocationPlan, NetworkScenario, RiskSpec};
use crate::sim::SampleBank;
use crate::vae::{Gaussian, Joint2, Vae};

pub const EXHAUSTIVE_LIMIT: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Proposed,
    Baseline1,
    Baseline2,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Proposed, Method::Baseline1, Method::Baseline2, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Baseline1 => "baseline1",
            Method::Baseline2 => "baseline2",
            Method::Oracle => "oracle",
        }
    }

    pub fn measure(self) -> Measure {
        match self {
            Method::Proposed | Method::Oracle => Measure::Cvar,
            Method::Baseline1 => Measure::Mean,
            Method::Baseline2 => Measure::MeanPlusCvar,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown method `{s}` (expected proposed, baseline1, baseline2 or oracle)")))
    }
}

/// Risk functional applied to a delay law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// β·CVaR_α
    Cvar,
    /// E
    Mean,
    /// E + β·CVaR_α
    MeanPlusCvar,
}

impl Measure {
    pub fn of_samples(self, x: &[f64], r: &RiskSpec) -> Result<f64> {
        Ok(match self {
            Measure::Cvar => r.beta * risk::cvar_empirical(x, r.alpha)?,
            Measure::Mean => risk::mean(x)?,
            Measure::MeanPlusCvar => risk::mean(x)? + r.beta * risk::cvar_empirical(x, r.alpha)?,
        })
    }

    pub fn of_gaussian(self, g: &Gaussian, r: &RiskSpec) -> Result<f64> {
        Ok(match self {
            Measure::Cvar => r.beta * risk::cvar_gaussian(g.mean, g.variance, r.alpha)?,
            Measure::Mean => g.mean,
            Measure::MeanPlusCvar => g.mean + r.beta * risk::cvar_gaussian(g.mean, g.variance, r.alpha)?,
        })
    }
}

/// Per-pair transmission costs (ms) and per-UE compute coefficients
/// (cycles). Infinite transmission entries mark infeasible pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub transmission: Vec<Vec<f64>>,
    pub compute: Vec<f64>,
}

impl CostTable {
    pub fn n_ue(&self) -> usize {
        self.transmission.len()
    }

    pub fn n_bs(&self) -> usize {
        self.transmission.first().map_or(0, Vec::len)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            transmission: self.transmission.iter().map(|r| r.iter().map(|v| v * c).collect()).collect(),
            compute: self.compute.iter().map(|v| v * c).collect(),
        }
    }

    pub fn validate(&self, n_ue: usize, n_bs: usize) -> Result<()> {
        if self.transmission.len() != n_ue || self.compute.len() != n_ue {
            return Err(Error::DimensionMismatch {
                expected: format!("{n_ue} UEs"),
                found: format!("{} transmission rows, {} compute entries", self.transmission.len(), self.compute.len()),
            });
        }
        let mut missing = Vec::new();
        for (m, row) in self.transmission.iter().enumerate() {
            if row.len() != n_bs {
                return Err(Error::DimensionMismatch {
                    expected: format!("{n_bs} BS columns"),
                    found: format!("{} in row {m}", row.len()),
                });
            }
            for (n, v) in row.iter().enumerate() {
                if v.is_nan() {
                    missing.push((m, n));
                } else if *v < 0.0 {
                    return Err(Error::arg(format!("negative cost {v} for pair ({m}, {n})")));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingCosts(missing));
        }
        if let Some((m, v)) = self.compute.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::arg(format!("compute coefficient of UE {m} must be finite and >= 0, got {v}")));
        }
        Ok(())
    }
}

/// Source of cost tables and plan objectives.
pub trait CostModel: Sync {
    fn n_ue(&self) -> usize;
    fn n_bs(&self) -> usize;
    /// Whether transmission costs depend on BS loads.
    fn load_coupled(&self) -> bool;
    /// `shares[m][n]` is the number of UEs BS n would serve if UE m joins it.
    fn table(&self, shares: &[Vec<usize>]) -> Result<CostTable>;
    fn compute_coefficients(&self) -> Result<Vec<f64>>;
    /// Objective of a complete plan; lower is better.
    fn objective(&self, plan: &AllocationPlan) -> Result<f64>;
}

/// A fixed, load-independent table.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedCosts(pub CostTable);

impl CostModel for FixedCosts {
    fn n_ue(&self) -> usize {
        self.0.n_ue()
    }

    fn n_bs(&self) -> usize {
        self.0.n_bs()
    }

    fn load_coupled(&self) -> bool {
        false
    }

    fn table(&self, _: &[Vec<usize>]) -> Result<CostTable> {
        Ok(self.0.clone())
    }

    fn compute_coefficients(&self) -> Result<Vec<f64>> {
        Ok(self.0.compute.clone())
    }

    /// `max_m a(m, n_m) + a_m / f_m` with `a_m / f_m` in ms.
    fn objective(&self, plan: &AllocationPlan) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for m in plan.served_ues() {
            let n = plan.serving_bs(m).expect("served");
            let f = plan.frequencies[m][n];
            worst = worst.max(self.0.transmission[m][n] + self.0.compute[m] / f * 1e3);
        }
        Ok(worst)
    }
}

/// Empirical costs from a sample bank.
#[derive(Debug, Clone, Copy)]
pub struct BankCosts<'a> {
    pub bank: &'a SampleBank,
    pub measure: Measure,
    pub risk: RiskSpec,
}

impl<'a> BankCosts<'a> {
    pub fn new(bank: &'a SampleBank, method: Method, risk: RiskSpec) -> Self {
        Self {
            bank,
            measure: method.measure(),
            risk,
        }
    }
}

/// A pair whose drop rate exceeds α would have an α-tail made only of
/// failed tasks; such pairs are treated as infeasible.
pub fn pair_feasible(bank: &SampleBank, m: usize, n: usize, r: &RiskSpec) -> bool {
    bank.drop_rate(m, n) <= r.alpha
}

fn measure_or_inf(measure: Measure, x: &[f64], r: &RiskSpec) -> Result<f64> {
    if x.is_empty() {
        Ok(f64::INFINITY)
    } else {
        measure.of_samples(x, r)
    }
}

fn par_table<F>(n_ue: usize, n_bs: usize, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let flat: Vec<f64> = (0..n_ue * n_bs)
        .into_par_iter()
        .map(|i| f(i / n_bs, i % n_bs))
        .collect::<Result<_>>()?;
    Ok(flat.chunks(n_bs.max(1)).map(<[f64]>::to_vec).collect())
}

impl CostModel for BankCosts<'_> {
    fn n_ue(&self) -> usize {
        self.bank.scenario().n_ue
    }

    fn n_bs(&self) -> usize {
        self.bank.scenario().n_bs
    }

    fn load_coupled(&self) -> bool {
        self.bank.scenario().share_bandwidth && self.n_ue() > 1
    }

    fn table(&self, shares: &[Vec<usize>]) -> Result<CostTable> {
        let transmission = par_table(self.n_ue(), self.n_bs(), |m, n| {
            if !pair_feasible(self.bank, m, n, &self.risk) {
                return Ok(f64::INFINITY);
            }
            measure_or_inf(self.measure, &self.bank.transmission_ms(m, n, shares[m][n]), &self.risk)
        })?;
        Ok(CostTable {
            transmission,
            compute: self.compute_coefficients()?,
        })
    }

    fn compute_coefficients(&self) -> Result<Vec<f64>> {
        (0..self.n_ue())
            .into_par_iter()
            .map(|m| self.measure.of_samples(&self.bank.cycles(m), &self.risk))
            .collect()
    }

    fn objective(&self, plan: &AllocationPlan) -> Result<f64> {
        e2e_objective(self.bank, plan, self.measure, &self.risk)
    }
}

/// `max_m measure(τ_m)` over the bank's completed E2E samples under `plan`.
pub fn e2e_objective(bank: &SampleBank, plan: &AllocationPlan, measure: Measure, r: &RiskSpec) -> Result<f64> {
    let loads = plan.loads();
    let served = plan.served_ues();
    let values: Vec<f64> = served
        .par_iter()
        .map(|&m| {
            let n = plan.serving_bs(m).expect("served");
            if !pair_feasible(bank, m, n, r) {
                return Ok(f64::INFINITY);
            }
            measure_or_inf(measure, &bank.e2e_ms(m, n, loads[n], plan.frequencies[m][n]), r)
        })
        .collect::<Result<_>>()?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

/// Costs from trained VAEs: the bank's samples on each link are windowed,
/// encoded, and the predictive Gaussians of the windows are moment-matched.
#[derive(Debug, Clone, Copy)]
pub struct VaeCosts<'a> {
    pub bank: &'a SampleBank,
    /// One model per BS, or a single pooled model.
    pub models: &'a [Vae],
    pub measure: Measure,
    pub risk: RiskSpec,
}

impl<'a> VaeCosts<'a> {
    pub fn new(bank: &'a SampleBank, models: &'a [Vae], method: Method, risk: RiskSpec) -> Result<Self> {
        let n_bs = bank.scenario().n_bs;
        if models.len() != 1 && models.len() != n_bs {
            return Err(Error::DimensionMismatch {
                expected: format!("1 pooled model or {n_bs} per-BS models"),
                found: models.len().to_string(),
            });
        }
        Ok(Self {
            bank,
            models,
            measure: method.measure(),
            risk,
        })
    }

    fn model(&self, n: usize) -> &Vae {
        if self.models.len() == 1 {
            &self.models[0]
        } else {
            &self.models[n]
        }
    }

    /// Joint `[τ_t·T, τ_p]` law on link (m, n) with `share` UEs at the
    /// reference frequency `f_max / share`, or `None` if too few samples.
    pub fn link_law(&self, m: usize, n: usize, share: usize) -> Result<Option<(Joint2, f64)>> {
        let s = self.bank.scenario();
        let f_ref = s.f_max_hz / share.max(1) as f64;
        if !pair_feasible(self.bank, m, n, &self.risk) {
            return Ok(None);
        }
        let pairs = self.bank.pairs_ms(m, n, share, f_ref);
        let vae = self.model(n);
        let w = vae.arch.width;
        if pairs.len() < w {
            return Ok(None);
        }
        let parts = pairs
            .chunks_exact(w)
            .map(|chunk| vae.predictive(&window_of(chunk, &vae.normalization, m, n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some((Joint2::moment_match(&parts)?, f_ref)))
    }
}

fn window_of(chunk: &[[f64; 2]], norm: &Normalization, m: usize, n: usize) -> crate::data::InputWindow {
    let w = chunk.len();
    let mut values = vec![0.0; 2 * w];
    for (t, p) in chunk.iter().enumerate() {
        let z = norm.standardize(*p);
        values[t] = z[0];
        values[w + t] = z[1];
    }
    crate::data::InputWindow {
        width: w,
        values,
        ue_id: m,
        bs_id: n,
        record_indices: Vec::new(),
    }
}

impl CostModel for VaeCosts<'_> {
    fn n_ue(&self) -> usize {
        self.bank.scenario().n_ue
    }

    fn n_bs(&self) -> usize {
        self.bank.scenario().n_bs
    }

    fn load_coupled(&self) -> bool {
        self.bank.scenario().share_bandwidth && self.n_ue() > 1
    }

    fn table(&self, shares: &[Vec<usize>]) -> Result<CostTable> {
        let laws: Vec<Option<(Joint2, f64)>> = (0..self.n_ue() * self.n_bs())
            .into_par_iter()
            .map(|i| {
                let (m, n) = (i / self.n_bs(), i % self.n_bs());
                self.link_law(m, n, shares[m][n])
            })
            .collect::<Result<_>>()?;
        let nb = self.n_bs();
        let mut transmission = vec![vec![f64::INFINITY; nb]; self.n_ue()];
        let mut compute = vec![0.0; self.n_ue()];
        for m in 0..self.n_ue() {
            let mut acc = Vec::new();
            for n in 0..nb {
                if let Some((law, f_ref)) = &laws[m * nb + n] {
                    transmission[m][n] = self.measure.of_gaussian(&law.marginal(0), &self.risk)?;
                    let tp = law.marginal(1);
                    // ms at f_ref to cycles
                    let k = f_ref * 1e-3;
                    let cycles = Gaussian {
                        mean: tp.mean * k,
                        variance: tp.variance * k * k,
                    };
                    acc.push(self.measure.of_gaussian(&cycles, &self.risk)?);
                }
            }
            if acc.is_empty() {
                return Err(Error::Infeasible(format!("UE {m} has too few completed samples on every BS")));
            }
            compute[m] = acc.iter().sum::<f64>() / acc.len() as f64;
        }
        Ok(CostTable { transmission, compute })
    }

    fn compute_coefficients(&self) -> Result<Vec<f64>> {
        let k = self.n_ue().div_ceil(self.n_bs());
        Ok(self.table(&vec![vec![k; self.n_bs()]; self.n_ue()])?.compute)
    }

    /// Worst model-predicted E2E risk under the plan's actual loads and
    /// frequencies.
    fn objective(&self, plan: &AllocationPlan) -> Result<f64> {
        let loads = plan.loads();
        let mut worst: f64 = 0.0;
        for m in plan.served_ues() {
            let n = plan.serving_bs(m).expect("served");
            let Some((law, f_ref)) = self.link_law(m, n, loads[n])? else {
                return Ok(f64::INFINITY);
            };
            let r = f_ref / plan.frequencies[m][n];
            let g = Gaussian {
                mean: law.mean[0] + r * law.mean[1],
                variance: law.cov[0][0] + r * r * law.cov[1][1] + 2.0 * r * law.cov[0][1],
            };
            worst = worst.max(self.measure.of_gaussian(&g, &self.risk)?);
        }
        Ok(worst)
    }
}

fn check_capacity(n_ue: usize, capacity: &[usize]) -> Result<()> {
    let total: usize = capacity.iter().sum();
    if total < n_ue {
        return Err(Error::Infeasible(format!(
            "total BS capacity {total} is below the number of UEs {n_ue}"
        )));
    }
    Ok(())
}

/// Capacity-respecting bipartite matching on edges with `cost <= t`.
fn matching_exists(costs: &[Vec<f64>], capacity: &[usize], t: f64) -> bool {
    let n_bs = capacity.len();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n_bs];

    fn augment(
        m: usize,
        costs: &[Vec<f64>],
        capacity: &[usize],
        t: f64,
        owners: &mut Vec<Vec<usize>>,
        seen: &mut [bool],
    ) -> bool {
        for n in 0..capacity.len() {
            if costs[m][n] > t || seen[n] || capacity[n] == 0 {
                continue;
            }
            seen[n] = true;
            if owners[n].len() < capacity[n] {
                owners[n].push(m);
                return true;
            }
            for k in 0..owners[n].len() {
                let other = owners[n][k];
                if augment(other, costs, capacity, t, owners, seen) {
                    owners[n][k] = m;
                    return true;
                }
            }
        }
        false
    }

    (0..costs.len()).all(|m| {
        let mut seen = vec![false; n_bs];
        augment(m, costs, capacity, t, &mut owners, &mut seen)
    })
}

/// Minimum-sum assignment using only edges with `cost <= t`, by successive
/// shortest paths on the UE/BS flow network.
fn min_sum_assignment(costs: &[Vec<f64>], capacity: &[usize], t: f64) -> Option<Vec<usize>> {
    let (m_ue, n_bs) = (costs.len(), capacity.len());
    // nodes: 0 source, 1..=M UEs, M+1..=M+N BSs, M+N+1 sink
    let (src, sink) = (0, m_ue + n_bs + 1);
    let n_nodes = sink + 1;
    struct Edge {
        to: usize,
        cap: usize,
        cost: f64,
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let mut add = |edges: &mut Vec<Edge>, a: usize, b: usize, cap: usize, cost: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost });
        adj[b].push(edges.len());
        edges.push(Edge { to: a, cap: 0, cost: -cost });
    };
    for m in 0..m_ue {
        add(&mut edges, src, 1 + m, 1, 0.0);
        for n in 0..n_bs {
            if costs[m][n] <= t {
                add(&mut edges, 1 + m, 1 + m_ue + n, 1, costs[m][n]);
            }
        }
    }
    for (n, &c) in capacity.iter().enumerate() {
        add(&mut edges, 1 + m_ue + n, sink, c, 0.0);
    }
    for _ in 0..m_ue {
        // Bellman-Ford; the residual graph has no negative cycles.
        let mut dist = vec![f64::INFINITY; n_nodes];
        let mut prev: Vec<Option<usize>> = vec![None; n_nodes];
        dist[src] = 0.0;
        for _ in 0..n_nodes {
            let mut changed = false;
            for u in 0..n_nodes {
                if dist[u].is_infinite() {
                    continue;
                }
                for &e in &adj[u] {
                    let ed = &edges[e];
                    let nd = dist[u] + ed.cost;
                    if ed.cap > 0 && nd < dist[ed.to] - 1e-12 * nd.abs().max(1.0) {
                        dist[ed.to] = nd;
                        prev[ed.to] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink].is_infinite() {
            return None;
        }
        let mut v = sink;
        while let Some(e) = prev[v] {
            edges[e].cap -= 1;
            edges[e ^ 1].cap += 1;
            v = edges[e ^ 1].to;
        }
    }
    let mut out = vec![usize::MAX; m_ue];
    for m in 0..m_ue {
        for &e in &adj[1 + m] {
            let ed = &edges[e];
            if ed.to > m_ue && ed.to <= m_ue + n_bs && e % 2 == 0 && ed.cap == 0 {
                out[m] = ed.to - 1 - m_ue;
            }
        }
    }
    out.iter().all(|&n| n != usize::MAX).then_some(out)
}

/// Bottleneck assignment: every UE gets exactly one BS, BS loads respect
/// `capacity`, the largest cost is minimal, and among such assignments the
/// total cost is minimal.
pub fn assign_tasks(costs: &[Vec<f64>], capacity: &[usize]) -> Result<Vec<usize>> {
    let n_ue = costs.len();
    if n_ue == 0 {
        return Ok(Vec::new());
    }
    if let Some((m, row)) = costs.iter().enumerate().find(|(_, r)| r.len() != capacity.len()) {
        return Err(Error::DimensionMismatch {
            expected: format!("{} BS columns", capacity.len()),
            found: format!("{} in row {m}", row.len()),
        });
    }
    check_capacity(n_ue, capacity)?;
    for (m, row) in costs.iter().enumerate() {
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::MissingCosts(
                row.iter().enumerate().filter(|(_, v)| v.is_nan()).map(|(n, _)| (m, n)).collect(),
            ));
        }
        if !row.iter().any(|v| v.is_finite()) {
            return Err(Error::Infeasible(format!("UE {m} has no feasible BS")));
        }
    }
    let mut values: Vec<f64> = costs.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if !matching_exists(costs, capacity, values[values.len() - 1]) {
        return Err(Error::Infeasible("no capacity-respecting assignment over feasible pairs".into()));
    }
    let (mut lo, mut hi) = (0, values.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if matching_exists(costs, capacity, values[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    min_sum_assignment(costs, capacity, values[lo])
        .ok_or_else(|| Error::Infeasible("min-sum refinement failed at the bottleneck threshold".into()))
}

/// `f_m = a_m f_max / Σ_{m' on the same BS} a_m'`.
pub fn allocate_frequency(assignment: &[Option<usize>], coef: &[f64], n_bs: usize, f_max_hz: f64) -> Result<Vec<f64>> {
    if coef.len() != assignment.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} coefficients", assignment.len()),
            found: coef.len().to_string(),
        });
    }
    let mut sums = vec![0.0; n_bs];
    for (m, n) in assignment.iter().enumerate() {
        if let Some(n) = n {
            if *n >= n_bs {
                return Err(Error::arg(format!("UE {m} assigned to unknown BS {n}")));
            }
            let a = coef[m];
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::arg(format!(
                    "compute coefficient of served UE {m} must be positive and finite, got {a}"
                )));
            }
            sums[*n] += a;
        }
    }
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(m, n)| n.map_or(0.0, |n| coef[m] * f_max_hz / sums[n]))
        .collect())
}

/// Per-BS worst `a_m / f_m` of an allocation.
pub fn compute_risk(assignment: &[Option<usize>], coef: &[f64], freq: &[f64]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter(|(_, n)| n.is_some())
        .map(|(m, _)| coef[m] / freq[m])
        .fold(0.0, f64::max)
}

pub fn plan_from_assignment(
    assignment: &[usize],
    coef: &[f64],
    s: &NetworkScenario,
) -> Result<AllocationPlan> {
    let serving: Vec<Option<usize>> = assignment.iter().map(|&n| Some(n)).collect();
    let f = allocate_frequency(&serving, coef, s.n_bs, s.f_max_hz)?;
    Ok(AllocationPlan::from_serving(s.n_bs, &serving, &f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub plan: AllocationPlan,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn shares_for(current: Option<&[usize]>, n_ue: usize, n_bs: usize) -> Vec<Vec<usize>> {
    match current {
        None => {
            let k = n_ue.div_ceil(n_bs.max(1)).max(1);
            vec![vec![k; n_bs]; n_ue]
        }
        Some(a) => {
            let mut loads = vec![0usize; n_bs];
            for &n in a {
                loads[n] += 1;
            }
            (0..n_ue)
                .map(|m| (0..n_bs).map(|n| if a[m] == n { loads[n] } else { loads[n] + 1 }).collect())
                .collect()
        }
    }
}

/// Alternates assignment and frequency allocation. With load-coupled costs
/// the transmission table is rebuilt from the previous assignment's loads
/// until the assignment repeats or `max_iters` is reached; the plan with the
/// best objective is kept and `converged` reports whether it settled. With
/// `local_search`, the kept plan is then improved by single-UE moves and
/// pairwise swaps under the model objective.
pub fn optimize(model: &dyn CostModel, s: &NetworkScenario, max_iters: usize, local_search: bool) -> Result<PlanOutcome> {
    if model.n_ue() != s.n_ue || model.n_bs() != s.n_bs {
        return Err(Error::DimensionMismatch {
            expected: format!("{} UEs x {} BSs", s.n_ue, s.n_bs),
            found: format!("{} x {}", model.n_ue(), model.n_bs()),
        });
    }
    let capacity = vec![s.per_bs_capacity; s.n_bs];
    let mut current: Option<Vec<usize>> = None;
    let mut best: Option<(PlanOutcome, Vec<usize>, Vec<f64>)> = None;
    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iters.max(1) {
        iterations = it;
        let table = model.table(&shares_for(current.as_deref(), s.n_ue, s.n_bs))?;
        table.validate(s.n_ue, s.n_bs)?;
        let assignment = assign_tasks(&table.transmission, &capacity)?;
        if !seen.contains(&assignment) {
            let plan = plan_from_assignment(&assignment, &table.compute, s)?;
            let objective = model.objective(&plan)?;
            if best.as_ref().is_none_or(|b| objective < b.0.objective) {
                let out = PlanOutcome {
                    plan,
                    objective,
                    iterations: it,
                    converged: false,
                };
                best = Some((out, assignment.clone(), table.compute));
            }
            seen.push(assignment.clone());
        }
        if current.as_ref() == Some(&assignment) {
            iterations = it - 1;
            converged = true;
            break;
        }
        if !model.load_coupled() {
            converged = true;
            break;
        }
        current = Some(assignment);
    }
    let (mut out, assignment, coef) = best.expect("at least one plan");
    out.iterations = iterations;
    out.converged = converged;
    if local_search {
        let (plan, objective) = improve_locally(model, s, assignment, &coef, out.objective)?;
        out.plan = plan;
        out.objective = objective;
    }
    Ok(out)
}

/// Steepest descent over capacity-respecting single-UE moves and pairwise
/// swaps, re-allocating frequencies in closed form after each change.
fn improve_locally(
    model: &dyn CostModel,
    s: &NetworkScenario,
    mut assignment: Vec<usize>,
    coef: &[f64],
    mut objective: f64,
) -> Result<(AllocationPlan, f64)> {
    let (m_ue, n_bs) = (s.n_ue, s.n_bs);
    let mut candidates: Vec<(usize, usize, bool)> = Vec::new();
    for m in 0..m_ue {
        for n in 0..n_bs {
            candidates.push((m, n, false));
        }
        for k in m + 1..m_ue {
            candidates.push((m, k, true));
        }
    }
    for _ in 0..4 * m_ue.max(1) {
        let mut loads = vec![0usize; n_bs];
        for &n in &assignment {
            loads[n] += 1;
        }
        let a = &assignment;
        let found = candidates
            .par_iter()
            .enumerate()
            .filter_map(|(i, &(m, x, swap))| {
                let mut b = a.clone();
                if swap {
                    if a[m] == a[x] {
                        return None;
                    }
                    b.swap(m, x);
                } else {
                    if a[m] == x || loads[x] >= s.per_bs_capacity {
                        return None;
                    }
                    b[m] = x;
                }
                Some(plan_from_assignment(&b, coef, s).and_then(|p| Ok((model.objective(&p)?, i, b))))
            })
            .try_reduce_with(|x, y| Ok(if (y.0, y.1) < (x.0, x.1) { y } else { x }))
            .transpose()?;
        match found {
            Some((obj, _, b)) if obj < objective * (1.0 - 1e-12) => {
                objective = obj;
                assignment = b;
            }
            _ => break,
        }
    }
    Ok((plan_from_assignment(&assignment, coef, s)?, objective))
}

/// Global optimum over all `N^M` capacity-feasible assignments, each with
/// its closed-form frequency allocation, under `model.objective`. Ties go
/// to the lexicographically smallest assignment.
pub fn exhaustive_search(model: &dyn CostModel, s: &NetworkScenario) -> Result<PlanOutcome> {
    let total = (s.n_bs as f64).powi(s.n_ue as i32);
    if total > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge {
            assignments: total,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let coef = model.compute_coefficients()?;
    let (m_ue, n_bs) = (s.n_ue, s.n_bs);
    let decode = |mut i: u64| -> Vec<usize> {
        // most significant digit is UE 0
        let mut a = vec![0usize; m_ue];
        for m in (0..m_ue).rev() {
            a[m] = (i % n_bs as u64) as usize;
            i /= n_bs as u64;
        }
        a
    };
    let best = (0..total as u64)
        .into_par_iter()
        .filter_map(|i| {
            let a = decode(i);
            let mut loads = vec![0usize; n_bs];
            for &n in &a {
                loads[n] += 1;
            }
            if loads.iter().any(|&l| l > s.per_bs_capacity) {
                return None;
            }
            Some(
                plan_from_assignment(&a, &coef, s)
                    .and_then(|p| Ok((model.objective(&p)?, i, p))),
            )
        })
        .try_reduce_with(|x, y| {
            Ok(if (y.0, y.1) < (x.0, x.1) || x.0.is_nan() { y } else { x })
        })
        .ok_or_else(|| Error::Infeasible("no capacity-feasible assignment".into()))??;
    Ok(PlanOutcome {
        plan: best.2,
        objective: best.0,
        iterations: 1,
        converged: true,
    })
}

/// Plans with the empirical bank costs of `method`.
pub fn plan_empirical(
    bank: &SampleBank,
    method: Method,
    risk: RiskSpec,
    s: &NetworkScenario,
    max_iters: usize,
    local_search: bool,
) -> Result<PlanOutcome> {
    let model = BankCosts::new(bank, method, risk);
    match method {
        Method::Oracle => exhaustive_search(&model, s),
        _ => optimize(&model, s, max_iters, local_search),
    }
}

/// Minimises the worst mean delay.
pub fn baseline_1(bank: &SampleBank, risk: RiskSpec, s: &NetworkScenario, max_iters: usize, local_search: bool) -> Result<PlanOutcome> {
    plan_empirical(bank, Method::Baseline1, risk, s, max_iters, local_search)
}

/// Minimises the worst `E[τ] + β·CVaR_α(τ)`.
pub fn baseline_2(bank: &SampleBank, risk: RiskSpec, s: &NetworkScenario, max_iters: usize, local_search: bool) -> Result<PlanOutcome> {
    plan_empirical(bank, Method::Baseline2, risk, s, max_iters, local_search)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub method: Method,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_vs_oracle: Option<f64>,
}

impl PlanDiagnostics {
    pub fn new(method: Method, out: &PlanOutcome, oracle: Option<f64>) -> Self {
        Self {
            method,
            objective: out.objective,
            iterations: out.iterations,
            converged: out.converged,
            warning: (!out.converged).then(|| "assignment did not settle within max_iters; returning the best plan seen".to_string()),
            oracle_objective: oracle,
            gap_vs_oracle: oracle.map(|o| out.objective / o - 1.0),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn write_plan_csv(path: &Path, plan: &AllocationPlan) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["ue_id", "bs_id", "f_hz"])?;
    for m in plan.served_ues() {
        let n = plan.serving_bs(m).expect("served");
        w.write_record([m.to_string(), n.to_string(), plan.frequencies[m][n].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_plan_csv(path: &Path, n_ue: usize, n_bs: usize) -> Result<AllocationPlan> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut plan = AllocationPlan::empty(n_ue, n_bs);
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        let bad = |msg: String| Error::Trace {
            path: path.to_path_buf(),
            line,
            message: msg,
        };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let m: usize = rec[0].parse().map_err(|_| bad(format!("bad ue_id `{}`", &rec[0])))?;
        let n: usize = rec[1].parse().map_err(|_| bad(format!("bad bs_id `{}`", &rec[1])))?;
        let f: f64 = rec[2].parse().map_err(|_| bad(format!("bad f_hz `{}`", &rec[2])))?;
        if m >= n_ue || n >= n_bs {
            return Err(Error::DimensionMismatch {
                expected: format!("ue_id < {n_ue}, bs_id < {n_bs}"),
                found: format!("({m}, {n}) on line {line}"),
            });
        }
        plan.assignment[m][n] = true;
        plan.frequencies[m][n] = f;
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, Scale};
    use crate::scenario::validate_plan;
    use crate::seed::StreamRng;
    use crate::sim::CycleSource;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn brute_bottleneck(costs: &[Vec<f64>], cap: &[usize]) -> f64 {
        let (m, n) = (costs.len(), cap.len());
        let mut best = f64::INFINITY;
        for i in 0..(n as u64).pow(m as u32) {
            let mut x = i;
            let mut loads = vec![0; n];
            let mut worst: f64 = 0.0;
            for row in costs {
                let b = (x % n as u64) as usize;
                x /= n as u64;
                loads[b] += 1;
                worst = worst.max(row[b]);
            }
            if loads.iter().zip(cap).all(|(l, c)| l <= c) {
                best = best.min(worst);
            }
        }
        best
    }

    fn max_cost(costs: &[Vec<f64>], a: &[usize]) -> f64 {
        a.iter().enumerate().map(|(m, &n)| costs[m][n]).fold(0.0, f64::max)
    }

    #[test]
    fn assignment_examples() {
        let c = vec![vec![1.0, 5.0], vec![4.0, 2.0]];
        let a = assign_tasks(&c, &[1, 1]).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(max_cost(&c, &a), 2.0);
        assert_eq!(assign_tasks(&[vec![3.0], vec![1.0], vec![2.0]], &[3]).unwrap(), vec![0, 0, 0]);
        assert!(matches!(assign_tasks(&c, &[1, 0]), Err(Error::Infeasible(_))));
        assert!(matches!(
            assign_tasks(&[vec![f64::INFINITY, f64::INFINITY]], &[1, 1]),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn frequency_examples() {
        let f = allocate_frequency(&[Some(0), Some(0)], &[1.0, 3.0], 1, 4e9).unwrap();
        assert!((f[0] - 1e9).abs() < 1e-3 && (f[1] - 3e9).abs() < 1e-3);
        assert_eq!(allocate_frequency(&[Some(1)], &[7.0], 2, 4e9).unwrap(), vec![4e9]);
        let f = allocate_frequency(&[Some(0); 4], &[2.0; 4], 1, 8e9).unwrap();
        assert!(f.iter().all(|&v| v == 2e9));
        assert_eq!(allocate_frequency(&[None, Some(0)], &[0.0, 1.0], 1, 1e9).unwrap(), vec![0.0, 1e9]);
        assert!(allocate_frequency(&[Some(0)], &[0.0], 1, 1e9).is_err());
    }

    #[test]
    fn decoupled_costs_converge_in_one_iteration() {
        let s = Config::preset(Scale::Desk).scenario().unwrap().truncated(2);
        let mut r = StreamRng::seed_from_u64(3);
        let table = CostTable {
            transmission: (0..2).map(|_| (0..s.n_bs).map(|_| r.random_range(1.0..9.0)).collect()).collect(),
            compute: vec![1e7, 2e7],
        };
        let out = optimize(&FixedCosts(table), &s, 10, false).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert!(validate_plan(&out.plan, &s).unwrap().is_empty());
    }

    #[test]
    fn deterministic_delays_give_identical_plans() {
        let s = Config::preset(Scale::Desk).scenario().unwrap().truncated(6);
        let mut r = StreamRng::seed_from_u64(4);
        let mean = CostTable {
            transmission: (0..6).map(|_| (0..s.n_bs).map(|_| r.random_range(1.0..9.0)).collect()).collect(),
            compute: (0..6).map(|_| r.random_range(1e7..5e7)).collect(),
        };
        // constants: CVaR = mean, so β·CVaR and (1+β)·mean are positive rescalings
        let proposed = optimize(&FixedCosts(mean.scaled(0.5)), &s, 5, false).unwrap();
        let b1 = optimize(&FixedCosts(mean.clone()), &s, 5, false).unwrap();
        let b2 = optimize(&FixedCosts(mean.scaled(1.5)), &s, 5, false).unwrap();
        assert_eq!(proposed.plan.assignment, b1.plan.assignment);
        assert_eq!(b2.plan.assignment, b1.plan.assignment);
    }

    #[test]
    fn exhaustive_picks_cheaper_bs_and_rejects_large() {
        let mut s = Config::preset(Scale::Desk).scenario().unwrap().truncated(1);
        s.n_bs = 2;
        s.bs_positions.truncate(2);
        let t = CostTable {
            transmission: vec![vec![5.0, 2.0]],
            compute: vec![1e7],
        };
        let out = exhaustive_search(&FixedCosts(t), &s).unwrap();
        assert_eq!(out.plan.serving_bs(0), Some(1));
        let big = Config::preset(Scale::Paper).scenario().unwrap();
        let t = CostTable {
            transmission: vec![vec![1.0; big.n_bs]; big.n_ue],
            compute: vec![1.0; big.n_ue],
        };
        assert!(matches!(exhaustive_search(&FixedCosts(t), &big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn two_by_two_agrees_with_enumeration() {
        let mut s = Config::preset(Scale::Desk).scenario().unwrap().truncated(2);
        s.n_bs = 2;
        s.bs_positions.truncate(2);
        let mut r = StreamRng::seed_from_u64(8);
        for _ in 0..200 {
            let t = CostTable {
                transmission: (0..2).map(|_| (0..2).map(|_| r.random_range(0.0..10.0)).collect()).collect(),
                compute: vec![1e-9, 1e-9],
            };
            let heuristic = optimize(&FixedCosts(t.clone()), &s, 3, false).unwrap();
            let oracle = exhaustive_search(&FixedCosts(t), &s).unwrap();
            assert!((heuristic.objective - oracle.objective).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_table_reports_missing_pairs() {
        let t = CostTable {
            transmission: vec![vec![1.0, f64::NAN], vec![f64::NAN, 2.0]],
            compute: vec![1.0, 1.0],
        };
        match t.validate(2, 2) {
            Err(Error::MissingCosts(p)) => assert_eq!(p, vec![(0, 1), (1, 0)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bank_costs_constant_delay_and_beta_linearity() {
        let mut s = Config::preset(Scale::Desk).scenario().unwrap().truncated(1);
        s.n_bs = 1;
        s.bs_positions.truncate(1);
        s.sinr_decode_threshold = f64::NEG_INFINITY;
        s.bandwidth_hz = 1e12;
        s.tasks.cycles_sigma = 0.0;
        let bank = SampleBank::build(&s, &CycleSource::from_scenario(&s), 200, 1).unwrap();
        let r = RiskSpec::new(0.1, 0.4, 30.0).unwrap();
        let t = BankCosts::new(&bank, Method::Proposed, r).table(&[vec![1]]).unwrap();
        let direct = 0.4 * risk::cvar_empirical(&bank.transmission_ms(0, 0, 1), 0.1).unwrap();
        assert_eq!(t.transmission[0][0], direct);
        assert!((t.compute[0] - 0.4 * s.tasks.cycles_median).abs() < 1e-3);
        let r2 = RiskSpec::new(0.1, 0.8, 30.0).unwrap();
        let t2 = BankCosts::new(&bank, Method::Proposed, r2).table(&[vec![1]]).unwrap();
        assert!((t2.transmission[0][0] - 2.0 * t.transmission[0][0]).abs() < 1e-12);
    }

    #[test]
    fn plan_csv_roundtrip() {
        let s = Config::preset(Scale::Desk).scenario().unwrap();
        let serving: Vec<_> = (0..s.n_ue).map(|m| Some(m % s.n_bs)).collect();
        let plan = crate::data::equal_share_plan(&s, &serving);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.csv");
        write_plan_csv(&p, &plan).unwrap();
        assert_eq!(read_plan_csv(&p, s.n_ue, s.n_bs).unwrap(), plan);
    }

    proptest! {
        #[test]
        fn bottleneck_is_exact(seed in 0u64..10_000, cap in 2usize..7) {
            let mut r = StreamRng::seed_from_u64(seed);
            let costs: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| r.random_range(0.0..10.0)).collect()).collect();
            let capacity = vec![cap; 3];
            let a = assign_tasks(&costs, &capacity).unwrap();
            let mut loads = [0; 3];
            for &n in &a { loads[n] += 1; }
            prop_assert!(loads.iter().all(|&l| l <= cap));
            prop_assert_eq!(max_cost(&costs, &a), brute_bottleneck(&costs, &capacity));
        }

        #[test]
        fn assignments_are_scale_invariant(seed in 0u64..10_000, c in 0.01..100.0f64) {
            let mut r = StreamRng::seed_from_u64(seed);
            let costs: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| r.random_range(0.0..10.0)).collect()).collect();
            let scaled: Vec<Vec<f64>> = costs.iter().map(|row| row.iter().map(|v| v * c).collect()).collect();
            prop_assert_eq!(assign_tasks(&costs, &[2, 2, 2]).unwrap(), assign_tasks(&scaled, &[2, 2, 2]).unwrap());
        }

        #[test]
        fn frequency_budget_is_met(seed in 0u64..10_000) {
            let mut r = StreamRng::seed_from_u64(seed);
            let m = r.random_range(1..12);
            let assignment: Vec<Option<usize>> = (0..m).map(|_| Some(r.random_range(0..3))).collect();
            let coef: Vec<f64> = (0..m).map(|_| r.random_range(0.1..10.0)).collect();
            let f = allocate_frequency(&assignment, &coef, 3, 2e10).unwrap();
            for n in 0..3 {
                let total: f64 = (0..m).filter(|&i| assignment[i] == Some(n)).map(|i| f[i]).sum();
                prop_assert!(total <= 2e10 * (1.0 + 1e-12));
            }
        }
    }
}
