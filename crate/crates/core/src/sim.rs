//! Monte-Carlo simulation of transmission and edge-computing latency.
//!
//! A transmission attempt draws a fresh Rayleigh power gain for the wanted
//! link and for every co-channel interferer, evaluates the SINR and decodes
//! iff it reaches the decode threshold. Attempts repeat until the first
//! success or until `max_retx` retransmissions have failed. Every attempt,
//! failed or not, occupies `⌈I / (R·T)⌉` TTIs of its own rate; failed ones are
//! clamped to `[1, max_attempt_ttis]`.
//!
//! Attempts are stored at the full-band rate so the same draws can be
//! re-evaluated for any number of UEs sharing the BS bandwidth.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{AllocationPlan, NetworkScenario, TaskModel, TaskSpec};
use crate::seed::{self, ns, StreamRng};

/// Relative guard so that `⌈x⌉` of an exactly integral ratio is not bumped
/// up by floating-point noise.
const CEIL_GUARD: f64 = 1e-12;

/// Realised channel state for one transmission attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkDraw {
    pub fading_gain: f64,
    pub pathloss_lin: f64,
    pub interference_mw: f64,
}

pub fn sinr_uplink(draw: &LinkDraw, s: &NetworkScenario) -> f64 {
    s.gain_ue * s.gain_bs * s.p_ue_mw * draw.fading_gain * draw.pathloss_lin
        / (draw.interference_mw + s.noise_mw())
}

pub fn sinr_downlink(draw: &LinkDraw, s: &NetworkScenario) -> f64 {
    s.gain_ue * s.gain_bs * s.p_bs_mw * draw.fading_gain * draw.pathloss_lin
        / (draw.interference_mw + s.noise_mw())
}

/// Shannon rate `w·log2(1+γ)` in bit/s.
pub fn rate(gamma: f64, bandwidth_hz: f64) -> f64 {
    bandwidth_hz * gamma.ln_1p() / std::f64::consts::LN_2
}

/// TTIs needed to push `bits` at `rate_bps`; infinite for a zero rate.
pub fn attempt_ttis(bits: f64, rate_bps: f64, tti_s: f64) -> f64 {
    if rate_bps <= 0.0 {
        return f64::INFINITY;
    }
    let x = bits / (rate_bps * tti_s);
    (x * (1.0 - CEIL_GUARD)).ceil().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Uplink,
    Downlink,
}

/// One transmission attempt, evaluated at the full BS bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub sinr: f64,
    pub full_rate_bps: f64,
    pub decoded: bool,
}

/// The wanted link and the co-channel transmitters that can hit it.
///
/// Each interferer group is one other cell; per attempt the cell is active
/// with probability `activity_factor` and, if so, one of its candidate
/// transmitters (chosen uniformly) interferes through its own path loss and
/// an independent fading draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkChannel {
    pub direction: Direction,
    pub pathloss_lin: f64,
    /// Mean received interference power (mW, before fading) per candidate.
    pub interferer_groups: Vec<Vec<f64>>,
}

impl LinkChannel {
    /// Channel between UE `ue` and BS `bs`. Uplink interferers are the UEs
    /// whose nearest BS is another cell; downlink interferers are the other
    /// BSs.
    pub fn new(s: &NetworkScenario, ue: usize, bs: usize, direction: Direction) -> Self {
        let g = s.gain_ue * s.gain_bs;
        let interferer_groups = (0..s.n_bs)
            .filter(|&other| other != bs)
            .map(|other| match direction {
                Direction::Uplink => (0..s.n_ue)
                    .filter(|&u| u != ue && s.nearest_bs(u) == other)
                    .map(|u| g * s.p_ue_mw * s.pathloss_lin(u, bs))
                    .collect::<Vec<_>>(),
                Direction::Downlink => vec![g * s.p_bs_mw * s.pathloss_lin(ue, other)],
            })
            .filter(|group| !group.is_empty())
            .collect();
        Self {
            direction,
            pathloss_lin: s.pathloss_lin(ue, bs),
            interferer_groups,
        }
    }

    pub fn without_interference(mut self) -> Self {
        self.interferer_groups.clear();
        self
    }

    pub fn draw(&self, s: &NetworkScenario, rng: &mut StreamRng) -> LinkDraw {
        let fading_gain: f64 = Exp1.sample(rng);
        let mut interference_mw = 0.0;
        for group in &self.interferer_groups {
            let active = rng.random::<f64>() < s.activity_factor;
            let pick = rng.random_range(0..group.len());
            let h: f64 = Exp1.sample(rng);
            if active {
                interference_mw += group[pick] * h;
            }
        }
        LinkDraw {
            fading_gain,
            pathloss_lin: self.pathloss_lin,
            interference_mw,
        }
    }

    pub fn sinr(&self, draw: &LinkDraw, s: &NetworkScenario) -> f64 {
        match self.direction {
            Direction::Uplink => sinr_uplink(draw, s),
            Direction::Downlink => sinr_downlink(draw, s),
        }
    }
}

/// Attempts for one packet in one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionDraws {
    pub bits: f64,
    pub attempts: Vec<Attempt>,
}

impl DirectionDraws {
    pub fn success(&self) -> bool {
        self.attempts.last().is_some_and(|a| a.decoded)
    }

    /// Total TTIs when the BS bandwidth is split `share` ways.
    pub fn ttis(&self, s: &NetworkScenario, share: usize) -> u64 {
        direction_ttis(
            self.bits,
            self.attempts.iter().map(|a| (a.full_rate_bps, a.decoded)),
            s,
            share,
        )
    }
}

/// Sum of per-attempt TTIs for attempts given as `(full-band rate, decoded)`.
pub fn direction_ttis(
    bits: f64,
    attempts: impl Iterator<Item = (f64, bool)>,
    s: &NetworkScenario,
    share: usize,
) -> u64 {
    let k = if s.share_bandwidth { share.max(1) as f64 } else { 1.0 };
    let cap = f64::from(s.max_attempt_ttis);
    let tti_s = s.tti_s();
    attempts
        .map(|(r, decoded)| {
            let t = attempt_ttis(bits, r / k, tti_s);
            if decoded {
                t
            } else {
                t.min(cap)
            }
        })
        .sum::<f64>() as u64
}

/// Draws attempts until the first decode or until the retransmission cap.
pub fn draw_direction(
    bits: f64,
    channel: &LinkChannel,
    s: &NetworkScenario,
    rng: &mut StreamRng,
) -> DirectionDraws {
    let threshold = s.decode_threshold_lin();
    let mut attempts = Vec::with_capacity(2);
    for _ in 0..=s.max_retx {
        let draw = channel.draw(s, rng);
        let sinr = channel.sinr(&draw, s);
        let full_rate_bps = rate(sinr, s.bandwidth_hz);
        let decoded = sinr >= threshold && full_rate_bps > 0.0;
        attempts.push(Attempt {
            sinr,
            full_rate_bps,
            decoded,
        });
        if decoded {
            break;
        }
    }
    DirectionDraws { bits, attempts }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionLatency {
    pub ttis: u64,
    pub attempts: u32,
    pub success: bool,
}

/// Latency of one packet in one direction; `success = false` marks a task
/// dropped after `max_retx` failed retransmissions.
pub fn one_direction_latency(
    bits: f64,
    channel: &LinkChannel,
    s: &NetworkScenario,
    share: usize,
    rng: &mut StreamRng,
) -> Result<DirectionLatency> {
    if !(bits > 0.0) {
        return Err(Error::arg(format!("packet size must be positive, got {bits}")));
    }
    let d = draw_direction(bits, channel, s, rng);
    Ok(DirectionLatency {
        ttis: d.ttis(s, share),
        attempts: d.attempts.len() as u32,
        success: d.success(),
    })
}

/// Uplink and downlink draws for one task on one (UE, BS) link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionDraws {
    pub uplink: DirectionDraws,
    pub downlink: DirectionDraws,
}

impl TransmissionDraws {
    pub fn success(&self) -> bool {
        self.uplink.success() && self.downlink.success()
    }

    /// τ_t = τ_u + τ_d in TTIs, or `None` if either direction was dropped.
    pub fn tau_t_ttis(&self, s: &NetworkScenario, share: usize) -> Option<u64> {
        self.success()
            .then(|| self.uplink.ttis(s, share) + self.downlink.ttis(s, share))
    }
}

/// Precomputed uplink/downlink channels for every (UE, BS) pair.
#[derive(Debug, Clone)]
pub struct ChannelMap {
    up: Vec<LinkChannel>,
    down: Vec<LinkChannel>,
    n_bs: usize,
}

impl ChannelMap {
    pub fn new(s: &NetworkScenario) -> Self {
        let pairs: Vec<(usize, usize)> = (0..s.n_ue)
            .flat_map(|m| (0..s.n_bs).map(move |n| (m, n)))
            .collect();
        let (up, down) = pairs
            .par_iter()
            .map(|&(m, n)| {
                (
                    LinkChannel::new(s, m, n, Direction::Uplink),
                    LinkChannel::new(s, m, n, Direction::Downlink),
                )
            })
            .unzip();
        Self {
            up,
            down,
            n_bs: s.n_bs,
        }
    }

    pub fn uplink(&self, ue: usize, bs: usize) -> &LinkChannel {
        &self.up[ue * self.n_bs + bs]
    }

    pub fn downlink(&self, ue: usize, bs: usize) -> &LinkChannel {
        &self.down[ue * self.n_bs + bs]
    }

    pub fn draw_transmission(
        &self,
        s: &NetworkScenario,
        task: &TaskSpec,
        bs: usize,
        rng: &mut StreamRng,
    ) -> TransmissionDraws {
        let uplink = draw_direction(task.uplink_bits, self.uplink(task.ue_id, bs), s, rng);
        let downlink = draw_direction(task.downlink_bits, self.downlink(task.ue_id, bs), s, rng);
        TransmissionDraws { uplink, downlink }
    }
}

/// Outcome of `transmission_latency`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionLatency {
    pub uplink: DirectionLatency,
    pub downlink: DirectionLatency,
}

impl TransmissionLatency {
    pub fn success(&self) -> bool {
        self.uplink.success && self.downlink.success
    }

    pub fn tau_t_ttis(&self) -> u64 {
        self.uplink.ttis + self.downlink.ttis
    }
}

/// τ_t = τ_u + τ_d for UE `task.ue_id` served by BS `bs` with `share` UEs
/// on the BS bandwidth.
pub fn transmission_latency(
    channels: &ChannelMap,
    bs: usize,
    task: &TaskSpec,
    s: &NetworkScenario,
    share: usize,
    rng: &mut StreamRng,
) -> Result<TransmissionLatency> {
    let up = one_direction_latency(task.uplink_bits, channels.uplink(task.ue_id, bs), s, share, rng)?;
    let down = one_direction_latency(
        task.downlink_bits,
        channels.downlink(task.ue_id, bs),
        s,
        share,
        rng,
    )?;
    Ok(TransmissionLatency {
        uplink: up,
        downlink: down,
    })
}

/// τ_p = c_m / f(m,n) in ms.
pub fn compute_latency(task: &TaskSpec, f_alloc_hz: f64) -> Result<f64> {
    if !(f_alloc_hz > 0.0) || !f_alloc_hz.is_finite() {
        return Err(Error::arg(format!(
            "UE {} has no computing frequency allocated ({f_alloc_hz} Hz)",
            task.ue_id
        )));
    }
    Ok(task.total_cycles() / f_alloc_hz * 1e3)
}

/// τ = τ_t·T + τ_p in ms.
pub fn e2e_delay(tau_t_ttis: f64, tti_ms: f64, tau_p_ms: f64) -> f64 {
    tau_t_ttis * tti_ms + tau_p_ms
}

/// Empirical P(τ < τ_th), strict inequality.
pub fn reliability(samples: &[f64], tau_th_ms: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("reliability needs at least one delay sample".into()));
    }
    let below = samples.iter().filter(|&&x| x < tau_th_ms).count();
    Ok(below as f64 / samples.len() as f64)
}

/// Source of per-task computing demand (cycles).
#[derive(Debug, Clone, PartialEq)]
pub enum CycleSource {
    /// Per-UE lognormal demand.
    LogNormal(TaskModel),
    /// Replayed in order; entry `k mod len` feeds the k-th task of a stream.
    Trace(Arc<Vec<f64>>),
}

impl CycleSource {
    pub fn from_scenario(s: &NetworkScenario) -> Self {
        CycleSource::LogNormal(s.tasks.clone())
    }

    pub fn draw(&self, rng: &mut StreamRng, ue: usize, index: u64) -> f64 {
        match self {
            CycleSource::LogNormal(t) => {
                let (median, sigma) = t.cycles_params(ue);
                let z: f64 = rng.sample(StandardNormal);
                median * (sigma * z).exp()
            }
            CycleSource::Trace(values) => values[(index % values.len() as u64) as usize],
        }
    }
}

/// Draws payload sizes (whole bits, uniform) and computing demand.
pub fn draw_task(
    ue: usize,
    s: &NetworkScenario,
    cycles: &CycleSource,
    rng: &mut StreamRng,
    index: u64,
) -> TaskSpec {
    let t = &s.tasks;
    let up = rng.random_range(t.uplink_bits_min..=t.uplink_bits_max).round();
    let down = rng.random_range(t.downlink_bits_min..=t.downlink_bits_max).round();
    let c = cycles.draw(rng, ue, index);
    TaskSpec::with_total_cycles(ue, up.max(1.0), down.max(1.0), c)
}

/// One completed task: transmission TTIs and compute latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySample {
    pub drop_id: u64,
    pub ue_id: usize,
    pub bs_id: usize,
    pub tau_t_ttis: u64,
    pub tau_p_ms: f64,
}

impl DelaySample {
    pub fn e2e_ms(&self, tti_ms: f64) -> f64 {
        e2e_delay(self.tau_t_ttis as f64, tti_ms, self.tau_p_ms)
    }
}

/// A task that exhausted its retransmissions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedTask {
    pub drop_id: u64,
    pub ue_id: usize,
    pub bs_id: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulationRun {
    pub samples: Vec<DelaySample>,
    pub dropped: Vec<DroppedTask>,
}

impl SimulationRun {
    pub fn drop_rate(&self) -> f64 {
        let total = self.samples.len() + self.dropped.len();
        if total == 0 {
            0.0
        } else {
            self.dropped.len() as f64 / total as f64
        }
    }

    pub fn e2e_ms(&self, tti_ms: f64) -> Vec<f64> {
        self.samples.iter().map(|d| d.e2e_ms(tti_ms)).collect()
    }

    /// Completed E2E delays for one UE.
    pub fn e2e_ms_for(&self, ue: usize, tti_ms: f64) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|d| d.ue_id == ue)
            .map(|d| d.e2e_ms(tti_ms))
            .collect()
    }
}

/// Simulates `n_drops` independent drops of every served UE under `plan`.
///
/// Each (drop, UE) pair owns a random stream derived from `(seed, namespace,
/// drop, UE)`, so results are independent of thread scheduling and a UE's
/// draws do not depend on which other UEs are served.
pub fn simulate_plan(
    s: &NetworkScenario,
    plan: &AllocationPlan,
    cycles: &CycleSource,
    n_drops: usize,
    seed: u64,
    namespace: u64,
) -> Result<SimulationRun> {
    let served = plan.served_ues();
    if served.is_empty() {
        return Err(Error::Empty("plan serves no UE".into()));
    }
    let channels = ChannelMap::new(s);
    let loads = plan.loads();
    let jobs: Vec<(u64, usize)> = (0..n_drops as u64)
        .flat_map(|d| served.iter().map(move |&m| (d, m)))
        .collect();
    let outcomes: Vec<Result<std::result::Result<DelaySample, DroppedTask>>> = jobs
        .par_iter()
        .map(|&(drop_id, m)| {
            let n = plan.serving_bs(m).expect("served");
            let mut rng = seed::stream(seed, &[namespace, drop_id, m as u64]);
            let task = draw_task(m, s, cycles, &mut rng, drop_id * s.n_ue as u64 + m as u64);
            let t = transmission_latency(&channels, n, &task, s, loads[n], &mut rng)?;
            if !t.success() {
                return Ok(Err(DroppedTask {
                    drop_id,
                    ue_id: m,
                    bs_id: n,
                }));
            }
            let tau_p_ms = compute_latency(&task, plan.frequencies[m][n])?;
            Ok(Ok(DelaySample {
                drop_id,
                ue_id: m,
                bs_id: n,
                tau_t_ttis: t.tau_t_ttis(),
                tau_p_ms,
            }))
        })
        .collect();
    let mut run = SimulationRun::default();
    for o in outcomes {
        match o? {
            Ok(sample) => run.samples.push(sample),
            Err(dropped) => run.dropped.push(dropped),
        }
    }
    Ok(run)
}

/// Pre-drawn tasks and per-link attempts for every (sample, UE, BS).
///
/// Tasks are drawn once per (sample, UE) and shared by all BSs; each link
/// has its own channel stream. Transmission latency for any bandwidth share
/// is recomputed exactly from the stored full-band attempts, so costs under
/// different loads and plans use common random numbers.
#[derive(Debug, Clone)]
pub struct SampleBank {
    scenario: NetworkScenario,
    n_samples: usize,
    tasks: Vec<TaskSpec>,
    links: Vec<[Span; 2]>,
    rates: Vec<f64>,
    decoded: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
struct Span {
    start: u32,
    len: u16,
}

const TASK_STREAM: u64 = u64::MAX;

impl SampleBank {
    pub fn build(s: &NetworkScenario, cycles: &CycleSource, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::arg("sample bank needs at least one sample"));
        }
        let (m_ue, n_bs) = (s.n_ue, s.n_bs);
        let channels = ChannelMap::new(s);
        let cells: Vec<(usize, usize)> = (0..n_samples)
            .flat_map(|j| (0..m_ue).map(move |m| (j, m)))
            .collect();
        let drawn: Vec<(TaskSpec, Vec<TransmissionDraws>)> = cells
            .par_iter()
            .map(|&(j, m)| {
                let mut rng = seed::stream(seed, &[ns::BANK, j as u64, m as u64, TASK_STREAM]);
                let task = draw_task(m, s, cycles, &mut rng, (j * m_ue + m) as u64);
                let links = (0..n_bs)
                    .map(|n| {
                        let mut rng = seed::stream(seed, &[ns::BANK, j as u64, m as u64, n as u64]);
                        channels.draw_transmission(s, &task, n, &mut rng)
                    })
                    .collect();
                (task, links)
            })
            .collect();
        let mut bank = Self {
            scenario: s.clone(),
            n_samples,
            tasks: Vec::with_capacity(cells.len()),
            links: Vec::with_capacity(cells.len() * n_bs),
            rates: Vec::new(),
            decoded: Vec::new(),
        };
        for (task, links) in drawn {
            bank.tasks.push(task);
            for d in links {
                let up = bank.push(&d.uplink);
                let down = bank.push(&d.downlink);
                bank.links.push([up, down]);
            }
        }
        Ok(bank)
    }

    /// Changes the per-BS compute budget; no drawn quantity depends on it.
    pub fn set_f_max(&mut self, f_max_hz: f64) {
        self.scenario.f_max_hz = f_max_hz;
    }

    fn push(&mut self, d: &DirectionDraws) -> Span {
        let span = Span {
            start: self.rates.len() as u32,
            len: d.attempts.len() as u16,
        };
        for a in &d.attempts {
            self.rates.push(a.full_rate_bps);
            self.decoded.push(a.decoded);
        }
        span
    }

    pub fn scenario(&self) -> &NetworkScenario {
        &self.scenario
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn task(&self, m: usize, j: usize) -> &TaskSpec {
        &self.tasks[j * self.scenario.n_ue + m]
    }

    fn span_ttis(&self, bits: f64, span: Span, share: usize) -> Option<u64> {
        let r = span.start as usize..span.start as usize + span.len as usize;
        if !self.decoded[r.end - 1] {
            return None;
        }
        let it = self.rates[r.clone()].iter().copied().zip(self.decoded[r].iter().copied());
        Some(direction_ttis(bits, it, &self.scenario, share))
    }

    /// τ_t of sample `j` on link (m, n) with `share` UEs on BS n, or `None`
    /// if the task was dropped.
    pub fn tau_t_ttis(&self, m: usize, n: usize, share: usize, j: usize) -> Option<u64> {
        let task = self.task(m, j);
        let [up, down] = self.links[(j * self.scenario.n_ue + m) * self.scenario.n_bs + n];
        Some(self.span_ttis(task.uplink_bits, up, share)? + self.span_ttis(task.downlink_bits, down, share)?)
    }

    /// Completed transmission delays τ_t·T in ms.
    pub fn transmission_ms(&self, m: usize, n: usize, share: usize) -> Vec<f64> {
        (0..self.n_samples)
            .filter_map(|j| self.tau_t_ttis(m, n, share, j))
            .map(|t| t as f64 * self.scenario.tti_ms)
            .collect()
    }

    pub fn drop_rate(&self, m: usize, n: usize) -> f64 {
        let dropped = (0..self.n_samples)
            .filter(|&j| self.tau_t_ttis(m, n, 1, j).is_none())
            .count();
        dropped as f64 / self.n_samples as f64
    }

    pub fn cycles(&self, m: usize) -> Vec<f64> {
        (0..self.n_samples).map(|j| self.task(m, j).total_cycles()).collect()
    }

    /// Completed E2E delays in ms for UE m on BS n with `share` UEs and
    /// computing frequency `f_hz`.
    pub fn e2e_ms(&self, m: usize, n: usize, share: usize, f_hz: f64) -> Vec<f64> {
        (0..self.n_samples)
            .filter_map(|j| {
                let t = self.tau_t_ttis(m, n, share, j)?;
                Some(e2e_delay(t as f64, self.scenario.tti_ms, self.task(m, j).total_cycles() / f_hz * 1e3))
            })
            .collect()
    }

    /// `[(τ_t·T, τ_p)]` in ms of completed samples, in sample order.
    pub fn pairs_ms(&self, m: usize, n: usize, share: usize, f_hz: f64) -> Vec<[f64; 2]> {
        (0..self.n_samples)
            .filter_map(|j| {
                let t = self.tau_t_ttis(m, n, share, j)?;
                Some([t as f64 * self.scenario.tti_ms, self.task(m, j).total_cycles() / f_hz * 1e3])
            })
            .collect()
    }
}
