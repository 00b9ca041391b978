//! Delay datasets: generation, compute-trace ingestion, standardisation,
//! windowing and CSV persistence.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{AllocationPlan, NetworkScenario};
use crate::seed::{self, ns};
use crate::sim::{self, CycleSource, DelaySample};

/// Floor on per-channel standard deviation.
pub const STD_EPS: f64 = 1e-6;

pub const SAMPLE_HEADER: [&str; 6] = ["scenario_id", "drop_id", "ue_id", "bs_id", "tau_t_ttis", "tau_p_ms"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Channel 0 is τ_t·T in ms, channel 1 is τ_p in ms.
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }

    pub fn fit(records: &[DelaySample], tti_ms: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("cannot fit normalization on an empty dataset".into()));
        }
        let n = records.len() as f64;
        let mut mean = [0.0; 2];
        for r in records {
            let x = channels(r, tti_ms);
            mean[0] += x[0] / n;
            mean[1] += x[1] / n;
        }
        let mut var = [0.0; 2];
        for r in records {
            let x = channels(r, tti_ms);
            var[0] += (x[0] - mean[0]).powi(2) / n;
            var[1] += (x[1] - mean[1]).powi(2) / n;
        }
        Ok(Self {
            mean,
            std: [var[0].sqrt().max(STD_EPS), var[1].sqrt().max(STD_EPS)],
        })
    }

    pub fn standardize(&self, x: [f64; 2]) -> [f64; 2] {
        [
            (x[0] - self.mean[0]) / self.std[0],
            (x[1] - self.mean[1]) / self.std[1],
        ]
    }

    pub fn destandardize(&self, z: [f64; 2]) -> [f64; 2] {
        [
            z[0] * self.std[0] + self.mean[0],
            z[1] * self.std[1] + self.mean[1],
        ]
    }
}

/// `[τ_t·T, τ_p]` in ms.
pub fn channels(r: &DelaySample, tti_ms: f64) -> [f64; 2] {
    [r.tau_t_ttis as f64 * tti_ms, r.tau_p_ms]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayDataset {
    pub scenario_id: String,
    pub tti_ms: f64,
    pub records: Vec<DelaySample>,
    /// Tasks that exhausted their retransmissions during generation.
    pub dropped: usize,
}

impl DelayDataset {
    pub fn new(scenario_id: impl Into<String>, tti_ms: f64, records: Vec<DelaySample>) -> Self {
        Self {
            scenario_id: scenario_id.into(),
            tti_ms,
            records,
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.records.iter().map(|r| channels(r, self.tti_ms)[c]).collect()
    }

    pub fn e2e_ms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.e2e_ms(self.tti_ms)).collect()
    }

    /// Pearson correlation between τ_t and τ_p.
    pub fn correlation(&self) -> f64 {
        pearson(&self.channel(0), &self.channel(1))
    }

    pub fn for_bs(&self, bs: usize) -> Self {
        Self {
            scenario_id: self.scenario_id.clone(),
            tti_ms: self.tti_ms,
            records: self.records.iter().filter(|r| r.bs_id == bs).copied().collect(),
            dropped: 0,
        }
    }

    pub fn bs_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.bs_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Disjoint split by blocks of `block` consecutive drop ids; a seeded
    /// shuffle picks `ceil(val_fraction · blocks)` validation blocks.
    pub fn split(&self, val_fraction: f64, block: u64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::arg(format!("val_fraction must lie in [0, 1), got {val_fraction}")));
        }
        let block = block.max(1);
        let mut blocks: Vec<u64> = self.records.iter().map(|r| r.drop_id / block).collect();
        blocks.sort_unstable();
        blocks.dedup();
        let mut rng = seed::stream(seed, &[ns::SPLIT]);
        blocks.shuffle(&mut rng);
        let n_val = (val_fraction * blocks.len() as f64).ceil() as usize;
        let n_val = n_val.min(blocks.len().saturating_sub(1));
        let val: std::collections::HashSet<u64> = blocks[..n_val].iter().copied().collect();
        let (v, t): (Vec<_>, Vec<_>) = self.records.iter().partition(|r| val.contains(&(r.drop_id / block)));
        let mk = |records: Vec<DelaySample>| Self {
            scenario_id: self.scenario_id.clone(),
            tti_ms: self.tti_ms,
            records,
            dropped: 0,
        };
        Ok((mk(t), mk(v)))
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Simulates `n_drops` drops under `plan` and keeps the completed tasks.
pub fn generate_dataset(s: &NetworkScenario, plan: &AllocationPlan, n_drops: usize, seed: u64) -> Result<DelayDataset> {
    generate_dataset_with(s, plan, &CycleSource::from_scenario(s), n_drops, seed)
}

pub fn generate_dataset_with(
    s: &NetworkScenario,
    plan: &AllocationPlan,
    cycles: &CycleSource,
    n_drops: usize,
    seed: u64,
) -> Result<DelayDataset> {
    if n_drops == 0 {
        return Err(Error::arg("n_drops must be at least 1"));
    }
    let v = crate::scenario::validate_plan(plan, s)?;
    if !v.is_empty() {
        return Err(Error::InvalidPlan(v));
    }
    let run = sim::simulate_plan(s, plan, cycles, n_drops, seed, ns::DATASET)?;
    let mut records = run.samples;
    records.sort_by_key(|r| (r.drop_id, r.ue_id));
    Ok(DelayDataset {
        scenario_id: s.id(),
        tti_ms: s.tti_ms,
        records,
        dropped: run.dropped.len(),
    })
}

/// Plan with deliberately uneven BS loads: UE m joins a BS whose path loss is
/// within 3 dB of its strongest, BS n with weight `n + 1`, and each BS splits
/// f_max equally.
pub fn mixed_load_plan(s: &NetworkScenario, seed: u64) -> AllocationPlan {
    let mut rng = seed::stream(seed, &[ns::DATASET, u64::MAX]);
    let mut serving = Vec::with_capacity(s.n_ue);
    let mut loads = vec![0usize; s.n_bs];
    for m in 0..s.n_ue {
        let mut order: Vec<usize> = (0..s.n_bs).collect();
        order.sort_by(|&a, &b| s.distance_m(m, a).total_cmp(&s.distance_m(m, b)).then(a.cmp(&b)));
        let best = s.pathloss_db(s.distance_m(m, order[0]));
        let near = order
            .iter()
            .take_while(|&&n| s.pathloss_db(s.distance_m(m, n)) <= best + 3.0)
            .count();
        let cand = &order[..near];
        let total: f64 = cand.iter().map(|&n| (n + 1) as f64).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = cand.len() - 1;
        for (i, &n) in cand.iter().enumerate() {
            u -= (n + 1) as f64;
            if u < 0.0 {
                pick = i;
                break;
            }
        }
        let mut k = 0;
        while loads[order[(pick + k) % s.n_bs]] >= s.per_bs_capacity {
            k += 1;
        }
        let n = order[(pick + k) % s.n_bs];
        loads[n] += 1;
        serving.push(Some(n));
    }
    equal_share_plan(s, &serving)
}

/// Each BS splits f_max equally among the UEs it serves.
pub fn equal_share_plan(s: &NetworkScenario, serving: &[Option<usize>]) -> AllocationPlan {
    let mut loads = vec![0usize; s.n_bs];
    for n in serving.iter().flatten() {
        loads[*n] += 1;
    }
    let f: Vec<f64> = serving
        .iter()
        .map(|n| n.map_or(0.0, |n| s.f_max_hz / loads[n] as f64))
        .collect();
    AllocationPlan::from_serving(s.n_bs, serving, &f)
}

/// Parameters of a synthetic two-channel delay process with controllable
/// correlation, used to exercise the learner independently of the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_streams: usize,
    pub stream_len: usize,
    /// Correlation of both the per-stream level and the per-sample noise.
    pub corr: f64,
    /// Share of each channel's variance carried by the per-stream level.
    pub between_share: f64,
    pub tti_ms: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_streams: 48,
            stream_len: 64,
            corr: 0.6,
            between_share: 0.8,
            tti_ms: 1.0,
        }
    }
}

pub fn synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> DelayDataset {
    let c = spec.corr.clamp(-0.999, 0.999);
    let pair = |rng: &mut crate::seed::StreamRng| -> (f64, f64) {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        (a, c * a + (1.0 - c * c).sqrt() * b)
    };
    let (wb, ww) = (spec.between_share.sqrt(), (1.0 - spec.between_share).sqrt());
    let mut records = Vec::with_capacity(spec.n_streams * spec.stream_len);
    for k in 0..spec.n_streams {
        let mut rng = seed::stream(seed, &[ns::DATASET, 0x5359_4e54, k as u64]);
        let (la, lb) = pair(&mut rng);
        for t in 0..spec.stream_len {
            let (na, nb) = pair(&mut rng);
            let u = wb * la + ww * na;
            let v = wb * lb + ww * nb;
            records.push(DelaySample {
                drop_id: t as u64,
                ue_id: k,
                bs_id: 0,
                tau_t_ttis: (12.0 + 3.0 * u).round().max(2.0) as u64,
                tau_p_ms: 10.0 * (0.3 * v).exp(),
            });
        }
    }
    DelayDataset::new("synthetic", spec.tti_ms, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Cycles,
    LatencyMs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeTrace {
    pub kind: TraceKind,
    pub values: Vec<f64>,
}

impl ComputeTrace {
    /// Demand in cycles; latencies are converted at `reference_hz`.
    pub fn cycles(&self, reference_hz: f64) -> Vec<f64> {
        match self.kind {
            TraceKind::Cycles => self.values.clone(),
            TraceKind::LatencyMs => self.values.iter().map(|ms| ms * 1e-3 * reference_hz).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

pub fn ingest_compute_trace(path: &Path) -> Result<ComputeTrace> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let trace_err = |line: u64, message: String| Error::Trace {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    };
    let headers = rdr.headers().map_err(|e| trace_err(1, e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let kind = match cols.as_slice() {
        ["task_id", "cycles"] => TraceKind::Cycles,
        ["task_id", "latency_ms"] => TraceKind::LatencyMs,
        [] | [""] => return Err(trace_err(1, "empty trace file".into())),
        _ => {
            return Err(trace_err(
                1,
                format!("header must be `task_id,cycles` or `task_id,latency_ms`, got `{}`", cols.join(",")),
            ))
        }
    };
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            trace_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(trace_err(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let v: f64 = rec[1]
            .parse()
            .map_err(|_| trace_err(line, format!("cannot parse `{}` as a number", &rec[1])))?;
        if !v.is_finite() {
            return Err(trace_err(line, format!("non-finite value `{}`", &rec[1])));
        }
        if v < 0.0 {
            let what = match kind {
                TraceKind::Cycles => "cycles",
                TraceKind::LatencyMs => "latency",
            };
            return Err(trace_err(line, format!("negative {what} {v}")));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(trace_err(1, "trace has no data rows".into()));
    }
    Ok(ComputeTrace { kind, values })
}

/// A `2 × width` window, channel-major, standardised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputWindow {
    pub width: usize,
    pub values: Vec<f64>,
    pub ue_id: usize,
    pub bs_id: usize,
    /// Indices into the dataset's records, in window order.
    pub record_indices: Vec<usize>,
}

impl InputWindow {
    pub fn dim(&self) -> usize {
        2 * self.width
    }

    pub fn at(&self, channel: usize, t: usize) -> f64 {
        self.values[channel * self.width + t]
    }

    /// Per-channel window means.
    pub fn channel_means(&self) -> [f64; 2] {
        let w = self.width as f64;
        [
            self.values[..self.width].iter().sum::<f64>() / w,
            self.values[self.width..].iter().sum::<f64>() / w,
        ]
    }
}

/// Sliding windows over each (UE, BS) stream ordered by drop id.
pub fn make_windows(d: &DelayDataset, width: usize, stride: usize, norm: &Normalization) -> Result<Vec<InputWindow>> {
    if width < 4 {
        return Err(Error::arg(format!("window width must be at least 4, got {width}")));
    }
    if stride == 0 {
        return Err(Error::arg("window stride must be at least 1"));
    }
    let mut streams: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in d.records.iter().enumerate() {
        streams.entry((r.ue_id, r.bs_id)).or_default().push(i);
    }
    let mut out = Vec::new();
    for ((ue, bs), mut idx) in streams {
        idx.sort_by_key(|&i| d.records[i].drop_id);
        if idx.len() < width {
            continue;
        }
        let mut start = 0;
        while start + width <= idx.len() {
            let ids = &idx[start..start + width];
            let mut values = vec![0.0; 2 * width];
            for (t, &i) in ids.iter().enumerate() {
                let z = norm.standardize(channels(&d.records[i], d.tti_ms));
                values[t] = z[0];
                values[width + t] = z[1];
            }
            out.push(InputWindow {
                width,
                values,
                ue_id: ue,
                bs_id: bs,
                record_indices: ids.to_vec(),
            });
            start += stride;
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!(
            "no (UE, BS) stream has {width} records; dataset has {} in total",
            d.records.len()
        )));
    }
    Ok(out)
}

pub fn write_samples_csv(path: &Path, d: &DelayDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SAMPLE_HEADER)?;
    for r in &d.records {
        w.write_record([
            d.scenario_id.clone(),
            r.drop_id.to_string(),
            r.ue_id.to_string(),
            r.bs_id.to_string(),
            r.tau_t_ttis.to_string(),
            r.tau_p_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path, tti_ms: f64) -> Result<DelayDataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != SAMPLE_HEADER {
        return Err(Error::Trace {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`", SAMPLE_HEADER.join(",")),
        });
    }
    let mut scenario_id = String::new();
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        let bad = |field: &str| Error::Trace {
            path: path.to_path_buf(),
            line,
            message: format!("cannot parse {field}"),
        };
        if rec.len() != 6 {
            return Err(bad("row: expected 6 fields"));
        }
        if scenario_id.is_empty() {
            scenario_id = rec[0].to_string();
        }
        records.push(DelaySample {
            drop_id: rec[1].parse().map_err(|_| bad("drop_id"))?,
            ue_id: rec[2].parse().map_err(|_| bad("ue_id"))?,
            bs_id: rec[3].parse().map_err(|_| bad("bs_id"))?,
            tau_t_ttis: rec[4].parse().map_err(|_| bad("tau_t_ttis"))?,
            tau_p_ms: rec[5].parse().map_err(|_| bad("tau_p_ms"))?,
        });
    }
    Ok(DelayDataset::new(scenario_id, tti_ms, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, Scale};
    use std::io::Write;

    fn sample(drop_id: u64, ue: usize, t: u64, p: f64) -> DelaySample {
        DelaySample {
            drop_id,
            ue_id: ue,
            bs_id: 0,
            tau_t_ttis: t,
            tau_p_ms: p,
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn one_ue_one_bs_counts_records() {
        let mut s = Config::preset(Scale::Desk).scenario().unwrap();
        s = s.truncated(1);
        s.n_bs = 1;
        s.bs_positions.truncate(1);
        s.sinr_decode_threshold = f64::NEG_INFINITY;
        let plan = equal_share_plan(&s, &[Some(0)]);
        let d = generate_dataset(&s, &plan, 100, 3).unwrap();
        assert_eq!(d.len() + d.dropped, 100);
        assert_eq!(d.len(), 100);
    }

    #[test]
    fn zero_drops_or_unserved_is_an_error() {
        let s = Config::preset(Scale::Desk).scenario().unwrap();
        let plan = equal_share_plan(&s, &vec![None; s.n_ue]);
        assert!(generate_dataset(&s, &plan, 10, 1).is_err());
        let plan = mixed_load_plan(&s, 1);
        assert!(generate_dataset(&s, &plan, 0, 1).is_err());
    }

    #[test]
    fn mixed_load_plan_is_uneven_and_reachable() {
        let s = Config::preset(Scale::Desk).scenario().unwrap();
        for seed in 1..6 {
            let plan = mixed_load_plan(&s, seed);
            let loads = plan.loads();
            assert!(loads.iter().max() > loads.iter().min(), "{loads:?}");
            for m in 0..s.n_ue {
                let n = plan.serving_bs(m).unwrap();
                let best = s.pathloss_db(s.distance_m(m, s.nearest_bs(m)));
                assert!(s.pathloss_db(s.distance_m(m, n)) <= best + 3.0, "UE {m} on BS {n}");
            }
            let d = generate_dataset(&s, &plan, 300, seed).unwrap();
            assert!(d.dropped * 4 < d.len(), "{} dropped of {}", d.dropped, d.len());
        }
    }

    #[test]
    fn csv_is_byte_identical_per_seed() {
        let s = Config::preset(Scale::Desk).scenario().unwrap();
        let plan = mixed_load_plan(&s, 2);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_samples_csv(&a, &generate_dataset(&s, &plan, 30, 8).unwrap()).unwrap();
        write_samples_csv(&b, &generate_dataset(&s, &plan, 30, 8).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = read_samples_csv(&a, s.tti_ms).unwrap();
        assert_eq!(back.records, generate_dataset(&s, &plan, 30, 8).unwrap().records);
    }

    #[test]
    fn trace_examples() {
        let dir = tempfile::tempdir().unwrap();
        let t = ingest_compute_trace(&write(&dir, "one.csv", "task_id,cycles\n1,2e7\n")).unwrap();
        assert_eq!(t.values, vec![2e7]);
        assert_eq!(t.kind, TraceKind::Cycles);
        assert!(ingest_compute_trace(&write(&dir, "empty.csv", "")).is_err());
        assert!(ingest_compute_trace(&write(&dir, "hdr.csv", "task_id,cycles\n")).is_err());
        let err = ingest_compute_trace(&write(&dir, "neg.csv", "task_id,latency_ms\n1,3\n2,-1\n")).unwrap_err();
        assert!(matches!(err, Error::Trace { line: 3, .. }), "{err}");
        let err = ingest_compute_trace(&write(&dir, "bad.csv", "task_id,cycles\n1,2e7\n2,abc\n")).unwrap_err();
        assert!(matches!(err, Error::Trace { line: 3, .. }), "{err}");
        let err = ingest_compute_trace(&write(&dir, "both.csv", "task_id,cycles,latency_ms\n1,2,3\n")).unwrap_err();
        assert!(matches!(err, Error::Trace { line: 1, .. }), "{err}");
        let lat = ingest_compute_trace(&write(&dir, "lat.csv", "task_id,latency_ms\n1,10\n")).unwrap();
        assert_eq!(lat.cycles(2e9), vec![2e7]);
    }

    #[test]
    fn window_count_example() {
        let d = DelayDataset::new("t", 1.0, (0..10).map(|i| sample(i, 0, 2 + i, 1.0 + i as f64)).collect());
        let norm = Normalization::fit(&d.records, 1.0).unwrap();
        let w = make_windows(&d, 4, 2, &norm).unwrap();
        assert_eq!(w.len(), 4);
        assert!(make_windows(&d, 11, 2, &norm).is_err());
        assert!(make_windows(&d, 3, 2, &norm).is_err());
    }

    #[test]
    fn constant_records_give_zero_windows() {
        let d = DelayDataset::new("t", 1.0, (0..8).map(|i| sample(i, 0, 4, 3.0)).collect());
        let norm = Normalization::fit(&d.records, 1.0).unwrap();
        assert_eq!(norm.std, [STD_EPS; 2]);
        for w in make_windows(&d, 4, 1, &norm).unwrap() {
            assert!(w.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn windows_only_use_dataset_records() {
        let d = synthetic_dataset(&SyntheticSpec::default(), 4);
        let norm = Normalization::fit(&d.records, d.tti_ms).unwrap();
        for w in make_windows(&d, 16, 8, &norm).unwrap() {
            for (t, &i) in w.record_indices.iter().enumerate() {
                let z = norm.standardize(channels(&d.records[i], d.tti_ms));
                assert_eq!([w.at(0, t), w.at(1, t)], z);
                assert_eq!(d.records[i].ue_id, w.ue_id);
            }
            let drops: Vec<u64> = w.record_indices.iter().map(|&i| d.records[i].drop_id).collect();
            assert!(drops.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let d = synthetic_dataset(&SyntheticSpec::default(), 4);
        let (t1, v1) = d.split(0.25, 16, 9).unwrap();
        let (t2, v2) = d.split(0.25, 16, 9).unwrap();
        assert_eq!((t1.records.clone(), v1.records.clone()), (t2.records, v2.records));
        assert_eq!(t1.len() + v1.len(), d.len());
        let vd: std::collections::HashSet<u64> = v1.records.iter().map(|r| r.drop_id).collect();
        assert!(t1.records.iter().all(|r| !vd.contains(&r.drop_id)));
        assert!(!v1.is_empty() && !t1.is_empty());
    }

    #[test]
    fn synthetic_correlation_follows_sign() {
        for (c, sign) in [(0.7, 1.0), (-0.7, -1.0)] {
            let d = synthetic_dataset(&SyntheticSpec { corr: c, ..Default::default() }, 1);
            assert!(d.correlation() * sign > 0.3, "{}", d.correlation());
        }
    }

    proptest::proptest! {
        #[test]
        fn standardize_roundtrip(a in -1e4..1e4f64, b in -1e4..1e4f64, m0 in -50.0..50.0f64, s0 in 1e-3..1e3f64) {
            let n = Normalization { mean: [m0, -m0], std: [s0, 2.0 * s0] };
            let back = n.destandardize(n.standardize([a, b]));
            proptest::prop_assert!((back[0] - a).abs() < 1e-9 && (back[1] - b).abs() < 1e-9);
        }
    }

    #[test]
    fn trace_mean_is_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("task_id,cycles\n");
        for i in 0..1000 {
            text.push_str(&format!("{i},{}\n", 1e7 + 37_113.0 * i as f64));
        }
        let t = ingest_compute_trace(&write(&dir, "big.csv", &text)).unwrap();
        let src = CycleSource::Trace(std::sync::Arc::new(t.cycles(1.0)));
        let mut rng = crate::seed::stream(0, &[]);
        let drawn: Vec<f64> = (0..1000).map(|i| src.draw(&mut rng, 0, i)).collect();
        let independent: f64 = (0..1000).map(|i| 1e7 + 37_113.0 * i as f64).sum::<f64>() / 1000.0;
        let m = drawn.iter().sum::<f64>() / 1000.0;
        assert!((m - independent).abs() <= 1e-9 * independent);
        assert!((t.mean() - independent).abs() <= 1e-9 * independent);
    }
}
