//! Experiment orchestration: cost estimation, planning, Monte-Carlo
//! evaluation, sweeps and figure-data output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, TrainingConfig};
use crate::data::{self, DelayDataset, Normalization};
use crate::error::{Error, Result};
use crate::optimizer::{self, BankCosts, Method, PlanDiagnostics, PlanOutcome, VaeCosts};
use crate::risk;
use crate::scenario::{validate_plan, AllocationPlan, NetworkScenario, RiskSpec};
use crate::seed::{self, ns};
use crate::sim::{self, CycleSource, DelaySample, DroppedTask, SampleBank, SimulationRun};
use crate::vae::{self, TrainReport, Vae};

/// Cycle source configured by `compute.trace`, or the lognormal model.
pub fn cycle_source(cfg: &Config, s: &NetworkScenario) -> Result<CycleSource> {
    match &cfg.compute.trace {
        None => Ok(CycleSource::from_scenario(s)),
        Some(path) => {
            let t = data::ingest_compute_trace(path)?;
            let reference = cfg.compute.trace_reference_hz.unwrap_or(s.f_max_hz);
            Ok(CycleSource::Trace(Arc::new(t.cycles(reference))))
        }
    }
}

/// A configured scenario with its master seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: Config,
    pub scenario: NetworkScenario,
    pub cycles: CycleSource,
    pub seed: u64,
}

impl Experiment {
    pub fn new(config: Config, seed: u64) -> Result<Self> {
        let scenario = config.scenario()?;
        let cycles = cycle_source(&config, &scenario)?;
        Ok(Self {
            config,
            scenario,
            cycles,
            seed,
        })
    }

    /// Replicate `k`: the layout (unless positions are pinned) and every
    /// random stream are redrawn.
    pub fn replicate(&self, k: usize) -> Result<Self> {
        let mut c = self.config.clone();
        c.network.layout_seed = c.network.layout_seed.wrapping_add(k as u64);
        Self::new(c, self.seed.wrapping_add(k as u64))
    }

    /// Same streams with another per-BS compute budget.
    pub fn with_f_max(&self, f_max_hz: f64) -> Self {
        let mut out = self.clone();
        out.config.compute.f_max_hz = f_max_hz;
        out.scenario = self.scenario.with_f_max(f_max_hz);
        out
    }

    pub fn with_config(&self, config: Config) -> Result<Self> {
        Self::new(config, self.seed)
    }

    pub fn bank(&self) -> Result<SampleBank> {
        SampleBank::build(&self.scenario, &self.cycles, self.config.experiment.bank_samples, self.seed)
    }

    pub fn risk(&self) -> RiskSpec {
        self.config.risk
    }

    /// Plans with bank costs, or with VAE costs when `models` is given.
    /// The oracle always searches exhaustively under the empirical objective.
    pub fn plan(&self, bank: &SampleBank, models: Option<&[Vae]>, method: Method) -> Result<PlanOutcome> {
        let (s, r, ex) = (&self.scenario, self.risk(), &self.config.experiment);
        let out = match (method, models) {
            (Method::Oracle, _) => optimizer::exhaustive_search(&BankCosts::new(bank, method, r), s)?,
            (_, Some(m)) => optimizer::optimize(&VaeCosts::new(bank, m, method, r)?, s, ex.max_iters, ex.local_search)?,
            (_, None) => optimizer::optimize(&BankCosts::new(bank, method, r), s, ex.max_iters, ex.local_search)?,
        };
        let v = validate_plan(&out.plan, s)?;
        if !v.is_empty() {
            return Err(Error::InvalidPlan(v));
        }
        Ok(out)
    }

    /// Fresh Monte-Carlo run of `plan` on evaluation streams.
    pub fn evaluate(&self, plan: &AllocationPlan) -> Result<SimulationRun> {
        let s = &self.scenario;
        if plan.assignment.len() != s.n_ue || plan.assignment.iter().any(|r| r.len() != s.n_bs) {
            return Err(Error::DimensionMismatch {
                expected: format!("plan for {} UEs x {} BSs", s.n_ue, s.n_bs),
                found: format!(
                    "{} x {}",
                    plan.assignment.len(),
                    plan.assignment.first().map_or(0, Vec::len)
                ),
            });
        }
        let v = validate_plan(plan, s)?;
        if !v.is_empty() {
            return Err(Error::InvalidPlan(v));
        }
        sim::simulate_plan(s, plan, &self.cycles, self.config.experiment.eval_drops, self.seed, ns::EVAL)
    }

    pub fn metrics(&self, run: &SimulationRun) -> Result<DelayMetrics> {
        delay_metrics(
            &run.samples,
            &run.dropped,
            self.scenario.tti_ms,
            &self.risk(),
            &self.config.experiment.tau_grid_ms,
        )
    }

    pub fn training_dataset(&self) -> Result<DelayDataset> {
        let plan = data::mixed_load_plan(&self.scenario, self.seed);
        data::generate_dataset_with(&self.scenario, &plan, &self.cycles, self.config.experiment.n_drops, self.seed)
    }
}

/// Delay statistics of one evaluation run. Dropped tasks count as misses in
/// every reliability figure; delay moments cover completed tasks only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayMetrics {
    pub completed: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    pub mean_ms: f64,
    pub mean_transmission_ms: f64,
    pub mean_compute_ms: f64,
    /// Empirical VaR_α.
    pub var_ms: f64,
    pub cvar_ms: f64,
    /// Largest per-UE CVaR.
    pub worst_ue_cvar_ms: f64,
    pub reliability_at_threshold: f64,
    pub worst_ue_reliability_at_threshold: f64,
    /// Pooled `P(τ < τ_th)` on the threshold grid.
    pub reliability: Vec<f64>,
    /// Smallest per-UE `P(τ < τ_th)` on the threshold grid.
    pub worst_ue_reliability: Vec<f64>,
}

fn fraction_below(sorted: &[f64], attempted: usize, th: f64) -> f64 {
    sorted.partition_point(|&x| x < th) as f64 / attempted as f64
}

pub fn delay_metrics(
    records: &[DelaySample],
    dropped: &[DroppedTask],
    tti_ms: f64,
    r: &RiskSpec,
    grid: &[f64],
) -> Result<DelayMetrics> {
    if records.is_empty() {
        return Err(Error::Empty("no completed tasks to evaluate".into()));
    }
    let mut e2e: Vec<f64> = records.iter().map(|d| d.e2e_ms(tti_ms)).collect();
    let trans: Vec<f64> = records.iter().map(|d| d.tau_t_ttis as f64 * tti_ms).collect();
    let comp: Vec<f64> = records.iter().map(|d| d.tau_p_ms).collect();
    let est = risk::RiskEstimate::empirical(&e2e, r.alpha)?;
    e2e.sort_by(f64::total_cmp);
    let attempted = records.len() + dropped.len();

    let mut per_ue: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for d in records {
        per_ue.entry(d.ue_id).or_default().0.push(d.e2e_ms(tti_ms));
    }
    for d in dropped {
        per_ue.entry(d.ue_id).or_default().1 += 1;
    }
    let mut worst_cvar: f64 = 0.0;
    for (x, _) in per_ue.values_mut() {
        if !x.is_empty() {
            worst_cvar = worst_cvar.max(risk::cvar_empirical(x, r.alpha)?);
        }
        x.sort_by(f64::total_cmp);
    }
    let worst_rel = |th: f64| {
        per_ue
            .values()
            .map(|(x, k)| fraction_below(x, x.len() + k, th))
            .fold(1.0, f64::min)
    };
    Ok(DelayMetrics {
        completed: records.len(),
        dropped: dropped.len(),
        drop_rate: dropped.len() as f64 / attempted as f64,
        mean_ms: risk::mean(&e2e)?,
        mean_transmission_ms: risk::mean(&trans)?,
        mean_compute_ms: risk::mean(&comp)?,
        var_ms: est.var_ms,
        cvar_ms: est.cvar_ms,
        worst_ue_cvar_ms: worst_cvar,
        reliability_at_threshold: fraction_below(&e2e, attempted, r.tau_th_ms),
        worst_ue_reliability_at_threshold: worst_rel(r.tau_th_ms),
        reliability: grid.iter().map(|&t| fraction_below(&e2e, attempted, t)).collect(),
        worst_ue_reliability: grid.iter().map(|&t| worst_rel(t)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub diagnostics: PlanDiagnostics,
    pub metrics: DelayMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config_hash: String,
    pub scenario_id: String,
    pub alpha: f64,
    pub tau_th_ms: f64,
    pub tau_grid_ms: Vec<f64>,
    pub methods: Vec<MethodReport>,
    /// Epoch-mean loss averaged over the trained models.
    pub loss_curve: Vec<f64>,
    /// Per-epoch mean posterior means `(μ_τt, μ_τp)` averaged over models.
    pub latent_means: Vec<[f64; 2]>,
    pub durations_s: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.diagnostics.method == m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Everything produced for one method in a comparison.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub outcome: PlanOutcome,
    pub run: SimulationRun,
}

/// Whether the exhaustive oracle fits within its enumeration limit.
pub fn oracle_feasible(s: &NetworkScenario) -> bool {
    (s.n_bs as f64).powi(s.n_ue as i32) <= optimizer::EXHAUSTIVE_LIMIT
}

/// Plans and evaluates each method on common random numbers. The oracle
/// is added when the instance is small enough.
pub fn compare(exp: &Experiment, models: Option<&TrainedModels>, methods: &[Method]) -> Result<(ExperimentReport, Vec<MethodRun>)> {
    let mut durations = BTreeMap::new();
    let t0 = std::time::Instant::now();
    let bank = exp.bank()?;
    durations.insert("bank".to_string(), t0.elapsed().as_secs_f64());
    let mut methods: Vec<Method> = methods.to_vec();
    if oracle_feasible(&exp.scenario) && !methods.contains(&Method::Oracle) {
        methods.push(Method::Oracle);
    }
    methods.retain(|m| *m != Method::Oracle || oracle_feasible(&exp.scenario));
    let mut outcomes = Vec::new();
    for &m in &methods {
        let t0 = std::time::Instant::now();
        let out = exp.plan(&bank, models.map(|t| t.models.as_slice()), m)?;
        durations.insert(format!("plan_{m}"), t0.elapsed().as_secs_f64());
        outcomes.push((m, out));
    }
    // gaps are measured under the empirical objective of the proposed method
    let true_obj = |p: &AllocationPlan| {
        optimizer::e2e_objective(&bank, p, Method::Proposed.measure(), &exp.risk())
    };
    let oracle = match outcomes.iter().find(|(m, _)| *m == Method::Oracle) {
        Some((_, o)) => Some(true_obj(&o.plan)?),
        None => None,
    };
    let mut reports = Vec::new();
    let mut runs = Vec::new();
    for (m, out) in outcomes {
        let t0 = std::time::Instant::now();
        let run = exp.evaluate(&out.plan)?;
        durations.insert(format!("evaluate_{m}"), t0.elapsed().as_secs_f64());
        let mut diag = PlanDiagnostics::new(m, &out, None);
        if let Some(o) = oracle {
            let own = true_obj(&out.plan)?;
            diag.oracle_objective = Some(o);
            diag.gap_vs_oracle = Some(own / o - 1.0);
        }
        reports.push(MethodReport {
            diagnostics: diag,
            metrics: exp.metrics(&run)?,
        });
        runs.push(MethodRun {
            method: m,
            outcome: out,
            run,
        });
    }
    let (loss_curve, latent_means) = models.map_or((Vec::new(), Vec::new()), |t| (t.loss_curve(), t.latent_means()));
    let report = ExperimentReport {
        seed: exp.seed,
        config_hash: exp.config.hash(),
        scenario_id: exp.scenario.id(),
        alpha: exp.risk().alpha,
        tau_th_ms: exp.risk().tau_th_ms,
        tau_grid_ms: exp.config.experiment.tau_grid_ms.clone(),
        methods: reports,
        loss_curve,
        latent_means,
        durations_s: durations,
    };
    Ok((report, runs))
}

/// Models trained per BS (or one pooled model) on a delay dataset.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub models: Vec<Vae>,
    pub reports: Vec<TrainReport>,
    /// Mean learned ρ on each model's validation windows (NaN if none).
    pub val_rho: Vec<f64>,
    pub pooled: bool,
}

impl TrainedModels {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.average(|e| e.mean_loss)
    }

    pub fn latent_means(&self) -> Vec<[f64; 2]> {
        let a = self.average(|e| e.mean_mu[0]);
        let b = self.average(|e| e.mean_mu[1]);
        a.into_iter().zip(b).map(|(x, y)| [x, y]).collect()
    }

    fn average(&self, f: impl Fn(&vae::EpochMetrics) -> f64) -> Vec<f64> {
        let n = self.reports.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
        (0..n)
            .map(|e| self.reports.iter().map(|r| f(&r.epochs[e])).sum::<f64>() / self.reports.len() as f64)
            .collect()
    }

    /// Checkpoint file name of model `i`.
    pub fn file_name(&self, i: usize) -> String {
        if self.pooled {
            "model_pooled.json".to_string()
        } else {
            format!("model_bs{i}.json")
        }
    }
}

pub fn train_models(d: &DelayDataset, cfg: &TrainingConfig, n_bs: usize, seed: u64) -> Result<TrainedModels> {
    let subsets: Vec<DelayDataset> = if cfg.pooled {
        vec![d.clone()]
    } else {
        (0..n_bs).map(|n| d.for_bs(n)).collect()
    };
    if let Some(i) = subsets.iter().position(DelayDataset::is_empty) {
        return Err(Error::Empty(format!(
            "no samples for BS {i}; regenerate with more drops or set training.pooled = true"
        )));
    }
    let trained: Vec<(Vae, TrainReport, f64)> = subsets
        .par_iter()
        .enumerate()
        .map(|(i, sub)| {
            let (tr, val) = sub.split(cfg.val_fraction, cfg.window as u64, seed::derive_seed(seed, &[i as u64]))?;
            let norm = Normalization::fit(&tr.records, tr.tti_ms)?;
            let windows = data::make_windows(&tr, cfg.window, cfg.stride, &norm)?;
            let (model, report) = vae::train(&windows, cfg, norm, seed::derive_seed(seed, &[i as u64]))?;
            let rho = match data::make_windows(&val, cfg.window, cfg.stride, &model.normalization) {
                Ok(w) => vae::mean_rho(&model, &w)?,
                Err(_) => f64::NAN,
            };
            Ok((model, report, rho))
        })
        .collect::<Result<_>>()?;
    let mut out = TrainedModels {
        models: Vec::new(),
        reports: Vec::new(),
        val_rho: Vec::new(),
        pooled: cfg.pooled,
    };
    for (m, r, rho) in trained {
        out.models.push(m);
        out.reports.push(r);
        out.val_rho.push(rho);
    }
    Ok(out)
}

/// One point of a parameter sweep, averaged over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub mean_e2e_ms: f64,
    pub mean_transmission_ms: f64,
    pub mean_compute_ms: f64,
    pub cvar_ms: f64,
    pub worst_ue_cvar_ms: f64,
    pub drop_rate: f64,
    /// Mean E2E delay of each replicate.
    pub replicates: Vec<f64>,
}

fn average_points(x: f64, ms: &[DelayMetrics]) -> SweepPoint {
    let k = ms.len() as f64;
    let avg = |f: fn(&DelayMetrics) -> f64| ms.iter().map(f).sum::<f64>() / k;
    SweepPoint {
        x,
        mean_e2e_ms: avg(|m| m.mean_ms),
        mean_transmission_ms: avg(|m| m.mean_transmission_ms),
        mean_compute_ms: avg(|m| m.mean_compute_ms),
        cvar_ms: avg(|m| m.cvar_ms),
        worst_ue_cvar_ms: avg(|m| m.worst_ue_cvar_ms),
        drop_rate: avg(|m| m.drop_rate),
        replicates: ms.iter().map(|m| m.mean_ms).collect(),
    }
}

/// Delay versus per-BS compute budget. Each replicate draws one bank and
/// one set of evaluation streams shared by all budgets.
pub fn fmax_sweep(exp: &Experiment, method: Method, replicates: usize) -> Result<Vec<SweepPoint>> {
    let grid = exp.config.experiment.f_max_sweep_hz.clone();
    let mut per_f: Vec<Vec<DelayMetrics>> = vec![Vec::new(); grid.len()];
    for k in 0..replicates {
        let rep = exp.replicate(k)?;
        let mut bank = rep.bank()?;
        for (i, &f) in grid.iter().enumerate() {
            bank.set_f_max(f);
            let e = rep.with_f_max(f);
            let out = e.plan(&bank, None, method)?;
            per_f[i].push(e.metrics(&e.evaluate(&out.plan)?)?);
        }
    }
    Ok(grid.iter().zip(&per_f).map(|(&f, ms)| average_points(f, ms)).collect())
}

/// Delay versus number of UEs. UE layouts are nested: the first `M`
/// positions are shared by every larger `M`.
pub fn ue_sweep(exp: &Experiment, method: Method, replicates: usize) -> Result<Vec<SweepPoint>> {
    if exp.config.network.ue_positions.is_some() {
        return Err(Error::arg("UE sweep needs generated UE positions"));
    }
    let grid = exp.config.experiment.ue_sweep.clone();
    let mut per_m: Vec<Vec<DelayMetrics>> = vec![Vec::new(); grid.len()];
    for k in 0..replicates {
        for (i, &m) in grid.iter().enumerate() {
            let mut c = exp.config.clone();
            c.network.n_ue = m;
            c.network.per_bs_capacity = exp.config.network.per_bs_capacity.map(|p| p.max(m.div_ceil(c.network.n_bs)));
            let e = exp.with_config(c)?.replicate(k)?;
            let bank = e.bank()?;
            let out = e.plan(&bank, None, method)?;
            per_m[i].push(e.metrics(&e.evaluate(&out.plan)?)?);
        }
    }
    Ok(grid.iter().zip(&per_m).map(|(&m, ms)| average_points(m as f64, ms)).collect())
}

/// Heuristic objective over oracle objective across the f_max grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub f_max_hz: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    pub ratios: Vec<f64>,
}

/// Optimality gap on a reduced instance with `n_bs` BSs and `n_ue` UEs.
pub fn gap_sweep(exp: &Experiment, n_bs: usize, n_ue: usize, replicates: usize) -> Result<Vec<GapPoint>> {
    let mut c = exp.config.clone();
    c.network.n_bs = n_bs;
    c.network.n_ue = n_ue;
    c.network.per_bs_capacity = None;
    c.network.bs_positions = None;
    c.network.ue_positions = None;
    let base = exp.with_config(c)?;
    let grid = base.config.experiment.f_max_sweep_hz.clone();
    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for k in 0..replicates {
        let rep = base.replicate(k)?;
        let mut bank = rep.bank()?;
        for (i, &f) in grid.iter().enumerate() {
            bank.set_f_max(f);
            let e = rep.with_f_max(f);
            let h = e.plan(&bank, None, Method::Proposed)?;
            let o = e.plan(&bank, None, Method::Oracle)?;
            ratios[i].push(h.objective / o.objective);
        }
    }
    Ok(grid
        .iter()
        .zip(ratios)
        .map(|(&f, r)| GapPoint {
            f_max_hz: f,
            mean_ratio: r.iter().sum::<f64>() / r.len() as f64,
            max_ratio: r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ratios: r,
        })
        .collect())
}

pub fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `threshold_ms` plus pooled and worst-UE reliability per method.
pub fn write_cdf_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut header = vec!["threshold_ms".to_string()];
    for r in &report.methods {
        header.push(format!("{}_pooled", r.diagnostics.method));
        header.push(format!("{}_worst_ue", r.diagnostics.method));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = report.tau_grid_ms.iter().enumerate().map(|(i, t)| {
        let mut row = vec![t.to_string()];
        for r in &report.methods {
            row.push(r.metrics.reliability[i].to_string());
            row.push(r.metrics.worst_ue_reliability[i].to_string());
        }
        row
    });
    write_rows(path, &header, rows)
}

pub fn write_sweep_csv(path: &Path, x_name: &str, points: &[SweepPoint]) -> Result<()> {
    let header = [
        x_name,
        "mean_e2e_ms",
        "mean_transmission_ms",
        "mean_compute_ms",
        "cvar_ms",
        "worst_ue_cvar_ms",
        "drop_rate",
    ];
    write_rows(
        path,
        &header,
        points.iter().map(|p| {
            vec![
                p.x.to_string(),
                p.mean_e2e_ms.to_string(),
                p.mean_transmission_ms.to_string(),
                p.mean_compute_ms.to_string(),
                p.cvar_ms.to_string(),
                p.worst_ue_cvar_ms.to_string(),
                p.drop_rate.to_string(),
            ]
        }),
    )
}

pub fn write_gap_csv(path: &Path, points: &[GapPoint]) -> Result<()> {
    write_rows(
        path,
        &["f_max_hz", "mean_ratio", "max_ratio"],
        points
            .iter()
            .map(|p| vec![p.f_max_hz.to_string(), p.mean_ratio.to_string(), p.max_ratio.to_string()]),
    )
}

pub const DROPPED_HEADER: [&str; 3] = ["drop_id", "ue_id", "bs_id"];

pub fn write_dropped_csv(path: &Path, dropped: &[DroppedTask]) -> Result<()> {
    write_rows(
        path,
        &DROPPED_HEADER,
        dropped
            .iter()
            .map(|d| vec![d.drop_id.to_string(), d.ue_id.to_string(), d.bs_id.to_string()]),
    )
}

pub fn read_dropped_csv(path: &Path) -> Result<Vec<DroppedTask>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        let field = |i: usize| -> Result<u64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Trace {
                path: path.to_path_buf(),
                line,
                message: format!("cannot parse {}", DROPPED_HEADER[i]),
            })
        };
        out.push(DroppedTask {
            drop_id: field(0)?,
            ue_id: field(1)? as usize,
            bs_id: field(2)? as usize,
        });
    }
    Ok(out)
}

/// Latent-mean trajectory: `model,epoch,mu_t,mu_p`.
pub fn write_latent_csv(path: &Path, models: &TrainedModels) -> Result<()> {
    let rows = models.reports.iter().enumerate().flat_map(|(i, r)| {
        r.epochs.iter().map(move |e| {
            vec![
                i.to_string(),
                e.epoch.to_string(),
                e.mean_mu[0].to_string(),
                e.mean_mu[1].to_string(),
            ]
        })
    });
    write_rows(path, &["model", "epoch", "mu_t", "mu_p"], rows)
}

pub fn write_loss_csv(path: &Path, models: &TrainedModels) -> Result<()> {
    write_rows(
        path,
        &["epoch", "mean_loss"],
        models
            .loss_curve()
            .iter()
            .enumerate()
            .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub files: Vec<ManifestEntry>,
}

pub fn file_sha256(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

/// Writes `manifest.json` in `dir` listing `files` (relative to `dir`).
pub fn write_manifest(dir: &Path, seed: u64, config_hash: &str, files: &[PathBuf]) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for f in files {
        let (bytes, sha256) = file_sha256(&dir.join(f))?;
        entries.push(ManifestEntry {
            file: f.to_string_lossy().into_owned(),
            bytes,
            sha256,
        });
    }
    let m = Manifest {
        seed,
        config_hash: config_hash.to_string(),
        files: entries,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scale;

    fn small() -> Experiment {
        let mut c = Config::preset(Scale::Desk);
        c.network.n_bs = 2;
        c.network.n_ue = 4;
        c.experiment.bank_samples = 300;
        c.experiment.eval_drops = 300;
        c.experiment.n_drops = 50;
        c.experiment.f_max_sweep_hz = vec![5e9, 50e9, 500e9];
        c.experiment.ue_sweep = vec![2, 4, 6];
        Experiment::new(c, 11).unwrap()
    }

    fn rec(drop_id: u64, ue: usize, t: u64, p: f64) -> DelaySample {
        DelaySample {
            drop_id,
            ue_id: ue,
            bs_id: 0,
            tau_t_ttis: t,
            tau_p_ms: p,
        }
    }

    #[test]
    fn metrics_by_hand() {
        let r = RiskSpec::new(0.5, 0.5, 5.0).unwrap();
        let recs = vec![rec(0, 0, 2, 1.0), rec(1, 0, 4, 2.0), rec(0, 1, 1, 0.5), rec(1, 1, 1, 0.5)];
        let dropped = vec![DroppedTask {
            drop_id: 2,
            ue_id: 1,
            bs_id: 0,
        }];
        let m = delay_metrics(&recs, &dropped, 1.0, &r, &[2.0, 10.0]).unwrap();
        // e2e: 3, 6, 1.5, 1.5
        assert_eq!(m.completed, 4);
        assert!((m.drop_rate - 0.2).abs() < 1e-15);
        assert!((m.mean_ms - 3.0).abs() < 1e-12);
        assert!((m.mean_transmission_ms - 2.0).abs() < 1e-12);
        assert_eq!(m.reliability, vec![2.0 / 5.0, 4.0 / 5.0]);
        // UE 0 misses 2 ms twice; UE 1 has 2 of 3 attempts below 10 ms
        assert_eq!(m.worst_ue_reliability, vec![0.0, 2.0 / 3.0]);
        assert!((m.worst_ue_cvar_ms - 6.0).abs() < 1e-12);
        assert!((m.cvar_ms - 4.5).abs() < 1e-12);
        assert!(delay_metrics(&[], &dropped, 1.0, &r, &[]).is_err());
    }

    #[test]
    fn compare_is_deterministic_and_feasible() {
        let e = small();
        let (a, runs) = compare(&e, None, &[Method::Proposed, Method::Baseline1, Method::Baseline2]).unwrap();
        let (b, _) = compare(&e, None, &[Method::Proposed, Method::Baseline1, Method::Baseline2]).unwrap();
        assert_eq!(a.methods, b.methods);
        assert_eq!(a.methods.len(), 4);
        for r in &runs {
            assert!(validate_plan(&r.outcome.plan, &e.scenario).unwrap().is_empty());
        }
        let gap = a.method(Method::Proposed).unwrap().diagnostics.gap_vs_oracle.unwrap();
        assert!(gap >= -1e-12);
        assert_eq!(a.method(Method::Oracle).unwrap().diagnostics.gap_vs_oracle, Some(0.0));
    }

    #[test]
    fn evaluation_rejects_mismatched_plan() {
        let e = small();
        let plan = AllocationPlan::empty(3, 2);
        assert!(matches!(e.evaluate(&plan), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn metrics_recompute_from_persisted_csv() {
        let e = small();
        let bank = e.bank().unwrap();
        let out = e.plan(&bank, None, Method::Proposed).unwrap();
        let run = e.evaluate(&out.plan).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (sp, dp) = (dir.path().join("s.csv"), dir.path().join("d.csv"));
        data::write_samples_csv(&sp, &DelayDataset::new("x", e.scenario.tti_ms, run.samples.clone())).unwrap();
        write_dropped_csv(&dp, &run.dropped).unwrap();
        let back = data::read_samples_csv(&sp, e.scenario.tti_ms).unwrap();
        let dropped = read_dropped_csv(&dp).unwrap();
        let again = delay_metrics(&back.records, &dropped, e.scenario.tti_ms, &e.risk(), &e.config.experiment.tau_grid_ms).unwrap();
        assert_eq!(again, e.metrics(&run).unwrap());
    }

    #[test]
    fn sweeps_run_and_manifest_hashes() {
        let e = small();
        let f = fmax_sweep(&e, Method::Proposed, 1).unwrap();
        assert_eq!(f.len(), 3);
        assert!(f[0].mean_e2e_ms > f[2].mean_e2e_ms);
        let m = ue_sweep(&e, Method::Proposed, 1).unwrap();
        assert_eq!(m.len(), 3);
        let g = gap_sweep(&e, 2, 4, 1).unwrap();
        assert!(g.iter().all(|p| p.max_ratio >= 1.0 - 1e-12));
        let dir = tempfile::tempdir().unwrap();
        write_sweep_csv(&dir.path().join("f.csv"), "f_max_hz", &f).unwrap();
        let p = write_manifest(dir.path(), 1, "h", &[PathBuf::from("f.csv")]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.contains("f.csv") && text.contains("sha256"));
    }
}
