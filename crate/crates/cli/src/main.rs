//! `mecrisk`: simulate, train, plan, evaluate and sweep from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mec_core::config::{Config, CostSource, Scale};
use mec_core::data::{self, DelayDataset};
use mec_core::experiment::{self, Experiment, TrainedModels};
use mec_core::optimizer::{self, Method, PlanDiagnostics};
use mec_core::vae::Vae;

#[derive(Parser, Debug)]
#[command(name = "mecrisk", version, about = "Risk-aware task offloading experiments for MEC networks")]
struct Cli {
    /// TOML config; defaults to the preset selected by --scale.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Planner: proposed, baseline1, baseline2 or oracle.
    #[arg(long, global = true, default_value = "proposed")]
    method: String,
    #[arg(long, global = true, value_enum, default_value_t = ScaleArg::Desk)]
    scale: ScaleArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq, Eq)]
enum SweepKind {
    Fmax,
    Ue,
    Gap,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a delay dataset under a mixed-load plan.
    Simulate {
        /// Overrides experiment.n_drops.
        #[arg(long)]
        drops: Option<usize>,
    },
    /// Train one VAE per BS (or a pooled one) on a dataset.
    Train {
        /// Samples CSV; defaults to <out>/samples.csv.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Overrides training.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Plan task assignment and computing frequencies.
    Plan {
        /// Checkpoint directory for VAE costs; defaults to <out>.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Evaluate a plan, or compare every method when no plan is given.
    Evaluate {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Delay versus f_max, versus UE count, and the optimality gap.
    Sweep {
        #[arg(long, value_enum, default_value_t = SweepKind::All)]
        kind: SweepKind,
        /// Number of replicates; defaults to experiment.seeds.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Quick end-to-end checks on a tiny instance.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => {
            let scale = match cli.scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::Paper => Scale::Paper,
            };
            Config::from_toml_str(&Config::preset(scale).to_toml_string())?
        }
    };
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(&cli.out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(cli: &Cli, mut cfg: Config, drops: Option<usize>) -> Result<()> {
    if let Some(d) = drops {
        cfg.experiment.n_drops = d;
    }
    let out = out_dir(cli)?;
    let exp = Experiment::new(cfg, cli.seed)?;
    let d = exp.training_dataset()?;
    data::write_samples_csv(&out.join("samples.csv"), &d)?;
    let meta = serde_json::json!({
        "scenario_id": d.scenario_id,
        "tti_ms": d.tti_ms,
        "n_drops": exp.config.experiment.n_drops,
        "n_ue": exp.scenario.n_ue,
        "completed": d.len(),
        "dropped": d.dropped,
        "correlation": d.correlation(),
    });
    write(&out.join("dataset.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    write(&out.join("config.toml"), &exp.config.to_toml_string())?;
    let files = ["samples.csv", "dataset.json", "config.toml"].map(PathBuf::from);
    experiment::write_manifest(out, cli.seed, &exp.config.hash(), &files)?;
    println!("wrote {} samples ({} dropped) to {}", d.len(), d.dropped, out.display());
    Ok(())
}

fn train(cli: &Cli, mut cfg: Config, dataset: Option<&Path>, epochs: Option<usize>) -> Result<()> {
    if let Some(e) = epochs {
        cfg.training.epochs = e;
    }
    let out = out_dir(cli)?;
    let exp = Experiment::new(cfg, cli.seed)?;
    let path = dataset.map_or_else(|| out.join("samples.csv"), Path::to_path_buf);
    let d = data::read_samples_csv(&path, exp.scenario.tti_ms)?;
    check_dataset(&d, &exp)?;
    let models = experiment::train_models(&d, &exp.config.training, exp.scenario.n_bs, exp.seed)?;
    let mut files = Vec::new();
    for (i, m) in models.models.iter().enumerate() {
        let name = models.file_name(i);
        m.save(&out.join(&name))?;
        let metrics = format!("metrics_{}.csv", name.trim_start_matches("model_").trim_end_matches(".json"));
        models.reports[i].write_metrics_csv(&out.join(&metrics))?;
        files.push(PathBuf::from(name));
        files.push(PathBuf::from(metrics));
    }
    experiment::write_loss_csv(&out.join("loss.csv"), &models)?;
    experiment::write_latent_csv(&out.join("latent.csv"), &models)?;
    files.push("loss.csv".into());
    files.push("latent.csv".into());
    let summary = serde_json::json!({
        "pooled": models.pooled,
        "val_rho": models.val_rho,
        "dataset_correlation": d.correlation(),
        "final_loss": models.loss_curve().last(),
    });
    write(&out.join("train.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    experiment::write_manifest(out, cli.seed, &exp.config.hash(), &files)?;
    println!("trained {} model(s); mean validation rho {:?}", models.models.len(), models.val_rho);
    Ok(())
}

fn check_dataset(d: &DelayDataset, exp: &Experiment) -> Result<()> {
    if let Some(r) = d.records.iter().find(|r| r.bs_id >= exp.scenario.n_bs || r.ue_id >= exp.scenario.n_ue) {
        bail!(mec_core::Error::DimensionMismatch {
            expected: format!("{} UEs x {} BSs", exp.scenario.n_ue, exp.scenario.n_bs),
            found: format!("sample for UE {} on BS {}", r.ue_id, r.bs_id),
        });
    }
    Ok(())
}

fn load_models(dir: &Path, exp: &Experiment) -> Result<Vec<Vae>> {
    let pooled = dir.join("model_pooled.json");
    if exp.config.training.pooled || pooled.exists() {
        return Ok(vec![Vae::load(&pooled)?]);
    }
    (0..exp.scenario.n_bs)
        .map(|n| Ok(Vae::load(&dir.join(format!("model_bs{n}.json")))?))
        .collect()
}

fn models_for(cli: &Cli, exp: &Experiment, dir: Option<&Path>, method: Method) -> Result<Option<Vec<Vae>>> {
    if exp.config.experiment.cost_source == CostSource::Vae && method != Method::Oracle {
        Ok(Some(load_models(dir.unwrap_or(&cli.out), exp)?))
    } else {
        Ok(None)
    }
}

fn plan(cli: &Cli, cfg: Config, models: Option<&Path>) -> Result<()> {
    let method: Method = cli.method.parse()?;
    let out = out_dir(cli)?;
    let exp = Experiment::new(cfg, cli.seed)?;
    let vaes = models_for(cli, &exp, models, method)?;
    let bank = exp.bank()?;
    let outcome = exp.plan(&bank, vaes.as_deref(), method)?;
    let mut diag = PlanDiagnostics::new(method, &outcome, None);
    if experiment::oracle_feasible(&exp.scenario) && method != Method::Oracle {
        let oracle = exp.plan(&bank, None, Method::Oracle)?;
        let own = optimizer::e2e_objective(&bank, &outcome.plan, Method::Proposed.measure(), &exp.risk())?;
        diag.oracle_objective = Some(oracle.objective);
        diag.gap_vs_oracle = Some(own / oracle.objective - 1.0);
    }
    let csv = format!("plan_{method}.csv");
    let json = format!("plan_{method}.json");
    optimizer::write_plan_csv(&out.join(&csv), &outcome.plan)?;
    write(&out.join(&json), &(diag.to_json()? + "\n"))?;
    if let Some(w) = &diag.warning {
        eprintln!("warning: {w}");
    }
    println!("{method}: objective {:.4} after {} iteration(s)", outcome.objective, outcome.iterations);
    Ok(())
}

fn evaluate(cli: &Cli, cfg: Config, plan_path: Option<&Path>, models: Option<&Path>) -> Result<()> {
    let out = out_dir(cli)?;
    let exp = Experiment::new(cfg, cli.seed)?;
    let mut files: Vec<PathBuf> = Vec::new();
    match plan_path {
        Some(p) => {
            let method: Method = cli.method.parse()?;
            let plan = optimizer::read_plan_csv(p, exp.scenario.n_ue, exp.scenario.n_bs)?;
            let run = exp.evaluate(&plan)?;
            let metrics = exp.metrics(&run)?;
            write_run(out, &exp, method, &run, &mut files)?;
            write(&out.join(format!("metrics_{method}.json")), &(serde_json::to_string_pretty(&metrics)? + "\n"))?;
            files.push(format!("metrics_{method}.json").into());
            println!(
                "{method}: mean {:.3} ms, CVaR {:.3} ms, reliability {:.5} at {} ms",
                metrics.mean_ms, metrics.cvar_ms, metrics.reliability_at_threshold, exp.risk().tau_th_ms
            );
        }
        None => {
            let trained = match models_for(cli, &exp, models, Method::Proposed)? {
                Some(m) => Some(TrainedModels {
                    val_rho: vec![f64::NAN; m.len()],
                    reports: Vec::new(),
                    pooled: m.len() == 1,
                    models: m,
                }),
                None => None,
            };
            let methods = [Method::Proposed, Method::Baseline1, Method::Baseline2];
            let (report, runs) = experiment::compare(&exp, trained.as_ref(), &methods)?;
            for r in &runs {
                write_run(out, &exp, r.method, &r.run, &mut files)?;
                optimizer::write_plan_csv(&out.join(format!("plan_{}.csv", r.method)), &r.outcome.plan)?;
                files.push(format!("plan_{}.csv", r.method).into());
            }
            experiment::write_cdf_csv(&out.join("cdf.csv"), &report)?;
            files.push("cdf.csv".into());
            write(&out.join("report.json"), &(report.to_json()? + "\n"))?;
            for m in &report.methods {
                println!(
                    "{}: mean {:.3} ms, CVaR {:.3} ms, worst-UE CVaR {:.3} ms, reliability {:.5}",
                    m.diagnostics.method,
                    m.metrics.mean_ms,
                    m.metrics.cvar_ms,
                    m.metrics.worst_ue_cvar_ms,
                    m.metrics.reliability_at_threshold
                );
            }
        }
    }
    experiment::write_manifest(out, cli.seed, &exp.config.hash(), &files)?;
    Ok(())
}

fn write_run(out: &Path, exp: &Experiment, method: Method, run: &mec_core::sim::SimulationRun, files: &mut Vec<PathBuf>) -> Result<()> {
    let samples = format!("samples_{method}.csv");
    let dropped = format!("dropped_{method}.csv");
    let d = DelayDataset::new(exp.scenario.id(), exp.scenario.tti_ms, run.samples.clone());
    data::write_samples_csv(&out.join(&samples), &d)?;
    experiment::write_dropped_csv(&out.join(&dropped), &run.dropped)?;
    files.push(samples.into());
    files.push(dropped.into());
    Ok(())
}

fn sweep(cli: &Cli, cfg: Config, kind: SweepKind, replicates: Option<usize>) -> Result<()> {
    let method: Method = cli.method.parse()?;
    let out = out_dir(cli)?;
    let exp = Experiment::new(cfg, cli.seed)?;
    let k = replicates.unwrap_or(exp.config.experiment.seeds).max(1);
    let mut files: Vec<PathBuf> = Vec::new();
    if matches!(kind, SweepKind::Fmax | SweepKind::All) {
        let pts = experiment::fmax_sweep(&exp, method, k)?;
        experiment::write_sweep_csv(&out.join("fmax_sweep.csv"), "f_max_hz", &pts)?;
        files.push("fmax_sweep.csv".into());
    }
    if matches!(kind, SweepKind::Ue | SweepKind::All) {
        let pts = experiment::ue_sweep(&exp, method, k)?;
        experiment::write_sweep_csv(&out.join("ue_sweep.csv"), "n_ue", &pts)?;
        files.push("ue_sweep.csv".into());
    }
    if matches!(kind, SweepKind::Gap | SweepKind::All) {
        let pts = experiment::gap_sweep(&exp, 2, 10, k)?;
        experiment::write_gap_csv(&out.join("gap.csv"), &pts)?;
        files.push("gap.csv".into());
    }
    experiment::write_manifest(out, cli.seed, &exp.config.hash(), &files)?;
    println!("wrote {} sweep file(s) to {}", files.len(), out.display());
    Ok(())
}

fn selftest(cli: &Cli) -> Result<()> {
    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };
    let x: Vec<f64> = (1..=100).map(f64::from).collect();
    check("cvar-empirical", mec_core::risk::cvar_empirical(&x, 0.1)? == 95.5);
    let g = mec_core::risk::cvar_gaussian(0.0, 1.0, 0.05)?;
    check("cvar-gaussian", (g - 2.0627).abs() < 0.5e-2 * 2.0627);
    let f = optimizer::allocate_frequency(&[Some(0), Some(0)], &[1.0, 3.0], 1, 4e9)?;
    check("frequency-closed-form", (f[0] - 1e9).abs() < 1.0 && (f[1] - 3e9).abs() < 1.0);
    let a = optimizer::assign_tasks(&[vec![1.0, 5.0], vec![4.0, 2.0]], &[1, 1])?;
    check("bottleneck-assignment", a == vec![0, 1]);
    let det = mec_core::vae::ar1_det(0.5, 2.0, 3)?;
    check("ar1-determinant", (det - 8.0 * 0.75 * 0.75).abs() < 1e-12);

    let mut c = Config::preset(Scale::Desk);
    c.network.n_bs = 2;
    c.network.n_ue = 4;
    c.experiment.bank_samples = 200;
    c.experiment.eval_drops = 200;
    let exp = Experiment::new(c, cli.seed)?;
    let (report, _) = experiment::compare(&exp, None, &[Method::Proposed, Method::Baseline1, Method::Baseline2])?;
    let gap = report
        .method(Method::Proposed)
        .and_then(|m| m.diagnostics.gap_vs_oracle)
        .unwrap_or(f64::INFINITY);
    check("pipeline-gap-within-10pct", gap <= 0.10);
    if failures > 0 {
        bail!(mec_core::Error::InvalidArgument(format!("{failures} selftest check(s) failed")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Selftest = cli.command {
        return selftest(cli);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate { drops } => simulate(cli, cfg, *drops),
        Command::Train { dataset, epochs } => train(cli, cfg, dataset.as_deref(), *epochs),
        Command::Plan { models } => plan(cli, cfg, models.as_deref()),
        Command::Evaluate { plan: p, models } => evaluate(cli, cfg, p.as_deref(), models.as_deref()),
        Command::Sweep { kind, replicates } => sweep(cli, cfg, *kind, *replicates),
        Command::Selftest => unreachable!(),
    }
}

fn kind(e: &anyhow::Error) -> &'static str {
    use mec_core::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::InvalidArgument(_)) => "invalid_argument",
        Some(E::DimensionMismatch { .. }) => "dimension_mismatch",
        Some(E::LayerShape { .. }) => "layer_shape",
        Some(E::NoForwardRecord) => "no_forward_record",
        Some(E::NonFinite(_)) => "non_finite",
        Some(E::Diverged { .. }) => "diverged",
        Some(E::Empty(_)) => "empty",
        Some(E::Trace { .. }) => "trace",
        Some(E::InvalidScenario(_)) => "invalid_scenario",
        Some(E::InvalidPlan(_)) => "invalid_plan",
        Some(E::Infeasible(_)) => "infeasible",
        Some(E::MissingCosts(_)) => "missing_costs",
        Some(E::TooLarge { .. }) => "too_large",
        Some(E::Untrained) => "untrained",
        Some(E::Config(_)) => "config",
        Some(E::Io { .. }) => "io",
        Some(E::Csv(_)) => "csv",
        Some(E::Json(_)) => "json",
        None => "other",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error kind={} message={}", kind(&e), serde_json::to_string(&msg).unwrap_or_default());
            ExitCode::FAILURE
        }
    }
}
