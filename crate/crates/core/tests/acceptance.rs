//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then
//! asserts, so the lines appear in the log even when output is captured.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use mec_core::config::{Config, Scale, TrainingConfig};
use mec_core::data::{self, SyntheticSpec};
use mec_core::experiment::{self, Experiment};
use mec_core::optimizer::{self, Method};
use mec_core::risk;
use mec_core::scenario::{AllocationPlan, NetworkScenario};
use mec_core::seed::ns;
use mec_core::sim::{self, CycleSource};
use mec_core::vae::{self, DiagPosterior, LatentPosterior, PriorSpec, Vae, VaeArch};

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("\n{} {id:>2} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{name}: {detail}");
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn desk() -> Config {
    Config::preset(Scale::Desk)
}

// ---------------------------------------------------------------- 1

/// `log N(z; μ, Σ)` for a 2x2 covariance, by explicit inverse.
fn log_normal2(z: [f64; 2], mu: [f64; 2], c: [[f64; 2]; 2]) -> f64 {
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let (a, b) = (z[0] - mu[0], z[1] - mu[1]);
    let q = (c[1][1] * a * a - 2.0 * c[0][1] * a * b + c[0][0] * b * b) / det;
    -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
}

/// Monte-Carlo `E_q[log q - log p]` with a standard-normal prior, using
/// antithetic pairs.
fn kl_monte_carlo(mu: [f64; 2], c: [[f64; 2]; 2], n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let l00 = c[0][0].sqrt();
    let l10 = c[1][0] / l00;
    let l11 = (c[1][1] - l10 * l10).sqrt();
    let id = [[1.0, 0.0], [0.0, 1.0]];
    let mut sum = 0.0;
    for _ in 0..n / 2 {
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        for s in [1.0, -1.0] {
            let z = [mu[0] + s * l00 * e0, mu[1] + s * (l10 * e0 + l11 * e1)];
            sum += log_normal2(z, mu, c) - log_normal2(z, [0.0, 0.0], id);
        }
    }
    sum / (2 * (n / 2)) as f64
}

#[test]
fn c01_kl_matches_monte_carlo() {
    let t0 = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let prior = PriorSpec::standard(2);
    let n = 1_000_000;
    let (mut worst_ar1, mut worst_diag): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let s = rng.random_range(0.1..=5.0);
        let rho = rng.random_range(-0.9..=0.9);
        let mu = [rng.random_range(-3.0..=3.0), rng.random_range(-3.0..=3.0)];
        let post = LatentPosterior { mu: mu.to_vec(), scale: s, rho };
        let closed = vae::kl_ar1(&post, &prior).unwrap();
        let mc = kl_monte_carlo(mu, [[s, s * rho], [s * rho, s]], n, &mut rng);
        worst_ar1 = worst_ar1.max(rel(closed, mc));

        let v = [rng.random_range(0.1..=5.0), rng.random_range(0.1..=5.0)];
        let diag = DiagPosterior { mu: mu.to_vec(), s_vec: v.to_vec() };
        let closed = vae::kl_diag(&diag, &prior).unwrap();
        let mc = kl_monte_carlo(mu, [[v[0], 0.0], [0.0, v[1]]], n, &mut rng);
        worst_diag = worst_diag.max(rel(closed, mc));
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        "kl-closed-form",
        worst_ar1 < 0.01 && worst_diag < 0.01 && secs < 120.0,
        &format!("worst relative error ar1 {worst_ar1:.2e}, diag {worst_diag:.2e} (tol 1e-2), {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- 2

fn lu_det(mut a: Vec<Vec<f64>>) -> f64 {
    let d = a.len();
    let mut det = 1.0;
    for k in 0..d {
        let p = (k..d).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        if p != k {
            a.swap(p, k);
            det = -det;
        }
        let piv = a[k][k];
        det *= piv;
        for i in k + 1..d {
            let f = a[i][k] / piv;
            for j in k..d {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    det
}

#[test]
fn c02_determinant_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let rho = rng.random_range(-0.99..0.99);
        let s = rng.random_range(0.01..10.0);
        let d = rng.random_range(1..=6);
        let closed = vae::ar1_det(rho, s, d).unwrap();
        let lu = lu_det(vae::ar1_cov(rho, s, d).unwrap());
        worst = worst.max(rel(closed, lu));
    }
    report(2, "ar1-determinant", worst < 1e-10, &format!("worst relative error {worst:.2e} (tol 1e-10)"));
}

// ---------------------------------------------------------------- 3

#[test]
fn c03_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let h = 1e-5;
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for _ in 0..20 {
        let arch = VaeArch {
            width: rng.random_range(5..=8),
            conv_channels: rng.random_range(1..=3),
            hidden: rng.random_range(2..=5),
        };
        let prior = PriorSpec { mu_prior: vec![rng.random_range(-1.0..1.0), 0.0], sigma_prior: rng.random_range(0.5..2.0) };
        let mut net_rng = mec_core::seed::stream(rng.random(), &[0]);
        let mut vae = Vae::new(arch, prior, &mut net_rng).unwrap();
        vae.likelihood.corr = rng.random_range(-0.6..0.6);
        let p: Vec<f64> = vae.params().iter().map(|v| v * 0.5).collect();
        vae.set_params(&p).unwrap();
        let x: Vec<f64> = (0..2 * arch.width).map(|_| rng.sample(StandardNormal)).collect();
        let eps: Vec<[f64; 2]> = (0..rng.random_range(1..=3))
            .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let (_, _, g) = vae.loss_and_grads(&x, &eps).unwrap();
        let g = g.flat();
        let base = vae.activation_pattern(&x, &eps).unwrap();
        let mut probe = vae.clone();
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] = p[i] + h;
            probe.set_params(&q).unwrap();
            let up_kink = probe.activation_pattern(&x, &eps).unwrap() != base;
            let up = probe.loss_with_eps(&x, &eps).unwrap().training_loss();
            q[i] = p[i] - h;
            probe.set_params(&q).unwrap();
            let down_kink = probe.activation_pattern(&x, &eps).unwrap() != base;
            let down = probe.loss_with_eps(&x, &eps).unwrap().training_loss();
            if up_kink || down_kink {
                skipped += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * h);
            let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
    }
    report(
        3,
        "elbo-gradients",
        worst < 1e-4 && checked > 0,
        &format!("worst error relative to max(|g|, |fd|, 1) {worst:.2e} (tol 1e-4) over {checked} parameters, {skipped} at rectifier kinks skipped"),
    );
}

// ---------------------------------------------------------------- 4, 5

fn train_synthetic(corr: f64, seed: u64) -> (Vec<f64>, f64, f64) {
    let d = data::synthetic_dataset(&SyntheticSpec { corr, ..SyntheticSpec::default() }, seed);
    let models = experiment::train_models(&d, &TrainingConfig::default(), 1, seed).unwrap();
    (models.reports[0].loss_curve(), d.correlation(), models.val_rho[0])
}

#[test]
fn c04_training_converges_deterministically() {
    let t0 = std::time::Instant::now();
    let (curve, _, _) = train_synthetic(0.6, 4);
    let (again, _, _) = train_synthetic(0.6, 4);
    let secs = t0.elapsed().as_secs_f64() / 2.0;
    let ratio = curve[49] / curve[0];
    report(
        4,
        "training-convergence",
        curve.len() == 50 && ratio < 0.5 && curve == again && secs < 300.0,
        &format!(
            "epoch-50/epoch-1 loss {:.3}/{:.3} = {ratio:.3} (< 0.5), identical rerun {}, {secs:.1}s per run",
            curve[49],
            curve[0],
            curve == again
        ),
    );
}

#[test]
fn c05_latent_correlation_sign() {
    let (_, pos_data, pos_rho) = train_synthetic(0.6, 5);
    let (_, neg_data, neg_rho) = train_synthetic(-0.6, 5);
    report(
        5,
        "correlation-recovery",
        pos_data >= 0.3 && neg_data <= -0.3 && pos_rho > 0.0 && neg_rho < 0.0,
        &format!(
            "data corr {pos_data:+.3} -> validation rho {pos_rho:+.3}; data corr {neg_data:+.3} -> validation rho {neg_rho:+.3}"
        ),
    );
}

// ---------------------------------------------------------------- 6

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Standard-normal CVaR by quadrature: the α-quantile from bisection on the
/// integrated tail, then the tail mean.
fn gaussian_cvar_quadrature(alpha: f64) -> f64 {
    let tail = |q: f64| simpson(phi, q, q + 40.0, 20_000);
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = 0.5 * (lo + hi);
    simpson(|x| x * phi(x), q, q + 40.0, 20_000) / alpha
}

#[test]
fn c06_cvar_oracles() {
    let x: Vec<f64> = (1..=100).map(f64::from).collect();
    let emp = risk::cvar_empirical(&x, 0.1).unwrap();
    let quad = gaussian_cvar_quadrature(0.05);
    let g = risk::cvar_gaussian(0.0, 1.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=500);
        let alpha = rng.random_range(0.001..0.999);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let (ru, _) = risk::cvar_rockafellar(&v, alpha).unwrap();
        let e = risk::cvar_empirical(&v, alpha).unwrap();
        worst = worst.max((ru - e).abs() / e.abs().max(1.0));
    }
    let pass = emp == 95.5 && rel(g, quad) < 0.005 && rel(quad, 2.0627) < 0.005 && worst < 1e-9;
    report(
        6,
        "cvar-oracles",
        pass,
        &format!(
            "empirical {{1..100}} at 0.1 = {emp}; gaussian {g:.6} vs quadrature {quad:.6} (reference 2.0627); rockafellar worst gap {worst:.1e}"
        ),
    );
}

// ---------------------------------------------------------------- 7

/// Smallest common level t with `Σ a / t <= f_max`, found by successively
/// refined grids.
fn grid_level(a: &[f64], f_max: f64) -> f64 {
    let feasible = |t: f64| a.iter().map(|x| x / t).sum::<f64>() <= f_max;
    let (mut lo, mut hi) = (0.0, a.iter().sum::<f64>() * a.len() as f64 / f_max * 10.0);
    for _ in 0..12 {
        let step = (hi - lo) / 100.0;
        let first = (1..=100).map(|i| lo + i as f64 * step).find(|&t| feasible(t)).unwrap_or(hi);
        lo = first - step;
        hi = first;
    }
    hi
}

#[test]
fn c07_frequency_allocation_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    let mut beaten = 0;
    for _ in 0..100 {
        let n_bs = rng.random_range(1..=3);
        let f_max = 10f64.powf(rng.random_range(9.0..11.0));
        let mut assignment = Vec::new();
        for n in 0..n_bs {
            for _ in 0..rng.random_range(1..=6) {
                assignment.push(Some(n));
            }
        }
        assignment.push(None);
        let coef: Vec<f64> = assignment.iter().map(|_| 10f64.powf(rng.random_range(6.0..9.0))).collect();
        let f = optimizer::allocate_frequency(&assignment, &coef, n_bs, f_max).unwrap();
        let closed = optimizer::compute_risk(&assignment, &coef, &f);
        let grid = (0..n_bs)
            .map(|n| {
                let a: Vec<f64> = (0..coef.len()).filter(|&m| assignment[m] == Some(n)).map(|m| coef[m]).collect();
                grid_level(&a, f_max)
            })
            .fold(0.0, f64::max);
        worst = worst.max((closed - grid) / grid);
        for _ in 0..20 {
            let w: Vec<f64> = f.iter().map(|v| v * rng.random_range(0.9..1.1)).collect();
            let mut g = w.clone();
            for n in 0..n_bs {
                let s: f64 = (0..g.len()).filter(|&m| assignment[m] == Some(n)).map(|m| w[m]).sum();
                (0..g.len()).filter(|&m| assignment[m] == Some(n)).for_each(|m| g[m] = w[m] * f_max / s);
            }
            if optimizer::compute_risk(&assignment, &coef, &g) < closed * (1.0 - 1e-12) {
                beaten += 1;
            }
        }
    }
    report(
        7,
        "frequency-allocation",
        worst <= 1e-6 && beaten == 0,
        &format!("worst relative excess over grid optimum {worst:.2e} (tol 1e-6); random feasible perturbations better: {beaten}"),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_optimality_gap() {
    let t0 = std::time::Instant::now();
    let exp = Experiment::new(desk(), 1).unwrap();
    let pts = experiment::gap_sweep(&exp, 2, 10, 5).unwrap();
    let worst = pts.iter().map(|p| p.max_ratio).fold(0.0, f64::max);
    let means: Vec<f64> = pts.iter().map(|p| p.mean_ratio).collect();
    let monotone = means.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let secs = t0.elapsed().as_secs_f64();
    report(
        8,
        "optimality-gap",
        worst <= 1.10 && monotone && secs < 600.0,
        &format!(
            "N=2 M=10, {} f_max points x 5 replicates: worst ratio {worst:.4} (<= 1.10), mean ratios {:?} non-increasing {monotone}, {secs:.0}s",
            pts.len(),
            means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_risk_dominance_over_baselines() {
    let base = Experiment::new(desk(), 1).unwrap();
    let methods = [Method::Proposed, Method::Baseline1, Method::Baseline2];
    let k = 5;
    let grid = base.config.experiment.tau_grid_ms.clone();
    let mut cvar = [0.0; 3];
    let mut pooled_cvar = [0.0; 3];
    let mut worst_rel = vec![vec![0.0; grid.len()]; 3];
    let mut pooled_rel = vec![vec![0.0; grid.len()]; 3];
    let mut median = 0.0;
    for r in 0..k {
        let exp = base.replicate(r).unwrap();
        let (rep, runs) = experiment::compare(&exp, None, &methods).unwrap();
        for (i, m) in methods.iter().enumerate() {
            let mr = &rep.method(*m).unwrap().metrics;
            cvar[i] += mr.worst_ue_cvar_ms / k as f64;
            pooled_cvar[i] += mr.cvar_ms / k as f64;
            for (j, v) in mr.worst_ue_reliability.iter().enumerate() {
                worst_rel[i][j] += v / k as f64;
            }
            for (j, v) in mr.reliability.iter().enumerate() {
                pooled_rel[i][j] += v / k as f64;
            }
        }
        let mut e = runs.iter().find(|r| r.method == Method::Proposed).unwrap().run.e2e_ms(exp.scenario.tti_ms);
        e.sort_by(f64::total_cmp);
        median += e[e.len() / 2] / k as f64;
    }
    let above: Vec<usize> = (0..grid.len()).filter(|&j| grid[j] > median).collect();
    let violations = |curves: &[Vec<f64>]| -> Vec<f64> {
        above
            .iter()
            .filter(|&&j| curves[0][j] < curves[1][j] || curves[0][j] < curves[2][j])
            .map(|&j| grid[j])
            .collect()
    };
    let worst_viol = violations(&worst_rel);
    let pooled_viol = violations(&pooled_rel);
    let cvar_ok = cvar[0] <= cvar[1] && cvar[0] <= cvar[2];
    let span = |v: &[f64]| match (v.first(), v.last()) {
        (Some(a), Some(b)) => format!("{} thresholds in [{a}, {b}] ms", v.len()),
        _ => "none".to_string(),
    };
    report(
        9,
        "baseline-dominance",
        cvar_ok && worst_viol.is_empty(),
        &format!(
            "{k} replicates; worst-UE CVaR_0.05 proposed {:.2} / baseline1 {:.2} / baseline2 {:.2} ms ({}); \
             median {median:.1} ms; worst-UE reliability dominance violated at {}; \
             pooled CVaR {:.2} / {:.2} / {:.2} ms, pooled reliability dominance violated at {}",
            cvar[0],
            cvar[1],
            cvar[2],
            if cvar_ok { "ok" } else { "not lowest" },
            span(&worst_viol),
            pooled_cvar[0],
            pooled_cvar[1],
            pooled_cvar[2],
            span(&pooled_viol),
        ),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_monotone_trends() {
    let exp = Experiment::new(desk(), 1).unwrap();
    let f = experiment::fmax_sweep(&exp, Method::Proposed, 5).unwrap();
    let m = experiment::ue_sweep(&exp, Method::Proposed, 5).unwrap();
    let fe: Vec<f64> = f.iter().map(|p| p.mean_e2e_ms).collect();
    let me: Vec<f64> = m.iter().map(|p| p.mean_e2e_ms).collect();
    let f_down = fe.windows(2).all(|w| w[1] <= w[0]);
    let m_up = me.windows(2).all(|w| w[1] >= w[0]);
    let last = f.last().unwrap();
    let gap = (last.mean_e2e_ms - last.mean_transmission_ms) / last.mean_transmission_ms;
    let round = |v: &[f64]| v.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>();
    report(
        10,
        "monotone-trends",
        f_down && m_up && last.mean_transmission_ms > 0.0 && gap <= 0.05,
        &format!(
            "5 replicates; mean E2E vs f_max {:?} ms (non-increasing {f_down}), asymptote {:.3} ms vs transmission-only {:.3} ms (+{:.1}%); \
             vs M {:?} ms (non-decreasing {m_up})",
            round(&fe),
            last.mean_e2e_ms,
            last.mean_transmission_ms,
            gap * 100.0,
            round(&me)
        ),
    );
}

// ---------------------------------------------------------------- 11

/// Straight-line delay simulator written from the model equations only.
/// Returns completed E2E delays (ms) and the number of dropped tasks.
fn reference_simulation(s: &NetworkScenario, plan: &AllocationPlan, n_drops: usize, seed: u64) -> (Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lin = |db: f64| 10f64.powf(db / 10.0);
    let dist = |u: usize, b: usize| {
        let (p, q) = (s.ue_positions[u], s.bs_positions[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    };
    let gain = |u: usize, b: usize| lin(-(s.pathloss_ref_db + 10.0 * s.pathloss_exponent * dist(u, b).max(1.0).log10()));
    let home = |u: usize| {
        let mut best = 0;
        for b in 1..s.n_bs {
            if dist(u, b) < dist(u, best) {
                best = b;
            }
        }
        best
    };
    let noise = lin(s.noise_psd_dbm_hz) * s.bandwidth_hz;
    let threshold = lin(s.sinr_decode_threshold);
    let antenna = s.gain_ue * s.gain_bs;
    let t_s = s.tti_ms / 1e3;
    let mut load = vec![0usize; s.n_bs];
    for m in 0..s.n_ue {
        if let Some(n) = plan.serving_bs(m) {
            load[n] += 1;
        }
    }
    let mut delays = Vec::new();
    let mut dropped = 0;
    for _ in 0..n_drops {
        for m in 0..s.n_ue {
            let Some(n) = plan.serving_bs(m) else { continue };
            let t = &s.tasks;
            let up_bits = rng.random_range(t.uplink_bits_min..=t.uplink_bits_max).round().max(1.0);
            let down_bits = rng.random_range(t.downlink_bits_min..=t.downlink_bits_max).round().max(1.0);
            let h = t.heavy_share;
            let heavy = ((m + 1) as f64 * h).floor() > (m as f64 * h).floor();
            let (median, sigma) = if heavy {
                (t.cycles_median * ((t.cycles_sigma.powi(2) - t.heavy_sigma.powi(2)) / 2.0).exp(), t.heavy_sigma)
            } else {
                (t.cycles_median, t.cycles_sigma)
            };
            let z: f64 = rng.sample(StandardNormal);
            let cycles = median * (sigma * z).exp();
            let k = if s.share_bandwidth { load[n] as f64 } else { 1.0 };
            let mut total_ttis = 0.0;
            let mut ok = true;
            for uplink in [true, false] {
                let (bits, power) = if uplink { (up_bits, s.p_ue_mw) } else { (down_bits, s.p_bs_mw) };
                let mut decoded = false;
                for _ in 0..=s.max_retx {
                    let fade: f64 = rng.sample(Exp1);
                    let mut interference = 0.0;
                    for other in (0..s.n_bs).filter(|&o| o != n) {
                        let candidates: Vec<f64> = if uplink {
                            (0..s.n_ue)
                                .filter(|&u| u != m && home(u) == other)
                                .map(|u| antenna * s.p_ue_mw * gain(u, n))
                                .collect()
                        } else {
                            vec![antenna * s.p_bs_mw * gain(m, other)]
                        };
                        if candidates.is_empty() {
                            continue;
                        }
                        let pick = candidates[rng.random_range(0..candidates.len())];
                        let h: f64 = rng.sample(Exp1);
                        if rng.random::<f64>() < s.activity_factor {
                            interference += pick * h;
                        }
                    }
                    let sinr = antenna * power * fade * gain(m, n) / (interference + noise);
                    let rate = s.bandwidth_hz * (1.0 + sinr).log2() / k;
                    let ttis = (bits / (rate * t_s)).ceil().max(1.0);
                    if sinr >= threshold {
                        total_ttis += ttis;
                        decoded = true;
                        break;
                    }
                    total_ttis += ttis.min(f64::from(s.max_attempt_ttis));
                }
                ok &= decoded;
            }
            if ok {
                delays.push(total_ttis * s.tti_ms + cycles / plan.frequencies[m][n] * 1e3);
            } else {
                dropped += 1;
            }
        }
    }
    (delays, dropped)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / x.len() as f64 - j as f64 / y.len() as f64).abs());
    }
    let ne = (x.len() * y.len()) as f64 / (x.len() + y.len()) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        p += 2.0 * if k % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * kf * kf * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}

#[test]
fn c11_simulator_matches_reference() {
    let mut cases: Vec<(String, NetworkScenario, AllocationPlan, usize)> = Vec::new();

    let s = desk().scenario().unwrap();
    let plan = data::mixed_load_plan(&s, 3);
    cases.push(("desk, mixed loads".into(), s, plan, 1200));

    let mut c = desk();
    c.radio.activity_factor = 0.5;
    c.radio.share_bandwidth = false;
    c.radio.max_retx = 1;
    c.radio.sinr_decode_threshold += 6.0;
    c.compute.heavy_share = 0.0;
    let s = c.scenario().unwrap();
    let serving: Vec<Option<usize>> = (0..s.n_ue).map(|m| if m % 5 == 4 { None } else { Some(m % s.n_bs) }).collect();
    let plan = data::equal_share_plan(&s, &serving);
    cases.push(("partial activity, no sharing, one retransmission, round-robin".into(), s, plan, 1500));

    let mut c = desk();
    c.network.n_bs = 2;
    c.network.n_ue = 6;
    c.network.layout_seed = 9;
    c.radio.tti_ms = 0.5;
    c.radio.bandwidth_hz = 5e6;
    c.compute.heavy_share = 0.5;
    let s = c.scenario().unwrap();
    let serving: Vec<Option<usize>> = (0..s.n_ue).map(|m| Some(s.nearest_bs(m))).collect();
    let plan = data::equal_share_plan(&s, &serving);
    cases.push(("two cells, half-length TTI, 5 MHz, nearest BS".into(), s, plan, 4000));

    let mut details = Vec::new();
    let mut pass = true;
    for (i, (name, s, plan, drops)) in cases.iter().enumerate() {
        let run = sim::simulate_plan(s, plan, &CycleSource::from_scenario(s), *drops, 11 + i as u64, ns::EVAL).unwrap();
        let lib = run.e2e_ms(s.tti_ms);
        let (reference, ref_dropped) = reference_simulation(s, plan, *drops, 1000 + i as u64);
        let (d, p) = ks_two_sample(&lib, &reference);
        let attempts = (lib.len() + run.dropped.len()) as f64;
        let (p1, p2) = (run.dropped.len() as f64 / attempts, ref_dropped as f64 / attempts);
        let pooled = (p1 + p2) / 2.0;
        let z = if pooled > 0.0 { (p1 - p2) / (2.0 * pooled * (1.0 - pooled) / attempts).sqrt() } else { 0.0 };
        let ok = p > 0.01 && z.abs() < 3.29;
        pass &= ok;
        details.push(format!("[{name}: n={} D={d:.4} p={p:.3}, drop rate {p1:.4} vs {p2:.4}]", lib.len()));
    }
    report(11, "simulator-equivalence", pass, &details.join(" "));
}
