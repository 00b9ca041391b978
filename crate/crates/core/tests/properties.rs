use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mec_core::config::{Config, Scale};
use mec_core::data::{self, Normalization};
use mec_core::scenario::AllocationPlan;
use mec_core::seed;
use mec_core::sim::{CycleSource, DelaySample};
use mec_core::vae::{self, LatentPosterior, PriorSpec, Vae, VaeArch};

#[test]
fn reparam_sample_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (rho, s) in [(0.7, 2.0), (-0.4, 0.3), (0.0, 1.5)] {
        let post = LatentPosterior { mu: vec![1.0, -2.0], scale: s, rho };
        let n = 1_000_000;
        let mut sum = [0.0; 2];
        let mut prod = [[0.0; 2]; 2];
        for _ in 0..n {
            let e = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let z = vae::reparam_sample(&post, &e).unwrap();
            for i in 0..2 {
                sum[i] += z[i];
                for j in 0..2 {
                    prod[i][j] += z[i] * z[j];
                }
            }
        }
        let c = post.covariance().unwrap();
        let nf = n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let cov = prod[i][j] / nf - sum[i] / nf * sum[j] / nf;
                // off-diagonal entries near zero are checked against the scale
                let denom = if i == j || rho.abs() > 0.1 { c[i][j].abs() } else { s };
                assert!((cov - c[i][j]).abs() <= 0.02 * denom, "rho {rho} s {s} [{i}][{j}]: {cov} vs {}", c[i][j]);
            }
        }
    }
}

#[test]
fn elbo_many_samples_agrees_with_one_in_expectation() {
    let arch = VaeArch { width: 6, conv_channels: 2, hidden: 4 };
    let mut r = seed::stream(7, &[0]);
    let vae = Vae::new(arch, PriorSpec::standard(2), &mut r).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
    let mut draw = |l: usize| -> Vec<[f64; 2]> { (0..l).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect() };
    let ones: Vec<f64> = (0..200).map(|_| vae.loss_with_eps(&x, &draw(1)).unwrap().loss()).collect();
    let many: Vec<f64> = (0..200).map(|_| vae.loss_with_eps(&x, &draw(1000)).unwrap().loss()).collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, (var / v.len() as f64).sqrt())
    };
    let (m1, se1) = stats(&ones);
    let (m2, se2) = stats(&many);
    let se = (se1 * se1 + se2 * se2).sqrt();
    assert!((m1 - m2).abs() <= 2.0 * se, "L=1 mean {m1} vs L=1000 mean {m2}, se {se}");
    assert!(se2 < se1);
}

#[test]
fn e2e_gaussian_matches_decoded_samples() {
    let arch = VaeArch { width: 8, conv_channels: 3, hidden: 6 };
    let mut r = seed::stream(3, &[0]);
    let mut model = Vae::new(arch, PriorSpec::standard(2), &mut r).unwrap();
    let records: Vec<DelaySample> = (0..50)
        .map(|i| DelaySample { drop_id: i, ue_id: 0, bs_id: 0, tau_t_ttis: 3 + i % 7, tau_p_ms: 4.0 + (i % 5) as f64 })
        .collect();
    model.normalization = Normalization::fit(&records, 1.0).unwrap();
    model.trained = true;
    let d = data::DelayDataset::new("t", 1.0, records);
    let w = &data::make_windows(&d, 8, 8, &model.normalization).unwrap()[0];
    let law = model.e2e_delay_distribution(w).unwrap();
    let post = model.encode(&w.values).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let mut tau: Vec<f64> = (0..n)
        .map(|_| {
            let z = vae::reparam_sample(&post, &[rng.sample(StandardNormal), rng.sample(StandardNormal)]).unwrap();
            let ms = model.normalization.destandardize([z[0], z[1]]);
            ms[0] + ms[1]
        })
        .collect();
    tau.sort_by(f64::total_cmp);
    let ks = tau
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = law.cdf(t);
            (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS distance {ks}");
}

#[test]
fn trace_replay_reproduces_file_mean() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<f64> = (0..1000).map(|_| (rng.random_range(1e7..9e7f64)).round()).collect();
    let mut text = String::from("task_id,cycles\n");
    for (i, v) in values.iter().enumerate() {
        text.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(&path, text).unwrap();
    let file_mean = values.iter().sum::<f64>() / 1000.0;

    let mut c = Config::preset(Scale::Desk);
    c.network.n_bs = 1;
    c.network.n_ue = 1;
    c.radio.sinr_decode_threshold = -200.0;
    let s = c.scenario().unwrap();
    let trace = data::ingest_compute_trace(&path).unwrap();
    let cycles = CycleSource::Trace(Arc::new(trace.cycles(1e9)));
    let plan = AllocationPlan::from_serving(1, &[Some(0)], &[s.f_max_hz]);
    let d = data::generate_dataset_with(&s, &plan, &cycles, 1000, 9).unwrap();
    assert_eq!(d.len(), 1000);
    let mean = d.records.iter().map(|r| r.tau_p_ms * s.f_max_hz / 1e3).sum::<f64>() / 1000.0;
    assert!((mean - file_mean).abs() <= 1e-12 * file_mean, "{mean} vs {file_mean}");
    let mut seen: Vec<f64> = d.records.iter().map(|r| (r.tau_p_ms * s.f_max_hz / 1e3).round()).collect();
    seen.sort_by(f64::total_cmp);
    let mut expected = values.clone();
    expected.sort_by(f64::total_cmp);
    assert_eq!(seen, expected);
}
