//! Variational autoencoder with a correlated (AR(1)) Gaussian posterior over
//! the latent pair `z = [τ_t·T, τ_p]`.
//!
//! The posterior covariance is `C = s·R(ρ)` with `R_ij = ρ^|i-j|`, so `s` is
//! the per-dimension variance. The encoder's heads are `μ`, `log s` and
//! `atanh ρ`, which keeps `s > 0` and `|ρ| < 1` by construction.
//!
//! The decoder is anchored: the reconstructed window for channel `c` is
//! `z_c` plus a zero-mean residual shape produced by a small MLP, so the
//! latent coordinates are the standardised window means of the two delays.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::TrainingConfig;
use crate::data::{InputWindow, Normalization};
use crate::error::{Error, Result};
use crate::nn::{self, Gradients, Layer, Network, Sgd, Tape, Tensor};
use crate::seed::{self, ns, StreamRng};

pub const LATENT_DIM: usize = 2;

fn check_ar1(rho: f64, s: f64, d: usize) -> Result<()> {
    if !(rho.abs() < 1.0) {
        return Err(Error::arg(format!("AR(1) correlation must satisfy |rho| < 1, got {rho}")));
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::arg(format!("AR(1) scale must be positive, got {s}")));
    }
    if d == 0 {
        return Err(Error::arg("AR(1) dimension must be at least 1"));
    }
    Ok(())
}

/// `C_ij = s·ρ^|i-j|`.
pub fn ar1_cov(rho: f64, s: f64, d: usize) -> Result<Vec<Vec<f64>>> {
    check_ar1(rho, s, d)?;
    Ok((0..d)
        .map(|i| (0..d).map(|j| s * rho.powi(i.abs_diff(j) as i32)).collect())
        .collect())
}

/// `s^d (1-ρ²)^(d-1)`.
pub fn ar1_det(rho: f64, s: f64, d: usize) -> Result<f64> {
    check_ar1(rho, s, d)?;
    Ok(s.powi(d as i32) * (1.0 - rho * rho).powi(d as i32 - 1))
}

/// Lower Cholesky factor: `L_i0 = √s ρ^i`, `L_ij = √s ρ^(i-j) √(1-ρ²)` for
/// `1 <= j <= i`.
pub fn ar1_cholesky(rho: f64, s: f64, d: usize) -> Result<Vec<Vec<f64>>> {
    check_ar1(rho, s, d)?;
    let rs = s.sqrt();
    let c = (1.0 - rho * rho).sqrt();
    Ok((0..d)
        .map(|i| {
            (0..d)
                .map(|j| match j {
                    _ if j > i => 0.0,
                    0 => rs * rho.powi(i as i32),
                    _ => rs * rho.powi((i - j) as i32) * c,
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub scale: f64,
    pub rho: f64,
}

impl LatentPosterior {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn covariance(&self) -> Result<Vec<Vec<f64>>> {
        ar1_cov(self.rho, self.scale, self.dim())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mu_prior: Vec<f64>,
    /// Per-dimension standard deviation; the prior covariance is `σ²·I`.
    pub sigma_prior: f64,
}

impl PriorSpec {
    pub fn standard(d: usize) -> Self {
        Self {
            mu_prior: vec![0.0; d],
            sigma_prior: 1.0,
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        if !(self.sigma_prior > 0.0) {
            return Err(Error::arg(format!("sigma_prior must be positive, got {}", self.sigma_prior)));
        }
        if self.mu_prior.len() != d {
            return Err(Error::DimensionMismatch {
                expected: format!("prior mean of dimension {d}"),
                found: self.mu_prior.len().to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagPosterior {
    pub mu: Vec<f64>,
    pub s_vec: Vec<f64>,
}

/// `z = μ + L ε`.
pub fn reparam_sample(post: &LatentPosterior, eps: &[f64]) -> Result<Vec<f64>> {
    let d = post.dim();
    if eps.len() != d {
        return Err(Error::DimensionMismatch {
            expected: format!("eps of dimension {d}"),
            found: eps.len().to_string(),
        });
    }
    let l = ar1_cholesky(post.rho, post.scale, d)?;
    Ok((0..d)
        .map(|i| post.mu[i] + (0..=i).map(|j| l[i][j] * eps[j]).sum::<f64>())
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// KL(N(μ, diag(s)) ‖ N(μ_p, σ_p² I)).
pub fn kl_diag(post: &DiagPosterior, prior: &PriorSpec) -> Result<f64> {
    let d = post.mu.len();
    prior.check(d)?;
    if post.s_vec.len() != d {
        return Err(Error::DimensionMismatch {
            expected: format!("{d} variances"),
            found: post.s_vec.len().to_string(),
        });
    }
    if let Some(v) = post.s_vec.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::arg(format!("posterior variance must be positive, got {v}")));
    }
    let p2 = prior.sigma_prior * prior.sigma_prior;
    let mut kl = 0.0;
    for i in 0..d {
        let r = post.s_vec[i] / p2;
        kl += r + (post.mu[i] - prior.mu_prior[i]).powi(2) / p2 - 1.0 - r.ln();
    }
    Ok(0.5 * kl)
}

/// KL(N(μ, s·R(ρ)) ‖ N(μ_p, σ_p² I))
/// `= ½[d s/σ² + ‖μ-μ_p‖²/σ² - d + d ln σ² - ln det C]`.
pub fn kl_ar1(post: &LatentPosterior, prior: &PriorSpec) -> Result<f64> {
    let d = post.dim();
    prior.check(d)?;
    let log_det = ar1_det(post.rho, post.scale, d)?.ln();
    let p2 = prior.sigma_prior * prior.sigma_prior;
    let df = d as f64;
    Ok(0.5 * (df * post.scale / p2 + sq_dist(&post.mu, &prior.mu_prior) / p2 - df + df * p2.ln() - log_det))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlGrad {
    pub mu: Vec<f64>,
    pub scale: f64,
    pub rho: f64,
}

pub fn kl_ar1_grad(post: &LatentPosterior, prior: &PriorSpec) -> Result<KlGrad> {
    let d = post.dim();
    prior.check(d)?;
    check_ar1(post.rho, post.scale, d)?;
    let p2 = prior.sigma_prior * prior.sigma_prior;
    let df = d as f64;
    Ok(KlGrad {
        mu: post.mu.iter().zip(&prior.mu_prior).map(|(m, p)| (m - p) / p2).collect(),
        scale: 0.5 * (df / p2 - df / post.scale),
        rho: (df - 1.0) * post.rho / (1.0 - post.rho * post.rho),
    })
}

/// Gaussian likelihood `p(x_t | x̂_t) = N(x̂_t, Σ)` per time step with unit
/// channel variances and cross-channel correlation `corr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Likelihood {
    pub corr: f64,
}

impl Likelihood {
    pub fn unit() -> Self {
        Self { corr: 0.0 }
    }

    pub fn precision(&self) -> [[f64; 2]; 2] {
        let r = self.corr;
        let k = 1.0 / (1.0 - r * r);
        [[k, -r * k], [-r * k, k]]
    }

    /// `-log p` constant for a window of `width` steps.
    pub fn normalizer(&self, width: usize) -> f64 {
        width as f64 * ((2.0 * PI).ln() + 0.5 * (1.0 - self.corr * self.corr).ln())
    }

    /// `½ Σ_t r_tᵀ Σ⁻¹ r_t` for channel-major residuals.
    pub fn quadratic(&self, residual: &[f64], width: usize) -> f64 {
        let p = self.precision();
        (0..width)
            .map(|t| {
                let (a, b) = (residual[t], residual[width + t]);
                0.5 * (p[0][0] * a * a + 2.0 * p[0][1] * a * b + p[1][1] * b * b)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// Reconstruction negative log-likelihood without the constant.
    pub reconstruction: f64,
    pub kl: f64,
    pub normalizer: f64,
}

impl ElboTerms {
    /// Negative ELBO.
    pub fn loss(&self) -> f64 {
        self.reconstruction + self.kl + self.normalizer
    }

    /// Negative ELBO up to the data-independent constant; what training
    /// minimises and reports.
    pub fn training_loss(&self) -> f64 {
        self.reconstruction + self.kl
    }
}

/// Negative ELBO of a channel-major window `x` given `recons.len()` decoded
/// reconstructions drawn from `post`.
pub fn elbo(
    x: &[f64],
    recons: &[Vec<f64>],
    post: &LatentPosterior,
    prior: &PriorSpec,
    likelihood: &Likelihood,
) -> Result<ElboTerms> {
    if recons.is_empty() {
        return Err(Error::arg("elbo needs at least one latent sample"));
    }
    if x.len() % 2 != 0 {
        return Err(Error::arg("window must have two channels"));
    }
    let width = x.len() / 2;
    let mut rec = 0.0;
    for r in recons {
        if r.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len().to_string(),
                found: r.len().to_string(),
            });
        }
        let resid: Vec<f64> = x.iter().zip(r).map(|(a, b)| a - b).collect();
        rec += likelihood.quadratic(&resid, width);
    }
    Ok(ElboTerms {
        reconstruction: rec / recons.len() as f64,
        kl: kl_ar1(post, prior)?,
        normalizer: likelihood.normalizer(width),
    })
}

/// Univariate Gaussian law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian {
    pub fn cdf(&self, x: f64) -> f64 {
        if self.variance == 0.0 {
            return if x >= self.mean { 1.0 } else { 0.0 };
        }
        Normal::new(self.mean, self.variance.sqrt()).map_or(f64::NAN, |n| n.cdf(x))
    }
}

/// Law of `τ = τ_t·T + τ_p` implied by a 2-D posterior whose coordinates are
/// standardised with `norm`.
pub fn e2e_gaussian(post: &LatentPosterior, norm: &Normalization) -> Gaussian {
    let [a, b] = norm.std;
    Gaussian {
        mean: norm.mean[0] + a * post.mu[0] + norm.mean[1] + b * post.mu[1],
        variance: post.scale * (a * a + b * b + 2.0 * post.rho * a * b),
    }
}

/// Joint Gaussian of `[τ_t·T, τ_p]` in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Joint2 {
    pub fn marginal(&self, c: usize) -> Gaussian {
        Gaussian {
            mean: self.mean[c],
            variance: self.cov[c][c],
        }
    }

    pub fn sum(&self) -> Gaussian {
        Gaussian {
            mean: self.mean[0] + self.mean[1],
            variance: self.cov[0][0] + self.cov[1][1] + 2.0 * self.cov[0][1],
        }
    }

    /// Moment-matched single Gaussian of an equal-weight mixture.
    pub fn moment_match(parts: &[Joint2]) -> Result<Joint2> {
        if parts.is_empty() {
            return Err(Error::Empty("no mixture components".into()));
        }
        let n = parts.len() as f64;
        let mut mean = [0.0; 2];
        for p in parts {
            mean[0] += p.mean[0] / n;
            mean[1] += p.mean[1] / n;
        }
        let mut cov = [[0.0; 2]; 2];
        for p in parts {
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += (p.cov[i][j] + (p.mean[i] - mean[i]) * (p.mean[j] - mean[j])) / n;
                }
            }
        }
        Ok(Joint2 { mean, cov })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArch {
    pub width: usize,
    pub conv_channels: usize,
    pub hidden: usize,
}

impl VaeArch {
    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self {
            width: cfg.window,
            conv_channels: cfg.conv_channels,
            hidden: cfg.hidden,
        }
    }
}

/// Gradients of the training loss w.r.t. encoder and decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

impl VaeGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.encoder.flat();
        v.extend(self.decoder.flat());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub arch: VaeArch,
    pub encoder: Network,
    pub decoder: Network,
    pub prior: PriorSpec,
    pub likelihood: Likelihood,
    pub normalization: Normalization,
    /// Pooled within-window covariance of the standardised training data.
    pub within_cov: [[f64; 2]; 2],
    pub trained: bool,
}

impl Vae {
    pub fn new(arch: VaeArch, prior: PriorSpec, rng: &mut StreamRng) -> Result<Self> {
        if arch.width < 5 {
            return Err(Error::arg(format!("window width must be at least 5 for two k=3 convolutions, got {}", arch.width)));
        }
        prior.check(LATENT_DIM)?;
        let (c, h, w) = (arch.conv_channels, arch.hidden, arch.width);
        let encoder = Network::new(
            vec![2, w],
            vec![
                Layer::conv1d(2, c, 3, 1, rng),
                Layer::Relu,
                Layer::conv1d(c, c, 3, 1, rng),
                Layer::Relu,
                Layer::dense(c * (w - 4), h, rng),
                Layer::Relu,
                Layer::dense(h, 4, rng),
            ],
        )?;
        let decoder = Network::new(
            vec![LATENT_DIM],
            vec![Layer::dense(LATENT_DIM, h, rng), Layer::Relu, Layer::dense(h, 2 * w, rng)],
        )?;
        Ok(Self {
            arch,
            encoder,
            decoder,
            prior,
            likelihood: Likelihood::unit(),
            normalization: Normalization::identity(),
            within_cov: [[1.0, 0.0], [0.0, 1.0]],
            trained: false,
        })
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.decoder.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let k = self.encoder.n_params();
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params().to_string(),
                found: flat.len().to_string(),
            });
        }
        self.encoder.set_params(&flat[..k])?;
        self.decoder.set_params(&flat[k..])
    }

    fn input(&self, x: &[f64]) -> Result<Tensor> {
        Tensor::new(vec![2, self.arch.width], x.to_vec())
    }

    fn heads(out: &[f64]) -> LatentPosterior {
        LatentPosterior {
            mu: vec![out[0], out[1]],
            scale: out[2].exp(),
            rho: out[3].tanh(),
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<LatentPosterior> {
        let post = Self::heads(&self.encoder.forward(&self.input(x)?)?.values);
        check_posterior(&post)?;
        Ok(post)
    }

    fn anchor(z: &[f64], raw: &[f64], width: usize) -> Vec<f64> {
        let mut out = raw.to_vec();
        for c in 0..2 {
            let ch = &mut out[c * width..(c + 1) * width];
            let m = ch.iter().sum::<f64>() / width as f64;
            ch.iter_mut().for_each(|v| *v += z[c] - m);
        }
        out
    }

    /// Reconstructed channel-major window for latent `z`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let raw = self.decoder.forward(&Tensor::vector(z.to_vec()))?;
        Ok(Self::anchor(z, &raw.values, self.arch.width))
    }

    /// Negative ELBO with fixed standard-normal draws `eps` (one per latent
    /// sample).
    pub fn loss_with_eps(&self, x: &[f64], eps: &[[f64; 2]]) -> Result<ElboTerms> {
        let post = self.encode(x)?;
        let recons = eps
            .iter()
            .map(|e| self.decode(&reparam_sample(&post, e)?))
            .collect::<Result<Vec<_>>>()?;
        elbo(x, &recons, &post, &self.prior, &self.likelihood)
    }

    /// Loss terms and reverse-mode gradients for one window.
    pub fn loss_and_grads(&self, x: &[f64], eps: &[[f64; 2]]) -> Result<(ElboTerms, LatentPosterior, VaeGrads)> {
        if eps.is_empty() {
            return Err(Error::arg("need at least one latent sample"));
        }
        let w = self.arch.width;
        let mut enc_tape = Tape::default();
        let out = self.encoder.forward_recorded(&self.input(x)?, &mut enc_tape)?;
        let post = Self::heads(&out.values);
        check_posterior(&post)?;
        let (s, rho) = (post.scale, post.rho);
        let rs = s.sqrt();
        let c = (1.0 - rho * rho).sqrt();
        let inv_l = 1.0 / eps.len() as f64;
        let p = self.likelihood.precision();

        let mut g_mu = [0.0; 2];
        let mut g_s = 0.0;
        let mut g_rho = 0.0;
        let mut dec_grads = Gradients::zeros_like(&self.decoder);
        let mut rec = 0.0;
        let mut dec_tape = Tape::default();
        for e in eps {
            let z = [post.mu[0] + rs * e[0], post.mu[1] + rs * (rho * e[0] + c * e[1])];
            let raw = self.decoder.forward_recorded(&Tensor::vector(z.to_vec()), &mut dec_tape)?;
            let xhat = Self::anchor(&z, &raw.values, w);
            let resid: Vec<f64> = x.iter().zip(&xhat).map(|(a, b)| a - b).collect();
            rec += self.likelihood.quadratic(&resid, w);
            // d/dx̂ of ½ rᵀ P r with r = x - x̂
            let mut g_xhat = vec![0.0; 2 * w];
            for t in 0..w {
                let (a, b) = (resid[t], resid[w + t]);
                g_xhat[t] = -(p[0][0] * a + p[0][1] * b) * inv_l;
                g_xhat[w + t] = -(p[1][0] * a + p[1][1] * b) * inv_l;
            }
            let mut g_z = [0.0; 2];
            let mut g_raw = g_xhat.clone();
            for ch in 0..2 {
                let sl = &g_xhat[ch * w..(ch + 1) * w];
                let total: f64 = sl.iter().sum();
                g_z[ch] += total;
                let m = total / w as f64;
                g_raw[ch * w..(ch + 1) * w].iter_mut().for_each(|g| *g -= m);
            }
            let dg = self.decoder.backward(&dec_tape, &g_raw)?;
            g_z[0] += dg.input[0];
            g_z[1] += dg.input[1];
            dec_grads.add_assign(&dg);

            g_mu[0] += g_z[0];
            g_mu[1] += g_z[1];
            g_s += g_z[0] * e[0] / (2.0 * rs) + g_z[1] * (rho * e[0] + c * e[1]) / (2.0 * rs);
            g_rho += g_z[1] * rs * (e[0] - rho / c * e[1]);
        }
        let kl = kl_ar1(&post, &self.prior)?;
        let kg = kl_ar1_grad(&post, &self.prior)?;
        g_mu[0] += kg.mu[0];
        g_mu[1] += kg.mu[1];
        g_s += kg.scale;
        g_rho += kg.rho;
        let head_grad = [g_mu[0], g_mu[1], g_s * s, g_rho * (1.0 - rho * rho)];
        let enc_grads = self.encoder.backward(&enc_tape, &head_grad)?;
        let terms = ElboTerms {
            reconstruction: rec * inv_l,
            kl,
            normalizer: self.likelihood.normalizer(w),
        };
        Ok((
            terms,
            post,
            VaeGrads {
                encoder: enc_grads,
                decoder: dec_grads,
            },
        ))
    }

    /// On/off state of every rectifier unit during the pass, for detecting
    /// kinks in finite-difference checks.
    pub fn activation_pattern(&self, x: &[f64], eps: &[[f64; 2]]) -> Result<Vec<bool>> {
        let mut pattern = Vec::new();
        let mut collect = |net: &Network, tape: &Tape| {
            for (i, l) in net.layers.iter().enumerate() {
                if matches!(l, Layer::Relu) {
                    if let Some(t) = tape.layer_input(i) {
                        pattern.extend(t.values.iter().map(|v| *v > 0.0));
                    }
                }
            }
        };
        let mut tape = Tape::default();
        let out = self.encoder.forward_recorded(&self.input(x)?, &mut tape)?;
        collect(&self.encoder, &tape);
        let post = Self::heads(&out.values);
        for e in eps {
            let z = reparam_sample(&post, e)?;
            self.decoder.forward_recorded(&Tensor::vector(z), &mut tape)?;
            collect(&self.decoder, &tape);
        }
        Ok(pattern)
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::Untrained)
        }
    }

    /// Gaussian law of the E2E delay (ms) for one window.
    pub fn e2e_delay_distribution(&self, window: &InputWindow) -> Result<Gaussian> {
        self.require_trained()?;
        Ok(e2e_gaussian(&self.encode(&window.values)?, &self.normalization))
    }

    /// Predictive joint law of one further `[τ_t·T, τ_p]` observation from
    /// the stream behind `window`: the posterior over the window level plus
    /// the pooled within-window spread, in ms.
    pub fn predictive(&self, window: &InputWindow) -> Result<Joint2> {
        self.require_trained()?;
        let post = self.encode(&window.values)?;
        let c = post.covariance()?;
        let n = &self.normalization;
        let sd = n.std;
        let mut cov = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] = (c[i][j] + self.within_cov[i][j]) * sd[i] * sd[j];
            }
        }
        Ok(Joint2 {
            mean: n.destandardize([post.mu[0], post.mu[1]]),
            cov,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        nn::load_checkpoint(path)
    }
}

fn check_posterior(post: &LatentPosterior) -> Result<()> {
    if post.mu.iter().all(|m| m.is_finite()) && post.scale > 0.0 && post.scale.is_finite() && post.rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "encoder heads (mu {:?}, s {}, rho {})",
            post.mu, post.scale, post.rho
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_rho: f64,
    pub mean_s: f64,
    /// Mean posterior means over the epoch's examples.
    pub mean_mu: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "mean_loss", "mean_rho", "mean_s"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.mean_loss.to_string(),
                e.mean_rho.to_string(),
                e.mean_s.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Pooled cross-channel correlation and within-window covariance of
/// standardised windows.
pub fn window_statistics(windows: &[InputWindow]) -> ([[f64; 2]; 2], f64) {
    let mut within = [[0.0; 2]; 2];
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for win in windows {
        let m = win.channel_means();
        let w = win.width;
        for t in 0..w {
            let (a, b) = (win.at(0, t), win.at(1, t));
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
            let (da, db) = (a - m[0], b - m[1]);
            within[0][0] += da * da / (w - 1) as f64;
            within[0][1] += da * db / (w - 1) as f64;
            within[1][1] += db * db / (w - 1) as f64;
        }
    }
    let n = windows.len().max(1) as f64;
    for row in &mut within {
        row.iter_mut().for_each(|v| *v /= n);
    }
    within[1][0] = within[0][1];
    let corr = if sxx > 0.0 && syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
    (within, corr.clamp(-0.95, 0.95))
}

fn draw_eps(rng: &mut StreamRng, l: usize) -> Vec<[f64; 2]> {
    (0..l)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect()
}

/// Minibatch SGD on the negative ELBO.
///
/// Each step: draw a minibatch, encode, sample `ε ~ N(0, I)`, form
/// `z = μ + Lε`, decode, evaluate the loss and update both networks.
pub fn train(
    windows: &[InputWindow],
    cfg: &TrainingConfig,
    normalization: Normalization,
    seed: u64,
) -> Result<(Vae, TrainReport)> {
    if windows.is_empty() {
        return Err(Error::Empty("no training windows".into()));
    }
    if let Some(w) = windows.iter().find(|w| w.width != cfg.window) {
        return Err(Error::DimensionMismatch {
            expected: format!("windows of width {}", cfg.window),
            found: w.width.to_string(),
        });
    }
    if cfg.batch_size == 0 || cfg.latent_samples == 0 {
        return Err(Error::arg("batch_size and latent_samples must be at least 1"));
    }
    let prior = PriorSpec {
        mu_prior: cfg.prior_mu.clone(),
        sigma_prior: cfg.prior_sigma,
    };
    let mut init_rng = seed::stream(seed, &[ns::TRAIN, 0]);
    let mut vae = Vae::new(VaeArch::from_config(cfg), prior, &mut init_rng)?;
    let (within, corr) = window_statistics(windows);
    vae.within_cov = within;
    vae.likelihood = Likelihood { corr };
    vae.normalization = normalization;
    vae.trained = true;

    let mut enc_opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut dec_opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = seed::stream(seed, &[ns::TRAIN, epoch as u64]);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut rho_sum, mut s_sum) = (0.0, 0.0, 0.0);
        let mut mu_sum = [0.0; 2];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Option<VaeGrads> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let eps = draw_eps(&mut rng, cfg.latent_samples);
                let (terms, post, g) = vae.loss_and_grads(&windows[i].values, &eps).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
                batch_loss += terms.training_loss();
                rho_sum += post.rho;
                s_sum += post.scale;
                mu_sum[0] += post.mu[0];
                mu_sum[1] += post.mu[1];
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        acc.encoder.add_assign(&g.encoder);
                        acc.decoder.add_assign(&g.decoder);
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            let mut g = grads.expect("non-empty batch");
            let k = 1.0 / batch.len() as f64;
            g.encoder.scale(k);
            g.decoder.scale(k);
            if cfg.grad_clip > 0.0 {
                let norm = g.flat().iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    g.encoder.scale(cfg.grad_clip / norm);
                    g.decoder.scale(cfg.grad_clip / norm);
                }
            }
            enc_opt.step(&mut vae.encoder, &g.encoder);
            dec_opt.step(&mut vae.decoder, &g.decoder);
        }
        let n = windows.len() as f64;
        report.epochs.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / n,
            mean_rho: rho_sum / n,
            mean_s: s_sum / n,
            mean_mu: [mu_sum[0] / n, mu_sum[1] / n],
        });
    }
    Ok((vae, report))
}

/// Mean learned correlation over windows.
pub fn mean_rho(vae: &Vae, windows: &[InputWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Empty("no windows".into()));
    }
    let mut sum = 0.0;
    for w in windows {
        sum += vae.encode(&w.values)?.rho;
    }
    Ok(sum / windows.len() as f64)
}
