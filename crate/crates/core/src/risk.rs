//! Value-at-Risk and Conditional Value-at-Risk of delay.
//!
//! `alpha` is the tail mass throughout: VaR_α is the smallest threshold
//! exceeded with probability at most α, and CVaR_α is the mean of the worst
//! α-fraction of outcomes.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Continuous, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskSource {
    Empirical,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub var_ms: f64,
    pub cvar_ms: f64,
    pub alpha: f64,
    pub source: RiskSource,
}

impl RiskEstimate {
    pub fn empirical(samples: &[f64], alpha: f64) -> Result<Self> {
        let sorted = sorted_checked(samples, alpha)?;
        let var = var_sorted(&sorted, alpha);
        Ok(Self {
            var_ms: var,
            cvar_ms: cvar_sorted(&sorted, alpha, var),
            alpha,
            source: RiskSource::Empirical,
        })
    }

    pub fn gaussian(mean: f64, variance: f64, alpha: f64) -> Result<Self> {
        let var_ms = var_gaussian(mean, variance, alpha)?;
        Ok(Self {
            var_ms,
            cvar_ms: cvar_gaussian(mean, variance, alpha)?,
            alpha,
            source: RiskSource::Gaussian,
        })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn sorted_checked(samples: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if samples.is_empty() {
        return Err(Error::Empty("risk measure needs at least one sample".into()));
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("delay sample {x}")));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Smallest `v` in the sorted sample with `#{x > v} <= alpha·n`.
fn var_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    let allowed = alpha * n as f64;
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == v {
            j += 1;
        }
        let above = (n - j - 1) as f64;
        if above <= allowed * (1.0 + 1e-12) {
            return v;
        }
        i = j + 1;
    }
    sorted[n - 1]
}

/// Fractional-atom tail mean: `VaR + E[(X - VaR)+] / alpha`.
///
/// This equals the Rockafellar-Uryasev minimum exactly and reduces to the
/// mean of the samples strictly above VaR whenever `alpha·n` counts exactly
/// the samples in the tail.
fn cvar_sorted(sorted: &[f64], alpha: f64, var: f64) -> f64 {
    let n = sorted.len() as f64;
    let excess: f64 = sorted.iter().rev().take_while(|&&x| x > var).map(|x| x - var).sum();
    var + excess / (alpha * n)
}

pub fn var_empirical(samples: &[f64], alpha: f64) -> Result<f64> {
    let sorted = sorted_checked(samples, alpha)?;
    Ok(var_sorted(&sorted, alpha))
}

/// Empirical CVaR_α. With an empty tail (all mass at VaR) this is VaR.
pub fn cvar_empirical(samples: &[f64], alpha: f64) -> Result<f64> {
    let sorted = sorted_checked(samples, alpha)?;
    let var = var_sorted(&sorted, alpha);
    Ok(cvar_sorted(&sorted, alpha, var))
}

/// `min_t t + E[(X - t)+] / alpha`, scanned over the sample points where the
/// piecewise-linear objective has its kinks. Returns `(minimum, argmin)`;
/// ties resolve to the smallest minimiser.
pub fn cvar_rockafellar(samples: &[f64], alpha: f64) -> Result<(f64, f64)> {
    let sorted = sorted_checked(samples, alpha)?;
    let n = sorted.len();
    let inv = 1.0 / (alpha * n as f64);
    // suffix[i] = sum of sorted[i..]
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + sorted[i];
    }
    let mut best = (f64::INFINITY, sorted[0]);
    let mut i = 0;
    while i < n {
        let t = sorted[i];
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == t {
            j += 1;
        }
        let above = (n - j - 1) as f64;
        let phi = t + (suffix[j + 1] - above * t) * inv;
        if phi < best.0 - 1e-12 * phi.abs().max(1.0) {
            best = (phi, t);
        }
        i = j + 1;
    }
    Ok(best)
}

fn std_normal() -> Normal {
    Normal::standard()
}

fn check_variance(variance: f64) -> Result<()> {
    if variance >= 0.0 && variance.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("variance must be finite and >= 0, got {variance}")))
    }
}

pub fn var_gaussian(mean: f64, variance: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_variance(variance)?;
    Ok(mean + variance.sqrt() * std_normal().inverse_cdf(1.0 - alpha))
}

/// `μ + σ·φ(z_{1-α}) / α`.
pub fn cvar_gaussian(mean: f64, variance: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_variance(variance)?;
    let n = std_normal();
    let q = n.inverse_cdf(1.0 - alpha);
    Ok(mean + variance.sqrt() * n.pdf(q) / alpha)
}

pub fn mean(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("mean of an empty sample".into()));
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}
