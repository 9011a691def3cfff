//! Diagonal Gaussian math and the maximum-entropy sampling criterion.
//!
//! The priority of a state-action pair `(s, a)` under the model-data policy
//! `N(mu(s), diag(sigma(s)^2))` is the entropy gain (up to the positive
//! dataset-size constant) obtained by adding `a` to the samples the
//! conditional was fitted on:
//!
//! ```text
//! p = -log(sqrt(2 pi) * pdf(a) * sigma) = (a - mu)^2 / (2 sigma^2)
//! ```
//!
//! summed over action dimensions and floored at a small positive epsilon so
//! it can feed a proportional sampler.

use crate::error::{check_dim, usage, MemrError, Result};

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Floor applied to every priority before it reaches a sampler.
pub const PRIORITY_EPS: f64 = 1e-6;

/// Floor for standard deviations emitted by fitted conditionals.
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return usage("DiagGaussian needs at least one dimension");
        }
        check_dim("DiagGaussian std", mean.len(), std.len())?;
        if let Some(s) = std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return usage(format!("DiagGaussian std must be finite and > 0, got {s}"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(MemrError::Numerical("DiagGaussian mean is not finite".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dim("log_prob input", self.dim(), x.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(x)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -0.5 * LN_2PI - s.ln() - 0.5 * z * z
            })
            .sum())
    }

    pub fn entropy(&self) -> f64 {
        self.std
            .iter()
            .map(|s| 0.5 * (LN_2PI + 1.0) + s.ln())
            .sum()
    }

    /// Maximum-entropy priority of action `a`; see the module docs.
    pub fn priority(&self, a: &[f64], eps: f64) -> Result<f64> {
        check_dim("priority action", self.dim(), a.len())?;
        if !(eps > 0.0) {
            return usage(format!("priority eps must be > 0, got {eps}"));
        }
        let raw: f64 = self
            .mean
            .iter()
            .zip(&self.std)
            .zip(a)
            .map(|((m, s), a)| {
                let d = a - m;
                d * d / (2.0 * s * s)
            })
            .sum();
        Ok(raw.max(eps))
    }
}

/// Observations `x_1..x_N` of a scalar Gaussian variable.
#[derive(Clone, Debug)]
pub struct SampleSet1D {
    values: Vec<f64>,
}

impl SampleSet1D {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return usage(format!("sample set needs at least 2 values, got {}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MemrError::Numerical("sample set has non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn mle_mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Maximum-likelihood (biased) variance.
    pub fn mle_var(&self) -> f64 {
        mle_var_about(&self.values, self.mle_mean())
    }
}

fn mle_var_about(values: &[f64], mean: f64) -> f64 {
    values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / values.len() as f64
}

/// Exact change in differential entropy of the MLE Gaussian fit when `t` is
/// appended to the samples. Refits mean and variance from scratch on both
/// sets; this is the brute-force reference for the large-N approximation.
pub fn entropy_gain_exact(samples: &SampleSet1D, t: f64) -> Result<f64> {
    let var_before = samples.mle_var();
    if !(var_before > 0.0) {
        return Err(MemrError::Degenerate("sample variance is zero".into()));
    }
    let n = samples.count() as f64;
    let mean_after = (samples.values.iter().sum::<f64>() + t) / (n + 1.0);
    let var_after = (samples
        .values
        .iter()
        .map(|x| (x - mean_after) * (x - mean_after))
        .sum::<f64>()
        + (t - mean_after) * (t - mean_after))
        / (n + 1.0);
    Ok(0.5 * (var_after / var_before).ln())
}

/// Algebraic simplification of [`entropy_gain_exact`]:
/// `1/2 log(N/(N+1) * (1 + (t - mean)^2 / ((N+1) var)))`.
pub fn entropy_gain_closed_form(n: usize, mean: f64, var: f64, t: f64) -> f64 {
    let n = n as f64;
    let d = t - mean;
    0.5 * ((n / (n + 1.0)) * (1.0 + d * d / ((n + 1.0) * var))).ln()
}

/// Large-N approximation `(t - mean)^2 / (2 N std^2)`, i.e. the scalar
/// priority divided by the sample count.
pub fn entropy_gain_approx(n: usize, mean: f64, std: f64, t: f64) -> f64 {
    let d = t - mean;
    d * d / (2.0 * n as f64 * std * std)
}

/// One candidate `(s_i, a_i)` together with the model-data conditional at `s_i`.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub state_id: usize,
    pub action: Vec<f64>,
    pub conditional: DiagGaussian,
}

/// Index of the candidate whose addition maximizes the joint entropy of the
/// model dataset. Ties go to the lowest index.
pub fn select_max_gain(candidates: &[Candidate], eps: f64) -> Result<usize> {
    if candidates.is_empty() {
        return usage("select_max_gain: empty candidate list");
    }
    let mut best = 0;
    let mut best_p = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let p = c.conditional.priority(&c.action, eps)?;
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    Ok(best)
}
