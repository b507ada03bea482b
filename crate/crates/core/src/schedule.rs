//! Discrete-time variance-preserving diffusion coefficients.
//!
//! Steps are 1-based: `t` ranges over `1..=T`. All arithmetic is `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Parameter(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Log signal-to-noise half-ratio `½ log(ᾱ / (1 − ᾱ))` at step `t`.
    pub fn log_snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(0.5 * (ab / (1.0 - ab)).ln())
    }

    /// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        add_noise_with(x0, eps, ab)
    }

    /// `(1/√α_t) · (x_t − β_t/√(1 − ᾱ_t) · ε̂)`.
    pub fn posterior_mean(&self, x_t: &Tensor, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
        let i = self.idx(t)?;
        posterior_mean_with(x_t, eps_hat, self.alpha[i], self.beta[i], self.alpha_bar[i])
    }

    /// `−ε̂ / √(1 − ᾱ_t)`.
    pub fn score_from_eps(&self, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        if ab >= 1.0 {
            return Err(Error::Numeric(format!("alpha_bar[{t}] = 1, score undefined")));
        }
        let c = -1.0 / (1.0 - ab).sqrt();
        Ok(eps_hat.scale(c))
    }
}

/// Forward marginal for an explicit `ᾱ`, including the limits 0 and 1.
pub fn add_noise_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// Optimal reverse mean for explicit coefficients.
pub fn posterior_mean_with(
    x_t: &Tensor,
    eps_hat: &Tensor,
    alpha: f64,
    beta: f64,
    alpha_bar: f64,
) -> Result<Tensor> {
    let inv = 1.0 / alpha.sqrt();
    let c = beta / (1.0 - alpha_bar).sqrt();
    x_t.zip_map(eps_hat, |x, e| inv * (x - c * e))
}
