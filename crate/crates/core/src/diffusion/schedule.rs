use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the fixed per-step reverse variance is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceKind {
    /// Posterior variance of `q(x_{t-1} | x_t, x_0)`, with step 1 (where it
    /// is exactly zero) clipped to the step-2 value so every transition has a
    /// proper density.
    #[default]
    ClippedPosterior,
    /// Raw posterior variance, zero at step 1.
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub variance: VarianceKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.2,
            variance: VarianceKind::ClippedPosterior,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max, self.variance)
    }
}

/// Discrete DDPM noise schedule.
///
/// Arrays are indexed by timestep `0..=T`; index 0 is the clean-data
/// sentinel with `beta = 0` and `alpha_bar = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_min` at t = 1 to `beta_max` at t = T.
    pub fn linear(
        steps: usize,
        beta_min: f64,
        beta_max: f64,
        variance: VarianceKind,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::config(format!(
                "schedule bounds must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = (1..=steps)
            .map(|t| beta_min + (beta_max - beta_min) * (t - 1) as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(&betas, variance)
    }

    /// Builds a schedule from explicit betas for timesteps `1..=T`.
    pub fn from_betas(betas_1_to_t: &[f64], variance: VarianceKind) -> Result<Self> {
        let steps = betas_1_to_t.len();
        if steps < 2 {
            return Err(Error::config("schedule needs at least 2 steps"));
        }
        if betas_1_to_t.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        if betas_1_to_t.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("betas must be non-decreasing"));
        }
        let mut betas = vec![0.0];
        betas.extend_from_slice(betas_1_to_t);
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        let mut posterior_vars = vec![0.0; steps + 1];
        for t in 1..=steps {
            posterior_vars[t] = betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
        }
        if variance == VarianceKind::ClippedPosterior {
            posterior_vars[1] = posterior_vars[2];
        }
        Ok(Self {
            steps,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Fixed variance of the reverse transition out of step `t`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t]
    }

    /// `alpha_bar[1..=T]`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::usage(format!(
                "timestep {t} outside [0, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// Coefficient `c` in `mu = (x_t - c * eps_hat) / sqrt(alpha_t)`.
    pub fn eps_coefficient(&self, t: usize) -> f64 {
        self.betas[t] / (1.0 - self.alpha_bars[t]).sqrt()
    }
}
