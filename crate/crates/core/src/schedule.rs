//! Variance schedule and the closed-form forward (noising) process.
//!
//! Timesteps are 0-based: index `t` here corresponds to step `t + 1` in the
//! usual 1..=T notation, so `alpha_bar[0] = alpha[0]`.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a linear beta schedule, as stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// Linear schedule with the 1e-4..0.02 endpoints rescaled by `1000 / steps`,
    /// so short chains still end close to pure noise.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        Self {
            steps,
            beta_start: (1e-4 * scale).min(0.5),
            beta_end: (0.02 * scale).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::scaled_linear(100)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
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
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Parameter("every beta must lie in (0, 1)".into()));
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

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }

    /// One noising step: `sqrt(alpha_t) * y_prev + sqrt(1 - alpha_t) * eps`.
    pub fn forward_step<D: Dimension>(
        &self,
        y_prev: &Array<f64, D>,
        t: usize,
        eps: &Array<f64, D>,
    ) -> Result<Array<f64, D>> {
        self.check_t(t)?;
        mix(y_prev, eps, self.alpha[t])
    }

    /// Jump straight from `y0` to step `t`: `sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps`.
    pub fn forward_marginal<D: Dimension>(
        &self,
        y0: &Array<f64, D>,
        t: usize,
        eps: &Array<f64, D>,
    ) -> Result<Array<f64, D>> {
        self.check_t(t)?;
        mix(y0, eps, self.alpha_bar[t])
    }
}

fn mix<D: Dimension>(signal: &Array<f64, D>, eps: &Array<f64, D>, keep: f64) -> Result<Array<f64, D>> {
    if signal.shape() != eps.shape() {
        return Err(Error::shape(signal.shape(), eps.shape()));
    }
    let (a, b) = (keep.sqrt(), (1.0 - keep).sqrt());
    Ok(Zip::from(signal).and(eps).map_collect(|&y, &e| a * y + b * e))
}
