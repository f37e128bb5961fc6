//! Diffusion noise schedule.
//!
//! Step indices are 1-based (`t = 1..=T`); `alpha_bar(0)` is defined as 1 so
//! that the posterior variance at `t = 1` is exactly zero.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 500;

/// Parameters that fully determine a linear schedule; this is what gets
/// serialized into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule with `beta_1 = beta_start` and `beta_T = beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(
            ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            beta,
        ))
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::linear(p.steps, p.beta_start, p.beta_end)
    }

    fn from_betas(params: ScheduleParams, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde: Vec<f64> = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                // never above beta, even once alpha_bar rounds toward 0
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).min(beta[i])
            })
            .collect();
        let sigma = beta_tilde.iter().map(|b| b.sqrt()).collect();
        NoiseSchedule {
            params,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
            sigma,
        }
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    // Accessors panic on an out-of-range step; callers validate with
    // `check_step` at their API boundary.

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Signal and noise scales `(sqrt(alpha_bar), sqrt(1 - alpha_bar))`.
    pub fn signal_noise(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        Ok(ab / (1.0 - ab))
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}
