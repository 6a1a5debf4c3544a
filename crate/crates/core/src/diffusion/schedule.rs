use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-timestep weight `w_t` of the denoising loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossWeighting {
    /// `w_t = 1`
    #[default]
    Uniform,
    /// `w_t = min(SNR_t, γ) / SNR_t`
    MinSnr { gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub weighting: LossWeighting,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
            weighting: LossWeighting::Uniform,
        }
    }
}

/// Discrete forward-noising schedule, indexed by `t ∈ [1, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    loss_weights: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let n = cfg.num_steps;
        if n == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = if n == 1 {
            vec![cfg.beta_end]
        } else {
            (0..n)
                .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64)
                .collect()
        };
        Self::from_betas(betas, &cfg.weighting)
    }

    pub fn from_betas(betas: Vec<f64>, weighting: &LossWeighting) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta sequence".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("betas must be nondecreasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let loss_weights = match weighting {
            LossWeighting::Uniform => vec![1.0; betas.len()],
            LossWeighting::MinSnr { gamma } => {
                if !(*gamma > 0.0) {
                    return Err(Error::InvalidArgument("min-snr gamma must be > 0".into()));
                }
                alpha_bars
                    .iter()
                    .map(|ab| {
                        let snr = ab / (1.0 - ab);
                        snr.min(*gamma) / snr
                    })
                    .collect()
            }
        };
        Ok(Self {
            betas,
            alpha_bars,
            loss_weights,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn loss_weight(&self, t: usize) -> f64 {
        self.loss_weights[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}
