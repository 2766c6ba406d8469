use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise levels `beta_t` for `t = 1..=T` and their cumulative products
/// `alpha_bar_t = prod_{i <= t} (1 - beta_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Parameters of a linear schedule, as stored in configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSchedule {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for LinearSchedule {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl LinearSchedule {
    pub fn build(&self) -> Result<BetaSchedule> {
        linear_beta_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

pub fn linear_beta_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<BetaSchedule> {
    if timesteps < 1 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        (0..timesteps)
            .map(|i| beta_start + step * i as f64)
            .collect()
    };
    BetaSchedule::from_betas(betas)
}

impl BetaSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0f64, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::invalid(format!(
                "timestep {t} outside 0..={}",
                self.len()
            ))),
        }
    }
}
