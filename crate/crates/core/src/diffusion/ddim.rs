use serde::{Deserialize, Serialize};

use super::BetaSchedule;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A noise predictor `eps_theta(x_t, t)`.
///
/// `x_t` carries frames along its leading axis; implementations may couple
/// frames (attention) or treat them independently.
pub trait EpsPredictor: Send + Sync {
    fn predict(&self, x_t: &Tensor, t: usize, sched: &BetaSchedule) -> Result<Tensor>;
}

impl<P: EpsPredictor + ?Sized> EpsPredictor for Box<P> {
    fn predict(&self, x_t: &Tensor, t: usize, sched: &BetaSchedule) -> Result<Tensor> {
        (**self).predict(x_t, t, sched)
    }
}

/// `sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
pub fn forward_update(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    x0.lincomb(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// Closed-form forward marginal `q(x_t | x_0)`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &BetaSchedule,
) -> Result<Tensor> {
    if t < 1 {
        return Err(Error::invalid("forward_diffuse needs t >= 1"));
    }
    forward_update(x0, eps, sched.alpha_bar(t)?)
}

/// Result of one deterministic update.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimStep {
    pub prev: Tensor,
    pub pred_x0: Tensor,
}

/// One `eta = 0` update between cumulative levels `alpha_bar` and
/// `alpha_bar_prev`.
pub fn ddim_update(
    x_t: &Tensor,
    eps: &Tensor,
    alpha_bar: f64,
    alpha_bar_prev: f64,
) -> Result<DdimStep> {
    x_t.same_shape(eps)?;
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0 && alpha_bar_prev > 0.0 && alpha_bar_prev <= 1.0) {
        return Err(Error::invalid(format!(
            "alpha_bar values must lie in (0, 1], got {alpha_bar}, {alpha_bar_prev}"
        )));
    }
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let pred_x0 = x_t.zip_with(eps, |x, e| ((f64::from(x) - sn * f64::from(e)) / sa) as f32)?;
    if alpha_bar_prev == alpha_bar {
        return Ok(DdimStep {
            prev: x_t.clone(),
            pred_x0,
        });
    }
    let (pa, pn) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let prev = x_t.zip_with(eps, |x, e| {
        let (x, e) = (f64::from(x), f64::from(e));
        (pa * ((x - sn * e) / sa) + pn * e) as f32
    })?;
    Ok(DdimStep { prev, pred_x0 })
}

/// Deterministic DDIM step from `t` to `t_prev` (`alpha_bar_0 = 1`).
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &BetaSchedule,
) -> Result<DdimStep> {
    if t <= t_prev {
        return Err(Error::invalid(format!(
            "DDIM steps backward in time: t = {t}, t_prev = {t_prev}"
        )));
    }
    ddim_update(x_t, eps_pred, sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?)
}

/// Timesteps visited by the sampler, strictly decreasing from `T`. The final
/// step always lands on `t = 0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdimConfig {
    pub timesteps: Vec<usize>,
}

impl DdimConfig {
    /// `steps` timesteps `T, T - s, T - 2s, ...` with stride `s = T / steps`.
    pub fn uniform(total: usize, steps: usize) -> Result<Self> {
        if steps < 1 || steps > total {
            return Err(Error::invalid(format!(
                "need 1 <= steps <= T, got {steps} steps for T = {total}"
            )));
        }
        let stride = total / steps;
        Ok(Self {
            timesteps: (0..steps).map(|k| total - k * stride).collect(),
        })
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn validate(&self, sched: &BetaSchedule) -> Result<()> {
        let first = *self
            .timesteps
            .first()
            .ok_or_else(|| Error::invalid("DDIM needs at least one timestep"))?;
        if first != sched.len() {
            return Err(Error::invalid(format!(
                "DDIM must start at T = {}, starts at {first}",
                sched.len()
            )));
        }
        if !self.timesteps.windows(2).all(|w| w[1] < w[0]) {
            return Err(Error::invalid("DDIM timesteps must strictly decrease"));
        }
        if *self.timesteps.last().expect("non-empty") < 1 {
            return Err(Error::invalid("DDIM timesteps must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub x0: Tensor,
    /// `x_T` followed by the state after every step, when requested.
    pub trajectory: Option<Vec<Tensor>>,
}

pub fn ddim_sample(
    denoiser: &dyn EpsPredictor,
    x_t: &Tensor,
    cfg: &DdimConfig,
    sched: &BetaSchedule,
    keep_trajectory: bool,
) -> Result<Sampled> {
    cfg.validate(sched)?;
    x_t.ensure_finite("initial noise")?;
    let mut x = x_t.clone();
    let mut trajectory = keep_trajectory.then(|| vec![x.clone()]);
    for (idx, &t) in cfg.timesteps.iter().enumerate() {
        let t_prev = cfg.timesteps.get(idx + 1).copied().unwrap_or(0);
        let eps = denoiser.predict(&x, t, sched)?;
        if eps.shape() != x.shape() {
            return Err(Error::ContractViolation(format!(
                "denoiser returned {:?} for input {:?} at t = {t}",
                eps.shape(),
                x.shape()
            )));
        }
        eps.ensure_finite("denoiser output")?;
        x = ddim_step(&x, &eps, t, t_prev, sched)?.prev;
        x.ensure_finite("DDIM state")?;
        if let Some(traj) = trajectory.as_mut() {
            traj.push(x.clone());
        }
    }
    Ok(Sampled { x0: x, trajectory })
}
