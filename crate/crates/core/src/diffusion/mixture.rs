//! Exact noise prediction for isotropic Gaussian-mixture data.
//!
//! For `x_0 ~ sum_k w_k N(mu_k, s_k^2 I)` the forward marginal is itself a
//! mixture, so `E[x_0 | x_t]` has a closed form and
//! `eps = (x_t - sqrt(abar) E[x_0 | x_t]) / sqrt(1 - abar)` is the
//! minimum-MSE noise estimate.

use serde::{Deserialize, Serialize};

use super::{BetaSchedule, EpsPredictor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub std: f64,
    /// Either one value (broadcast) or one value per element.
    pub mean: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureModel {
    pub shape: Vec<usize>,
    pub components: Vec<MixtureComponent>,
}

impl MixtureModel {
    pub fn single(mean: Tensor, std: f64) -> Self {
        Self {
            shape: mean.shape().to_vec(),
            components: vec![MixtureComponent {
                weight: 1.0,
                std,
                mean: mean.into_data(),
            }],
        }
    }

    /// Two equally weighted smooth patterns (a horizontal and a vertical
    /// cosine) with std 0.2, a stand-in "dataset" for any frame shape.
    pub fn two_patterns(shape: &[usize]) -> Result<Self> {
        let width = *shape.last().expect("non-empty shape");
        let height = if shape.len() >= 2 {
            shape[shape.len() - 2]
        } else {
            1
        };
        let wave = |pos: usize, len: usize| {
            (std::f64::consts::PI * (pos as f64 + 0.5) / len as f64).cos() as f32
        };
        let a = Tensor::from_fn(shape, |i| wave(i % width, width))?;
        let b = Tensor::from_fn(shape, |i| wave((i / width) % height, height))?;
        Ok(Self {
            shape: shape.to_vec(),
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    std: 0.2,
                    mean: a.into_data(),
                },
                MixtureComponent {
                    weight: 0.5,
                    std: 0.2,
                    mean: b.into_data(),
                },
            ],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if self.shape.is_empty() || n == 0 {
            return Err(Error::invalid(format!(
                "bad mixture shape {:?}",
                self.shape
            )));
        }
        if self.components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.weight.is_nan() || c.weight < 0.0 {
                return Err(Error::invalid(format!("component {k} has negative weight")));
            }
            if !(c.std >= 0.0 && c.std.is_finite()) {
                return Err(Error::invalid(format!(
                    "component {k} has invalid std {}",
                    c.std
                )));
            }
            if c.mean.len() != 1 && c.mean.len() != n {
                return Err(Error::invalid(format!(
                    "component {k} mean has {} values; expected 1 or {n}",
                    c.mean.len()
                )));
            }
        }
        Ok(())
    }

    fn mean_at(c: &MixtureComponent, i: usize) -> f64 {
        f64::from(if c.mean.len() == 1 {
            c.mean[0]
        } else {
            c.mean[i]
        })
    }

    /// Posterior mean `E[x_0 | x_t]` for one frame.
    pub fn posterior_mean(&self, x_t: &[f32], alpha_bar: f64) -> Result<Vec<f64>> {
        let d = x_t.len();
        let sa = alpha_bar.sqrt();
        let vars: Vec<f64> = self
            .components
            .iter()
            .map(|c| alpha_bar * c.std * c.std + (1.0 - alpha_bar))
            .collect();
        let logits: Vec<f64> = self
            .components
            .iter()
            .zip(&vars)
            .map(|(c, &v)| {
                let sq: f64 = x_t
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| (f64::from(x) - sa * Self::mean_at(c, i)).powi(2))
                    .sum();
                c.weight.ln() - 0.5 * d as f64 * v.ln() - sq / (2.0 * v)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NumericalDegeneracy(
                "every mixture responsibility underflowed".into(),
            ));
        }
        let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();

        let mut post = vec![0.0f64; d];
        for ((c, &v), &u) in self.components.iter().zip(&vars).zip(&unnorm) {
            let r = u / z;
            if r == 0.0 {
                continue;
            }
            let gain = sa * c.std * c.std / v;
            for (i, (p, &x)) in post.iter_mut().zip(x_t).enumerate() {
                let m = Self::mean_at(c, i);
                *p += r * (m + gain * (f64::from(x) - sa * m));
            }
        }
        Ok(post)
    }
}

/// Applies the exact mixture predictor to each frame of the input.
#[derive(Clone, Debug)]
pub struct MixturePredictor {
    mixture: MixtureModel,
}

impl MixturePredictor {
    pub fn new(mixture: MixtureModel) -> Result<Self> {
        mixture.validate()?;
        Ok(Self { mixture })
    }
}

/// `eps_hat` for a single frame `x_t` (shaped like the mixture means).
pub fn mixture_eps_predictor(
    mix: &MixtureModel,
    x_t: &Tensor,
    t: usize,
    sched: &BetaSchedule,
) -> Result<Tensor> {
    mix.validate()?;
    if x_t.shape() != mix.shape.as_slice() {
        return Err(Error::invalid(format!(
            "input {:?} does not match mixture shape {:?}",
            x_t.shape(),
            mix.shape
        )));
    }
    let ab = sched.alpha_bar(t)?;
    frame_eps(mix, x_t.data(), ab).and_then(|d| Tensor::from_f64(x_t.shape().to_vec(), &d))
}

fn frame_eps(mix: &MixtureModel, x: &[f32], alpha_bar: f64) -> Result<Vec<f64>> {
    if alpha_bar >= 1.0 {
        return Err(Error::invalid(
            "noise prediction is undefined at alpha_bar = 1",
        ));
    }
    let post = mix.posterior_mean(x, alpha_bar)?;
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x.iter()
        .zip(post)
        .map(|(&xi, p)| (f64::from(xi) - sa * p) / sn)
        .collect())
}

impl EpsPredictor for MixturePredictor {
    fn predict(&self, x_t: &Tensor, t: usize, sched: &BetaSchedule) -> Result<Tensor> {
        let frame_len: usize = self.mixture.shape.iter().product();
        if x_t.rank() < 2 || x_t.inner_shape() != self.mixture.shape {
            return Err(Error::invalid(format!(
                "input {:?} is not a stack of {:?} frames",
                x_t.shape(),
                self.mixture.shape
            )));
        }
        let ab = sched.alpha_bar(t)?;
        let mut data = Vec::with_capacity(x_t.len());
        for i in 0..x_t.leading() {
            let eps = frame_eps(
                &self.mixture,
                &x_t.data()[i * frame_len..(i + 1) * frame_len],
                ab,
            )?;
            data.extend(eps.into_iter().map(|e| e as f32));
        }
        Tensor::new(x_t.shape().to_vec(), data)
    }
}
