//! A small untrained attention denoiser with seeded fixed weights.
//!
//! Frames are cut into `patch x patch` tokens, projected to queries, keys and
//! values, mixed across frames by the configured attention mode, and mapped
//! back to pixels as a bounded clean-frame guess `x0_hat = tanh(.)`. The
//! noise estimate follows as `(x_t - sqrt(abar) x0_hat) / sqrt(1 - abar)`.

use serde::{Deserialize, Serialize};

use super::{BetaSchedule, EpsPredictor};
use crate::attention::{multi_head, project, AttentionMode, AttnFrames, MomentumSchedule};
use crate::error::{Error, Result};
use crate::numerics::{randn, RngState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyAttentionSpec {
    /// Seed for every projection weight.
    pub seed: u64,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub attention: AttentionMode,
    /// Momentum per frame, or one value for all frames. Required for
    /// temporal momentum attention.
    pub mus: Option<Vec<f64>>,
    pub cond_label: Option<String>,
}

impl Default for ToyAttentionSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            patch: 8,
            width: 32,
            heads: 2,
            attention: AttentionMode::TemporalMomentum,
            mus: None,
            cond_label: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyAttentionDenoiser {
    spec: ToyAttentionSpec,
    channels: usize,
    height: usize,
    width: usize,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

fn seeded_matrix(seed: u64, stream: u64, rows: usize, cols: usize) -> Result<Tensor> {
    let scale = 1.0 / (rows as f32).sqrt();
    Ok(randn(&mut RngState::with_stream(seed, stream), &[rows, cols])?.map(|x| x * scale))
}

impl ToyAttentionDenoiser {
    /// Builds weights for frames of `frame_shape`, `[H, W]` or `[C, H, W]`.
    pub fn new(spec: ToyAttentionSpec, frame_shape: &[usize]) -> Result<Self> {
        let (channels, height, width) = match *frame_shape {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::invalid(format!(
                    "toy attention denoiser needs [H, W] or [C, H, W] frames, got {frame_shape:?}"
                )))
            }
        };
        let p = spec.patch;
        if p == 0 || height % p != 0 || width % p != 0 {
            return Err(Error::invalid(format!(
                "patch {p} does not tile a {height}x{width} frame"
            )));
        }
        if spec.width == 0 || spec.heads == 0 || !spec.width.is_multiple_of(spec.heads) {
            return Err(Error::invalid(format!(
                "width {} is not divisible into {} heads",
                spec.width, spec.heads
            )));
        }
        if spec.attention == AttentionMode::TemporalMomentum
            && spec.mus.as_ref().is_none_or(|m| m.is_empty())
        {
            return Err(Error::invalid(
                "temporal momentum attention needs a momentum schedule",
            ));
        }
        if let Some(mus) = &spec.mus {
            MomentumSchedule::new(mus.clone())?;
        }
        let d_in = channels * p * p;
        let seed = spec.seed;
        Ok(Self {
            wq: seeded_matrix(seed, 0, d_in, spec.width)?,
            wk: seeded_matrix(seed, 1, d_in, spec.width)?,
            wv: seeded_matrix(seed, 2, d_in, spec.width)?,
            wo: seeded_matrix(seed, 3, spec.width, d_in)?,
            spec,
            channels,
            height,
            width,
        })
    }

    fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn tokens(&self) -> usize {
        (self.height / self.spec.patch) * (self.width / self.spec.patch)
    }

    fn d_in(&self) -> usize {
        self.channels * self.spec.patch * self.spec.patch
    }

    /// Maps pixel index `(c, y, x)` to `(token, feature)`.
    fn patch_index(&self, c: usize, y: usize, x: usize) -> (usize, usize) {
        let p = self.spec.patch;
        let token = (y / p) * (self.width / p) + x / p;
        let feature = (c * p + y % p) * p + x % p;
        (token, feature)
    }

    fn patchify(&self, x: &Tensor, m: usize) -> Result<Tensor> {
        let (tokens, d) = (self.tokens(), self.d_in());
        let mut out = vec![0.0f32; m * tokens * d];
        for f in 0..m {
            let src = x.row(f);
            for c in 0..self.channels {
                for y in 0..self.height {
                    for xx in 0..self.width {
                        let (t, k) = self.patch_index(c, y, xx);
                        out[(f * tokens + t) * d + k] =
                            src[(c * self.height + y) * self.width + xx];
                    }
                }
            }
        }
        Tensor::new(vec![m, tokens, d], out)
    }

    fn unpatchify(&self, tok: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let (tokens, d, m) = (self.tokens(), self.d_in(), tok.leading());
        let mut out = vec![0.0f32; m * self.frame_len()];
        for f in 0..m {
            let dst = &mut out[f * self.frame_len()..(f + 1) * self.frame_len()];
            for c in 0..self.channels {
                for y in 0..self.height {
                    for xx in 0..self.width {
                        let (t, k) = self.patch_index(c, y, xx);
                        dst[(c * self.height + y) * self.width + xx] =
                            tok.data()[(f * tokens + t) * d + k];
                    }
                }
            }
        }
        Tensor::new(shape.to_vec(), out)
    }

    fn schedule_for(&self, m: usize) -> Result<Option<MomentumSchedule>> {
        match &self.spec.mus {
            None => Ok(None),
            Some(mus) if mus.len() == 1 => MomentumSchedule::constant(m, mus[0]).map(Some),
            Some(mus) if mus.len() == m => MomentumSchedule::new(mus.clone()).map(Some),
            Some(mus) => Err(Error::invalid(format!(
                "momentum schedule has {} entries for {m} frames",
                mus.len()
            ))),
        }
    }

    /// Bounded clean-frame estimate `tanh(W_o . attention(x_t))` per frame.
    pub fn predict_x0(&self, x_t: &Tensor) -> Result<Tensor> {
        if x_t.rank() < 2 || x_t.len() / x_t.leading() != self.frame_len() {
            return Err(Error::invalid(format!(
                "input {:?} is not a stack of {}x{}x{} frames",
                x_t.shape(),
                self.channels,
                self.height,
                self.width
            )));
        }
        let m = x_t.leading();
        let tokens = self.patchify(x_t, m)?;
        let frames = AttnFrames::new(
            project(&tokens, &self.wq)?,
            project(&tokens, &self.wk)?,
            project(&tokens, &self.wv)?,
        )?;
        let mus = self.schedule_for(m)?;
        let mixed = multi_head(
            &frames,
            self.spec.heads,
            self.spec.attention,
            mus.as_ref(),
            None,
        )?;
        let out = project(&mixed, &self.wo)?.map(f32::tanh);
        self.unpatchify(&out, x_t.shape())
    }
}

impl EpsPredictor for ToyAttentionDenoiser {
    fn predict(&self, x_t: &Tensor, t: usize, sched: &BetaSchedule) -> Result<Tensor> {
        let ab = sched.alpha_bar(t)?;
        if ab >= 1.0 {
            return Err(Error::invalid(
                "noise prediction is undefined at alpha_bar = 1",
            ));
        }
        let x0 = self.predict_x0(x_t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_with(&x0, |x, p| ((f64::from(x) - sa * f64::from(p)) / sn) as f32)
    }
}
