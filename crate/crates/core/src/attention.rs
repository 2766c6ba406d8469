//! Frame-wise attention variants for video denoising.
//!
//! All three modes compute `softmax(Q^i K^T / sqrt(c)) V` per frame `i` and
//! differ only in where keys and values come from:
//!
//! * self-attention: frame `i`'s own `K^i`, `V^i`;
//! * cross-frame attention: the first frame's `K^1`, `V^1`;
//! * temporal momentum attention: exponential moving averages
//!   `K_acc^i = mu_i * K_acc^(i-1) + (1 - mu_i) * K^i` with `K_acc^1 = K^1`
//!   (same for values).
//!
//! The moving averages can also be formed in one product with an upper
//! triangular matrix of `mu` powers (`tma_matrix`), which requires constant
//! `mu`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-frame query, key and value features, each `[m, tokens, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnFrames {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttnFrames {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        if q.rank() != 3 {
            return Err(Error::invalid(format!(
                "attention features must be [m, tokens, c], got {:?}",
                q.shape()
            )));
        }
        q.same_shape(&k)?;
        q.same_shape(&v)?;
        Ok(Self { q, k, v })
    }

    pub fn frames(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.q.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[serde(alias = "sa")]
    SelfAttention,
    #[serde(alias = "cfa")]
    CrossFrame,
    #[serde(alias = "tma")]
    TemporalMomentum,
}

/// Momentum `mu_i` per frame; `mu_1` is never read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MomentumSchedule(Vec<f64>);

impl MomentumSchedule {
    pub fn new(mus: Vec<f64>) -> Result<Self> {
        if let Some(bad) = mus.iter().find(|mu| !(0.0..=1.0).contains(*mu)) {
            return Err(Error::invalid(format!("momentum {bad} outside [0, 1]")));
        }
        Ok(Self(mus))
    }

    pub fn constant(m: usize, mu: f64) -> Result<Self> {
        Self::new(vec![mu; m])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The shared value when every entry after the first agrees.
    pub fn as_constant(&self) -> Option<f64> {
        let tail = self.0.get(1..)?;
        match tail.first() {
            None => self.0.first().copied(),
            Some(&mu) => tail.iter().all(|&x| x == mu).then_some(mu),
        }
    }
}

impl TryFrom<Vec<f64>> for MomentumSchedule {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MomentumSchedule> for Vec<f64> {
    fn from(s: MomentumSchedule) -> Vec<f64> {
        s.0
    }
}

/// Running key/value accumulators of the momentum recurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct TmaState {
    pub k_acc: Tensor,
    pub v_acc: Tensor,
}

impl TmaState {
    pub fn start(k1: Tensor, v1: Tensor) -> Self {
        Self {
            k_acc: k1,
            v_acc: v1,
        }
    }

    pub fn update(&mut self, k: &Tensor, v: &Tensor, mu: f64) -> Result<()> {
        let mu = mu as f32;
        let rest = 1.0 - mu;
        self.k_acc = self.k_acc.zip_with(k, |acc, x| mu * acc + rest * x)?;
        self.v_acc = self.v_acc.zip_with(v, |acc, x| mu * acc + rest * x)?;
        Ok(())
    }
}

/// Upper triangular `U[j][k] = mu^(k - j)`, with entries below
/// `truncation_threshold` zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffMatrix {
    pub u: Tensor,
    pub mu: f64,
    pub truncation_threshold: f64,
}

impl CoeffMatrix {
    pub fn size(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn get(&self, j: usize, k: usize) -> f32 {
        self.u.data()[j * self.size() + k]
    }
}

pub fn tma_coeff_matrix(m: usize, mu: f64, truncation_threshold: f64) -> Result<CoeffMatrix> {
    if m < 1 {
        return Err(Error::invalid("m must be at least 1"));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(format!("momentum {mu} outside [0, 1]")));
    }
    if truncation_threshold.is_nan() || truncation_threshold < 0.0 {
        return Err(Error::invalid("truncation threshold must be >= 0"));
    }
    let u = Tensor::from_fn(&[m, m], |idx| {
        let (j, k) = (idx / m, idx % m);
        if k < j {
            return 0.0;
        }
        let w = mu.powi((k - j) as i32);
        if w < truncation_threshold {
            0.0
        } else {
            w as f32
        }
    })?;
    Ok(CoeffMatrix {
        u,
        mu,
        truncation_threshold,
    })
}

/// Row-wise stable softmax of `logits` (`rows x cols`), in place.
fn softmax_rows(logits: &mut [f32], cols: usize) {
    for row in logits.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Attention weights for one frame and one head: `softmax(q k^T / sqrt(width))`.
///
/// `q`, `k` are `tokens x stride` row-major; the head reads channels
/// `offset..offset + width`.
fn head_weights(
    q: &[f32],
    k: &[f32],
    tokens: usize,
    stride: usize,
    offset: usize,
    width: usize,
) -> Vec<f32> {
    let scale = 1.0 / (width as f32).sqrt();
    let mut logits = vec![0.0f32; tokens * tokens];
    for a in 0..tokens {
        let qa = &q[a * stride + offset..a * stride + offset + width];
        for b in 0..tokens {
            let kb = &k[b * stride + offset..b * stride + offset + width];
            let dot: f32 = qa.iter().zip(kb).map(|(x, y)| x * y).sum();
            logits[a * tokens + b] = dot * scale;
        }
    }
    softmax_rows(&mut logits, tokens);
    logits
}

/// Writes `weights @ v[:, offset..offset + width]` into the same channels of `out`.
fn apply_head(
    weights: &[f32],
    v: &[f32],
    out: &mut [f32],
    tokens: usize,
    stride: usize,
    offset: usize,
    width: usize,
) {
    for a in 0..tokens {
        let row = &weights[a * tokens..(a + 1) * tokens];
        for ch in 0..width {
            let mut acc = 0.0f32;
            for (b, &w) in row.iter().enumerate() {
                acc += w * v[b * stride + offset + ch];
            }
            out[a * stride + offset + ch] = acc;
        }
    }
}

/// Multi-head attention of one frame's queries against given keys/values.
fn attend(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    tokens: usize,
    channels: usize,
    heads: usize,
) -> Vec<f32> {
    let width = channels / heads;
    let mut out = vec![0.0f32; tokens * channels];
    for h in 0..heads {
        let w = head_weights(q, k, tokens, channels, h * width, width);
        apply_head(&w, v, &mut out, tokens, channels, h * width, width);
    }
    out
}

/// Key/value sources per frame: `kv[i]` holds `(K, V)` attended by frame `i`.
fn attend_frames(frames: &AttnFrames, kv: &[(&[f32], &[f32])], heads: usize) -> Result<Tensor> {
    let (m, tokens, c) = (frames.frames(), frames.tokens(), frames.channels());
    check_heads(c, heads)?;
    let mut data = Vec::with_capacity(m * tokens * c);
    for (i, (k, v)) in kv.iter().enumerate() {
        data.extend(attend(frames.q.row(i), k, v, tokens, c, heads));
    }
    Tensor::new(vec![m, tokens, c], data)
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if c == 0 {
        return Err(Error::invalid("channel width must be positive"));
    }
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "{c} channels are not divisible into {heads} heads"
        )));
    }
    Ok(())
}

fn check_schedule(frames: &AttnFrames, mus: &MomentumSchedule) -> Result<()> {
    if mus.len() != frames.frames() {
        return Err(Error::invalid(format!(
            "momentum schedule has {} entries for {} frames",
            mus.len(),
            frames.frames()
        )));
    }
    Ok(())
}

/// Recurrent momentum accumulators, `[m, tokens, c]` each.
pub fn momentum_accumulators(
    frames: &AttnFrames,
    mus: &MomentumSchedule,
) -> Result<(Tensor, Tensor)> {
    check_schedule(frames, mus)?;
    let ks = frames.k.unstack();
    let vs = frames.v.unstack();
    let mut state = TmaState::start(ks[0].clone(), vs[0].clone());
    let mut k_out = vec![state.k_acc.clone()];
    let mut v_out = vec![state.v_acc.clone()];
    for i in 1..frames.frames() {
        state.update(&ks[i], &vs[i], mus.values()[i])?;
        k_out.push(state.k_acc.clone());
        v_out.push(state.v_acc.clone());
    }
    Ok((Tensor::stack(&k_out)?, Tensor::stack(&v_out)?))
}

/// Accumulators from `[K^1, (1 - mu) K^2, ..., (1 - mu) K^m] U`.
pub fn momentum_accumulators_matrix(
    frames: &AttnFrames,
    coeff: &CoeffMatrix,
) -> Result<(Tensor, Tensor)> {
    let m = frames.frames();
    if coeff.size() != m {
        return Err(Error::invalid(format!(
            "coefficient matrix is {0}x{0} for {m} frames",
            coeff.size()
        )));
    }
    let rest = 1.0 - coeff.mu as f32;
    let combine = |x: &Tensor| -> Result<Tensor> {
        let inner = x.len() / m;
        let scaled: Vec<Vec<f32>> = (0..m)
            .map(|j| {
                let s = if j == 0 { 1.0 } else { rest };
                x.row(j).iter().map(|v| s * v).collect()
            })
            .collect();
        let mut out = vec![0.0f32; x.len()];
        for k in 0..m {
            let dst = &mut out[k * inner..(k + 1) * inner];
            for (j, src) in scaled.iter().enumerate().take(k + 1) {
                let w = coeff.get(j, k);
                if w == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    };
    Ok((combine(&frames.k)?, combine(&frames.v)?))
}

pub fn self_attention(frames: &AttnFrames) -> Result<Tensor> {
    multi_head(frames, 1, AttentionMode::SelfAttention, None, None)
}

pub fn cross_frame_attention(frames: &AttnFrames) -> Result<Tensor> {
    multi_head(frames, 1, AttentionMode::CrossFrame, None, None)
}

pub fn tma_recurrent(frames: &AttnFrames, mus: &MomentumSchedule) -> Result<Tensor> {
    multi_head(frames, 1, AttentionMode::TemporalMomentum, Some(mus), None)
}

/// Momentum attention with accumulators from the coefficient matrix.
pub fn tma_matrix(frames: &AttnFrames, mu: f64, truncation_threshold: f64) -> Result<Tensor> {
    tma_matrix_heads(frames, 1, mu, truncation_threshold)
}

pub fn tma_matrix_heads(
    frames: &AttnFrames,
    heads: usize,
    mu: f64,
    truncation_threshold: f64,
) -> Result<Tensor> {
    let coeff = tma_coeff_matrix(frames.frames(), mu, truncation_threshold)?;
    let (k_acc, v_acc) = momentum_accumulators_matrix(frames, &coeff)?;
    let kv: Vec<_> = (0..frames.frames())
        .map(|i| (k_acc.row(i), v_acc.row(i)))
        .collect();
    attend_frames(frames, &kv, heads)
}

/// Splits channels into `heads` equal groups, attends per head in the chosen
/// mode and concatenates. `output`, when given, is a `[c, c]` projection
/// applied to the concatenation; `None` means identity.
pub fn multi_head(
    frames: &AttnFrames,
    heads: usize,
    mode: AttentionMode,
    mus: Option<&MomentumSchedule>,
    output: Option<&Tensor>,
) -> Result<Tensor> {
    check_heads(frames.channels(), heads)?;
    let m = frames.frames();
    let out = match mode {
        AttentionMode::SelfAttention => {
            let kv: Vec<_> = (0..m).map(|i| (frames.k.row(i), frames.v.row(i))).collect();
            attend_frames(frames, &kv, heads)?
        }
        AttentionMode::CrossFrame => {
            let kv: Vec<_> = (0..m).map(|_| (frames.k.row(0), frames.v.row(0))).collect();
            attend_frames(frames, &kv, heads)?
        }
        AttentionMode::TemporalMomentum => {
            let mus = mus.ok_or_else(|| {
                Error::invalid("temporal momentum attention needs a momentum schedule")
            })?;
            let (k_acc, v_acc) = momentum_accumulators(frames, mus)?;
            let kv: Vec<_> = (0..m).map(|i| (k_acc.row(i), v_acc.row(i))).collect();
            attend_frames(frames, &kv, heads)?
        }
    };
    match output {
        None => Ok(out),
        Some(w) => project(&out, w),
    }
}

/// Applies a `[c_in, c_out]` matrix to the last axis of `x`.
pub fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let c_in = *x.shape().last().expect("tensors have rank >= 1");
    if w.rank() != 2 || w.shape()[0] != c_in {
        return Err(Error::invalid(format!(
            "projection {:?} does not accept {c_in} channels",
            w.shape()
        )));
    }
    let c_out = w.shape()[1];
    let rows = x.len() / c_in;
    let mut data = vec![0.0f32; rows * c_out];
    for r in 0..rows {
        let src = &x.data()[r * c_in..(r + 1) * c_in];
        let dst = &mut data[r * c_out..(r + 1) * c_out];
        for (i, &s) in src.iter().enumerate() {
            let wrow = &w.data()[i * c_out..(i + 1) * c_out];
            for (d, &wv) in dst.iter_mut().zip(wrow) {
                *d += s * wv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = c_out;
    Tensor::new(shape, data)
}

/// Softmax weights `[m, tokens, tokens]` each mode uses (single head).
pub fn attention_weights(
    frames: &AttnFrames,
    mode: AttentionMode,
    mus: Option<&MomentumSchedule>,
) -> Result<Tensor> {
    let (m, tokens, c) = (frames.frames(), frames.tokens(), frames.channels());
    check_heads(c, 1)?;
    let accs;
    let keys: Vec<&[f32]> = match mode {
        AttentionMode::SelfAttention => (0..m).map(|i| frames.k.row(i)).collect(),
        AttentionMode::CrossFrame => (0..m).map(|_| frames.k.row(0)).collect(),
        AttentionMode::TemporalMomentum => {
            let mus = mus.ok_or_else(|| {
                Error::invalid("temporal momentum attention needs a momentum schedule")
            })?;
            accs = momentum_accumulators(frames, mus)?;
            (0..m).map(|i| accs.0.row(i)).collect()
        }
    };
    let mut data = Vec::with_capacity(m * tokens * tokens);
    for (i, k) in keys.iter().enumerate() {
        data.extend(head_weights(frames.q.row(i), k, tokens, c, 0, c));
    }
    Tensor::new(vec![m, tokens, tokens], data)
}

/// Equivalence checks between the attention realizations on one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnReport {
    pub frames: usize,
    pub tokens: usize,
    pub channels: usize,
    pub mu: f64,
    pub truncation_threshold: f64,
    /// max |tma_matrix - tma_recurrent| with no truncation.
    pub max_delta_matrix_vs_recurrent: f64,
    pub matrix_tolerance: f64,
    /// max |accumulator| difference between truncated and exact matrices.
    pub max_delta_truncated_accumulators: f64,
    /// `threshold * sum_j max |K^j|` (keys and values, whichever is larger).
    pub truncation_bound: f64,
    pub tma_mu1_equals_cfa: bool,
    pub tma_mu0_equals_sa: bool,
    pub pass: bool,
}

/// Tolerance for matrix vs recurrent momentum attention in `f32`.
pub const MATRIX_RECURRENT_TOLERANCE: f64 = 1e-5;

pub fn equivalence_report(
    frames: &AttnFrames,
    mu: f64,
    truncation_threshold: f64,
) -> Result<AttnReport> {
    let m = frames.frames();
    let mus = MomentumSchedule::constant(m, mu)?;
    let recurrent = tma_recurrent(frames, &mus)?;
    let matrix = tma_matrix(frames, mu, 0.0)?;
    let delta = f64::from(matrix.max_abs_diff(&recurrent)?);

    let exact = momentum_accumulators_matrix(frames, &tma_coeff_matrix(m, mu, 0.0)?)?;
    let cut =
        momentum_accumulators_matrix(frames, &tma_coeff_matrix(m, mu, truncation_threshold)?)?;
    let trunc_delta = f64::from(
        exact
            .0
            .max_abs_diff(&cut.0)?
            .max(exact.1.max_abs_diff(&cut.1)?),
    );
    let sum_max = |x: &Tensor| -> f64 { x.unstack().iter().map(|t| f64::from(t.max_abs())).sum() };
    let bound = truncation_threshold * sum_max(&frames.k).max(sum_max(&frames.v));

    let ones = MomentumSchedule::constant(m, 1.0)?;
    let zeros = MomentumSchedule::constant(m, 0.0)?;
    let mu1 = tma_recurrent(frames, &ones)? == cross_frame_attention(frames)?;
    let mu0 = tma_recurrent(frames, &zeros)? == self_attention(frames)?;

    // Rounding of the truncated sum can add an ulp-scale term on top of the bound.
    let slack = 1e-6 * f64::from(exact.0.max_abs().max(exact.1.max_abs()));
    Ok(AttnReport {
        frames: m,
        tokens: frames.tokens(),
        channels: frames.channels(),
        mu,
        truncation_threshold,
        max_delta_matrix_vs_recurrent: delta,
        matrix_tolerance: MATRIX_RECURRENT_TOLERANCE,
        max_delta_truncated_accumulators: trunc_delta,
        truncation_bound: bound,
        tma_mu1_equals_cfa: mu1,
        tma_mu0_equals_sa: mu0,
        pass: delta <= MATRIX_RECURRENT_TOLERANCE && trunc_delta <= bound + slack && mu1 && mu0,
    })
}
