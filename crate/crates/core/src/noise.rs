//! Correlated noise priors for video frames.
//!
//! Two baselines (mixed and progressive) build frames as fixed linear
//! combinations of independent draws. The dependency model instead searches,
//! frame by frame, for noise whose KL divergence from the previous frame hits
//! a target `lambda`: a random search over fresh draws picks a starting
//! candidate, then a step-halving line search blends it with the previous
//! frame.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{randn, RngState, Tensor};

/// Stream offset between consecutive frames; candidate `j` of frame `a` draws
/// from stream `base + a * FRAME_STREAM_STRIDE + j`.
pub const FRAME_STREAM_STRIDE: u64 = 1 << 16;

/// One frame's noise tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFrame(Tensor);

impl NoiseFrame {
    pub fn new(eps: Tensor) -> Self {
        Self(eps)
    }

    pub fn eps(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl From<Tensor> for NoiseFrame {
    fn from(t: Tensor) -> Self {
        Self(t)
    }
}

/// Weight of the shared (or previous-frame) component, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MixCoefficient(f64);

impl MixCoefficient {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Self(alpha))
        } else {
            Err(Error::invalid(format!(
                "mix coefficient {alpha} outside [0, 1]"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for MixCoefficient {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MixCoefficient> for f64 {
    fn from(a: MixCoefficient) -> f64 {
        a.0
    }
}

/// Which argument of the categorical KL is the newer frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(P_new || P_prev)`.
    #[default]
    NewGivenPrev,
    /// `KL(P_prev || P_new)`.
    PrevGivenNew,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub random_iters: usize,
    pub linear_iters: usize,
    pub delta0: f64,
    pub min_delta: f64,
    pub kl_direction: KlDirection,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            random_iters: 10,
            linear_iters: 15,
            delta0: 0.1,
            min_delta: 1e-4,
            kl_direction: KlDirection::NewGivenPrev,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.random_iters < 1 || self.random_iters as u64 >= FRAME_STREAM_STRIDE {
            return Err(Error::invalid(format!(
                "random_iters must be in 1..{FRAME_STREAM_STRIDE}, got {}",
                self.random_iters
            )));
        }
        if self.linear_iters < 1 {
            return Err(Error::invalid("linear_iters must be at least 1"));
        }
        if !(self.delta0 > 0.0 && self.delta0 <= 1.0) {
            return Err(Error::invalid(format!(
                "delta0 must be in (0, 1], got {}",
                self.delta0
            )));
        }
        if !(self.min_delta > 0.0 && self.min_delta < self.delta0) {
            return Err(Error::invalid(format!(
                "min_delta must be in (0, delta0), got {}",
                self.min_delta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPhase {
    Random,
    Linear,
}

impl SearchPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchPhase::Random => "random",
            SearchPhase::Linear => "linear",
        }
    }
}

/// Per-iteration record of one search phase for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    /// Zero-based absolute frame index the search produced.
    pub frame: usize,
    pub phase: SearchPhase,
    /// Objective value of the point evaluated at each iteration.
    pub step_losses: Vec<f64>,
    /// Whether that point replaced the incumbent.
    pub accepted: Vec<bool>,
    /// Linear phase only: the alpha evaluated at each iteration.
    pub alphas: Vec<f64>,
    pub final_alpha: Option<f64>,
    pub final_loss: f64,
}

impl SearchTrace {
    /// Losses of the accepted points, in order.
    pub fn accepted_losses(&self) -> Vec<f64> {
        self.step_losses
            .iter()
            .zip(&self.accepted)
            .filter(|(_, &a)| a)
            .map(|(&l, _)| l)
            .collect()
    }

    /// Incumbent loss after each iteration.
    pub fn best_so_far(&self, initial: f64) -> Vec<f64> {
        let mut best = initial;
        self.step_losses
            .iter()
            .zip(&self.accepted)
            .map(|(&l, &a)| {
                if a {
                    best = l;
                }
                best
            })
            .collect()
    }
}

/// How a sequence was generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NoisePrior {
    Mixed {
        alpha: MixCoefficient,
    },
    Progressive {
        alpha: MixCoefficient,
    },
    Dependency {
        lambdas: Vec<f64>,
        search: SearchConfig,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSequence {
    pub frames: Vec<NoiseFrame>,
    pub prior: NoisePrior,
    pub traces: Vec<SearchTrace>,
}

impl NoiseSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Per-frame targets `lambda_2..lambda_m` for dependency sequences.
    pub fn lambdas(&self) -> Option<&[f64]> {
        match &self.prior {
            NoisePrior::Dependency { lambdas, .. } => Some(lambdas),
            _ => None,
        }
    }

    /// KL between each adjacent pair of frames.
    pub fn adjacent_kl(&self, direction: KlDirection) -> Result<Vec<f64>> {
        self.frames
            .windows(2)
            .map(|w| kl_directed(w[1].eps(), w[0].eps(), direction))
            .collect()
    }

    /// Frames stacked along a new leading axis.
    pub fn stacked(&self) -> Result<Tensor> {
        let frames: Vec<Tensor> = self.frames.iter().map(|f| f.eps().clone()).collect();
        Tensor::stack(&frames)
    }
}

fn log_softmax(x: &Tensor) -> Vec<f64> {
    let max = x
        .data()
        .iter()
        .map(|&v| f64::from(v))
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.data().iter().map(|&v| (f64::from(v) - max).exp()).sum();
    let lse = max + sum.ln();
    x.data().iter().map(|&v| f64::from(v) - lse).collect()
}

fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum();
    kl.max(0.0)
}

/// `KL(softmax(a) || softmax(b))` over the flattened tensors, in nats.
pub fn kl_noise(eps_a: &Tensor, eps_b: &Tensor) -> Result<f64> {
    eps_a.same_shape(eps_b)?;
    if eps_a.len() < 2 {
        return Err(Error::invalid("KL needs at least 2 elements"));
    }
    Ok(categorical_kl(&log_softmax(eps_a), &log_softmax(eps_b)))
}

pub(crate) fn kl_directed(new: &Tensor, prev: &Tensor, direction: KlDirection) -> Result<f64> {
    match direction {
        KlDirection::NewGivenPrev => kl_noise(new, prev),
        KlDirection::PrevGivenNew => kl_noise(prev, new),
    }
}

/// `(KL(P_i || P_prev) - lambda)^2`.
pub fn kl_loss(eps_i: &Tensor, eps_prev: &Tensor, lambda: f64) -> Result<f64> {
    kl_loss_directed(eps_i, eps_prev, lambda, KlDirection::NewGivenPrev)
}

pub fn kl_loss_directed(
    eps_i: &Tensor,
    eps_prev: &Tensor,
    lambda: f64,
    direction: KlDirection,
) -> Result<f64> {
    check_lambda(lambda)?;
    let kl = kl_directed(eps_i, eps_prev, direction)?;
    Ok((kl - lambda).powi(2))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )))
    }
}

/// KL objective against a fixed previous frame, with its log-softmax cached.
struct KlObjective<'a> {
    prev: &'a Tensor,
    prev_log: Vec<f64>,
    lambda: f64,
    direction: KlDirection,
}

impl<'a> KlObjective<'a> {
    fn new(prev: &'a Tensor, lambda: f64, direction: KlDirection) -> Result<Self> {
        check_lambda(lambda)?;
        if prev.len() < 2 {
            return Err(Error::invalid("KL needs at least 2 elements"));
        }
        Ok(Self {
            prev,
            prev_log: log_softmax(prev),
            lambda,
            direction,
        })
    }

    fn kl(&self, x: &Tensor) -> Result<f64> {
        self.prev.same_shape(x)?;
        let log_x = log_softmax(x);
        Ok(match self.direction {
            KlDirection::NewGivenPrev => categorical_kl(&log_x, &self.prev_log),
            KlDirection::PrevGivenNew => categorical_kl(&self.prev_log, &log_x),
        })
    }

    /// Returns `(kl, loss)`.
    fn eval(&self, x: &Tensor) -> Result<(f64, f64)> {
        let kl = self.kl(x)?;
        Ok((kl, (kl - self.lambda).powi(2)))
    }
}

/// `sqrt(alpha) * prev + sqrt(1 - alpha) * fresh`.
pub fn interpolate(prev: &Tensor, fresh: &Tensor, alpha: f64) -> Result<Tensor> {
    prev.lincomb(alpha.sqrt(), fresh, (1.0 - alpha).sqrt())
}

/// Every frame `sqrt(alpha) * shared + sqrt(1 - alpha) * independent_i`.
///
/// The shared draw uses stream offset 0; frame `i` uses offset `1 + i`.
pub fn mixed_noise(
    rng: &RngState,
    m: usize,
    alpha: MixCoefficient,
    shape: &[usize],
) -> Result<NoiseSequence> {
    if m < 1 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let shared = randn(&mut rng.substream(0), shape)?;
    let frames = (0..m)
        .map(|i| {
            let ind = randn(&mut rng.substream(1 + i as u64), shape)?;
            interpolate(&shared, &ind, alpha.value()).map(NoiseFrame)
        })
        .collect::<Result<_>>()?;
    Ok(NoiseSequence {
        frames,
        prior: NoisePrior::Mixed { alpha },
        traces: Vec::new(),
    })
}

/// `eps^1` fresh, then `eps^i = sqrt(alpha) * eps^(i-1) + sqrt(1 - alpha) * independent_i`.
///
/// Frame `i` draws its independent term from stream offset `i`.
pub fn progressive_noise(
    rng: &RngState,
    m: usize,
    alpha: MixCoefficient,
    shape: &[usize],
) -> Result<NoiseSequence> {
    if m < 1 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let mut frames = vec![NoiseFrame(randn(&mut rng.substream(0), shape)?)];
    for i in 1..m {
        let ind = randn(&mut rng.substream(i as u64), shape)?;
        let next = interpolate(frames[i - 1].eps(), &ind, alpha.value())?;
        frames.push(NoiseFrame(next));
    }
    Ok(NoiseSequence {
        frames,
        prior: NoisePrior::Progressive { alpha },
        traces: Vec::new(),
    })
}

/// Picks the lowest-loss draw among one initial and `cfg.random_iters` fresh
/// candidates. Candidate `j` draws from `rng.substream(j)`; ties go to the
/// lowest `j`, so candidates may be evaluated in any order.
pub fn random_search(
    rng: &RngState,
    eps_prev: &NoiseFrame,
    lambda: f64,
    cfg: &SearchConfig,
) -> Result<(NoiseFrame, SearchTrace)> {
    cfg.validate()?;
    let objective = KlObjective::new(eps_prev.eps(), lambda, cfg.kl_direction)?;
    let shape = eps_prev.eps().shape();

    let losses: Vec<f64> = (0..=cfg.random_iters as u64)
        .into_par_iter()
        .map(|j| {
            let cand = randn(&mut rng.substream(j), shape)?;
            objective.eval(&cand).map(|(_, loss)| loss)
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    let mut accepted = vec![true];
    for (j, &loss) in losses.iter().enumerate().skip(1) {
        let better = loss < losses[best];
        if better {
            best = j;
        }
        accepted.push(better);
    }
    let winner = randn(&mut rng.substream(best as u64), shape)?;
    let trace = SearchTrace {
        frame: 0,
        phase: SearchPhase::Random,
        final_loss: losses[best],
        step_losses: losses,
        accepted,
        alphas: Vec::new(),
        final_alpha: None,
    };
    Ok((NoiseFrame(winner), trace))
}

/// Step-halving search for the blend weight of the previous frame.
///
/// Starting at `alpha = 0` with step `delta0`, each iteration evaluates
/// `alpha` moved by `delta` toward the KL target (up while the current KL is
/// above `lambda`, down while below), clamped to `[0, 1]`. A strictly lower
/// loss is accepted; otherwise `delta` halves. Stops after `linear_iters`
/// iterations, when `delta < min_delta`, or when the target is hit exactly.
pub fn linear_search(
    eps_prev: &NoiseFrame,
    eps_tilde: &NoiseFrame,
    lambda: f64,
    cfg: &SearchConfig,
) -> Result<(MixCoefficient, SearchTrace)> {
    cfg.validate()?;
    eps_prev.eps().same_shape(eps_tilde.eps())?;
    let objective = KlObjective::new(eps_prev.eps(), lambda, cfg.kl_direction)?;
    let blend = |alpha: f64| interpolate(eps_prev.eps(), eps_tilde.eps(), alpha);

    let mut alpha = 0.0f64;
    let mut delta = cfg.delta0;
    let (mut kl, mut loss) = objective.eval(&blend(alpha)?)?;
    let mut trace = SearchTrace {
        frame: 0,
        phase: SearchPhase::Linear,
        step_losses: Vec::new(),
        accepted: Vec::new(),
        alphas: Vec::new(),
        final_alpha: None,
        final_loss: loss,
    };

    for _ in 0..cfg.linear_iters {
        if delta < cfg.min_delta || kl == lambda {
            break;
        }
        let step = if kl > lambda { delta } else { -delta };
        let trial = (alpha + step).clamp(0.0, 1.0);
        let (trial_kl, trial_loss) = objective.eval(&blend(trial)?)?;
        let accept = trial_loss < loss;
        trace.step_losses.push(trial_loss);
        trace.accepted.push(accept);
        trace.alphas.push(trial);
        if accept {
            alpha = trial;
            kl = trial_kl;
            loss = trial_loss;
        } else {
            delta /= 2.0;
        }
    }
    trace.final_alpha = Some(alpha);
    trace.final_loss = loss;
    Ok((MixCoefficient(alpha), trace))
}

/// Extends a dependency chain from `start` (absolute frame index
/// `start_index`) by `lambdas.len()` frames. Frame `a` searches with
/// `rng.substream(a * FRAME_STREAM_STRIDE)` as its candidate base.
pub fn dependency_chain(
    rng: &RngState,
    start: &NoiseFrame,
    start_index: usize,
    lambdas: &[f64],
    cfg: &SearchConfig,
) -> Result<(Vec<NoiseFrame>, Vec<SearchTrace>)> {
    cfg.validate()?;
    if let Some(bad) = lambdas.iter().find(|&&l| !(l.is_finite() && l > 0.0)) {
        return Err(Error::invalid(format!("lambdas must be > 0, got {bad}")));
    }
    let mut frames = Vec::with_capacity(lambdas.len());
    let mut traces = Vec::with_capacity(2 * lambdas.len());
    let mut prev = start.clone();
    for (k, &lambda) in lambdas.iter().enumerate() {
        let index = start_index + 1 + k;
        let base = rng.substream(index as u64 * FRAME_STREAM_STRIDE);
        let (tilde, mut random_trace) = random_search(&base, &prev, lambda, cfg)?;
        let (alpha, mut linear_trace) = linear_search(&prev, &tilde, lambda, cfg)?;
        random_trace.frame = index;
        linear_trace.frame = index;
        let next = NoiseFrame(interpolate(prev.eps(), tilde.eps(), alpha.value())?);
        traces.push(random_trace);
        traces.push(linear_trace);
        frames.push(next.clone());
        prev = next;
    }
    Ok((frames, traces))
}

/// Dependency noise sequence of `m` frames. Frame 1 is a plain draw from
/// `rng.substream(0)`; frames 2..m follow the two-stage search.
pub fn dependency_noise(
    rng: &RngState,
    m: usize,
    lambdas: &[f64],
    cfg: &SearchConfig,
    shape: &[usize],
) -> Result<NoiseSequence> {
    if m < 1 {
        return Err(Error::invalid("m must be at least 1"));
    }
    if lambdas.len() != m - 1 {
        return Err(Error::invalid(format!(
            "expected {} lambdas for m = {m}, got {}",
            m - 1,
            lambdas.len()
        )));
    }
    let first = NoiseFrame(randn(&mut rng.substream(0), shape)?);
    let (rest, traces) = dependency_chain(rng, &first, 0, lambdas, cfg)?;
    let mut frames = vec![first];
    frames.extend(rest);
    Ok(NoiseSequence {
        frames,
        prior: NoisePrior::Dependency {
            lambdas: lambdas.to_vec(),
            search: *cfg,
        },
        traces,
    })
}
