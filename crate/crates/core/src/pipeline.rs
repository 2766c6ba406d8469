//! End-to-end sampling: dependency noise feeds a jointly stepped DDIM run
//! whose denoiser mixes frames with temporal momentum attention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, MomentumSchedule};
use crate::diffusion::{ddim_sample, DdimConfig, DenoiserSpec, LinearSchedule};
use crate::error::{Error, Result, StageExt};
use crate::noise::{
    dependency_chain, dependency_noise, kl_directed, mixed_noise, progressive_noise, KlDirection,
    MixCoefficient, NoiseFrame, NoiseSequence, SearchConfig, SearchTrace,
};
use crate::numerics::{normality, pearson, NormalityCheck, RngState, Tensor};

pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_MU: f64 = 0.98;
pub const DEFAULT_FRAMES: usize = 8;
pub const DEFAULT_DDIM_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zs2Config {
    pub m: usize,
    /// Target KL for frames 2..m (length `m - 1`).
    pub lambdas: Vec<f64>,
    /// Momentum per frame (length `m`); the first entry is unused.
    pub mus: Vec<f64>,
    pub search: SearchConfig,
    pub schedule: LinearSchedule,
    pub ddim: DdimConfig,
    pub denoiser: DenoiserSpec,
    pub seed: u64,
    pub frame_shape: Vec<usize>,
}

impl Default for Zs2Config {
    fn default() -> Self {
        let schedule = LinearSchedule::default();
        Self {
            m: DEFAULT_FRAMES,
            lambdas: vec![DEFAULT_LAMBDA; DEFAULT_FRAMES - 1],
            mus: vec![DEFAULT_MU; DEFAULT_FRAMES],
            search: SearchConfig::default(),
            ddim: DdimConfig::uniform(schedule.timesteps, DEFAULT_DDIM_STEPS)
                .expect("default step count fits the default schedule"),
            schedule,
            denoiser: DenoiserSpec::toy_attention(AttentionMode::TemporalMomentum, None),
            seed: 0,
            frame_shape: vec![64, 64],
        }
    }
}

impl Zs2Config {
    /// Sets `m` and resizes both schedules to constants `lambda`, `mu`.
    pub fn with_frames(mut self, m: usize, lambda: f64, mu: f64) -> Self {
        self.m = m;
        self.lambdas = vec![lambda; m.saturating_sub(1)];
        self.mus = vec![mu; m];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if self.lambdas.len() != self.m - 1 {
            return Err(Error::invalid(format!(
                "lambdas has {} entries; m = {} needs {}",
                self.lambdas.len(),
                self.m,
                self.m - 1
            )));
        }
        if self.mus.len() != self.m {
            return Err(Error::invalid(format!(
                "mus has {} entries; m = {} needs {}",
                self.mus.len(),
                self.m,
                self.m
            )));
        }
        MomentumSchedule::new(self.mus.clone())?;
        if let Some(bad) = self.lambdas.iter().find(|&&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::invalid(format!("lambdas must be > 0, got {bad}")));
        }
        self.search.validate()?;
        if self.frame_shape.is_empty() || self.frame_shape.contains(&0) {
            return Err(Error::invalid(format!(
                "bad frame shape {:?}",
                self.frame_shape
            )));
        }
        let sched = self.schedule.build()?;
        self.ddim.validate(&sched)?;
        Ok(())
    }

    /// Denoiser spec with the momentum schedule filled in from `mus` when the
    /// spec leaves it open.
    pub fn denoiser_with(&self, mus: &[f64]) -> DenoiserSpec {
        match &self.denoiser {
            DenoiserSpec::ToyAttention(spec) if spec.mus.is_none() => {
                let mut spec = spec.clone();
                spec.mus = Some(mus.to_vec());
                DenoiserSpec::ToyAttention(spec)
            }
            other => other.clone(),
        }
    }

    fn lambda_at(&self, frame: usize) -> Result<f64> {
        if self.lambdas.is_empty() {
            return Err(Error::invalid(
                "extension needs a lambda but the config has m = 1",
            ));
        }
        Ok(self.lambdas[(frame - 1) % self.lambdas.len()])
    }

    /// Momentum for position `k` of a segment, cycling frames 2..m.
    fn segment_mus(&self, len: usize) -> Vec<f64> {
        (0..len)
            .map(|k| {
                if k == 0 || self.m == 1 {
                    self.mus[0]
                } else {
                    self.mus[1 + (k - 1) % (self.m - 1)]
                }
            })
            .collect()
    }
}

/// Everything needed to replay a run, plus what it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub software: String,
    pub config: Zs2Config,
    pub seed: u64,
    /// Frame counts of every auto-regressive extension, in order.
    #[serde(default)]
    pub extensions: Vec<usize>,
    pub frame_count: usize,
    pub achieved_kl: Vec<f64>,
    pub traces: Vec<SearchTrace>,
    /// Value range mapped onto PGM levels 0..=255.
    #[serde(default)]
    pub pgm_range: Option<[f32; 2]>,
    /// Seconds since the epoch, only when `SOURCE_DATE_EPOCH` is set.
    #[serde(default)]
    pub created_unix: Option<u64>,
    /// Numeric command-line flags exactly as given.
    #[serde(default)]
    pub flags: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub const SOFTWARE: &str = concat!("zsv-core ", env!("CARGO_PKG_VERSION"));

const SCHEDULE_NOTE: &str =
    "beta schedule and DDIM step count are conventional defaults, not taken from a reference model";

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Tensor>,
    /// Starting noise `x_T` of every frame.
    pub terminal_noise: Vec<Tensor>,
    pub manifest: RunManifest,
}

fn creation_time() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()
}

/// Samples `cfg.m` frames from dependency noise with jointly stepped DDIM.
pub fn zs2_sample(cfg: &Zs2Config) -> Result<VideoClip> {
    cfg.validate().stage("config")?;
    let sched = cfg.schedule.build().stage("schedule")?;
    let noise = dependency_noise(
        &RngState::new(cfg.seed),
        cfg.m,
        &cfg.lambdas,
        &cfg.search,
        &cfg.frame_shape,
    )
    .stage("noise")?;
    let denoiser = cfg
        .denoiser_with(&cfg.mus)
        .build(&cfg.frame_shape)
        .stage("denoiser")?;
    let x_t = noise.stacked().stage("noise")?;
    let out = ddim_sample(denoiser.as_ref(), &x_t, &cfg.ddim, &sched, false).stage("sampling")?;

    let achieved_kl = noise.adjacent_kl(cfg.search.kl_direction).stage("noise")?;
    Ok(VideoClip {
        frames: out.x0.unstack(),
        terminal_noise: noise
            .frames
            .into_iter()
            .map(NoiseFrame::into_tensor)
            .collect(),
        manifest: RunManifest {
            software: SOFTWARE.to_string(),
            config: cfg.clone(),
            seed: cfg.seed,
            extensions: Vec::new(),
            frame_count: cfg.m,
            achieved_kl,
            traces: noise.traces,
            pgm_range: None,
            created_unix: creation_time(),
            flags: BTreeMap::new(),
            notes: vec![SCHEDULE_NOTE.to_string()],
        },
    })
}

/// Appends `extra` frames. The last frame's starting noise heads the new
/// segment's dependency chain and its first position in the joint DDIM run;
/// that re-sampled head is dropped, so emitted frames never change.
pub fn autoregressive_extend(cfg: &Zs2Config, clip: &VideoClip, extra: usize) -> Result<VideoClip> {
    if extra == 0 {
        return Ok(clip.clone());
    }
    if clip.frames.is_empty() {
        return Err(Error::InvalidState("cannot extend an empty clip".into()));
    }
    let last = clip.terminal_noise.last().ok_or_else(|| {
        Error::InvalidState("clip carries no terminal noise to extend from".into())
    })?;
    if clip.terminal_noise.len() != clip.frames.len() {
        return Err(Error::InvalidState(format!(
            "{} frames but {} terminal noise tensors",
            clip.frames.len(),
            clip.terminal_noise.len()
        )));
    }
    cfg.validate().stage("config")?;
    let start = clip.frames.len() - 1;
    let lambdas = (start + 1..=start + extra)
        .map(|a| cfg.lambda_at(a))
        .collect::<Result<Vec<_>>>()
        .stage("config")?;
    let head = NoiseFrame::new(last.clone());
    let (fresh, traces) = dependency_chain(
        &RngState::new(cfg.seed),
        &head,
        start,
        &lambdas,
        &cfg.search,
    )
    .stage("noise")?;

    let mut segment = vec![last.clone()];
    segment.extend(fresh.iter().map(|f| f.eps().clone()));
    let sched = cfg.schedule.build().stage("schedule")?;
    let denoiser = cfg
        .denoiser_with(&cfg.segment_mus(segment.len()))
        .build(&cfg.frame_shape)
        .stage("denoiser")?;
    let x_t = Tensor::stack(&segment).stage("noise")?;
    let out = ddim_sample(denoiser.as_ref(), &x_t, &cfg.ddim, &sched, false).stage("sampling")?;

    let mut next = clip.clone();
    next.frames.extend(out.x0.unstack().into_iter().skip(1));
    next.terminal_noise
        .extend(fresh.into_iter().map(NoiseFrame::into_tensor));
    next.manifest.achieved_kl = next
        .terminal_noise
        .windows(2)
        .map(|w| kl_directed(&w[1], &w[0], cfg.search.kl_direction))
        .collect::<Result<_>>()?;
    next.manifest.traces.extend(traces);
    next.manifest.extensions.push(extra);
    next.manifest.frame_count = next.frames.len();
    Ok(next)
}

/// Re-runs a manifest: the base clip, then every recorded extension.
pub fn replay(manifest: &RunManifest) -> Result<VideoClip> {
    let mut clip = zs2_sample(&manifest.config)?;
    for &extra in &manifest.extensions {
        clip = autoregressive_extend(&manifest.config, &clip, extra)?;
    }
    clip.manifest.flags = manifest.flags.clone();
    clip.manifest.created_unix = manifest.created_unix;
    Ok(clip)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub correlation: f64,
    pub mean_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pairs: Vec<PairStat>,
    pub mean_correlation: f64,
    pub min_correlation: f64,
    pub max_correlation: f64,
    pub mean_abs_diff: f64,
    /// Mean over frames 2..m of the mean absolute difference to frame 1.
    pub mean_distance_to_first: f64,
}

pub fn frame_correlation_report(frames: &[Tensor]) -> Result<CorrelationReport> {
    if frames.len() < 2 {
        return Err(Error::invalid("correlation report needs at least 2 frames"));
    }
    let mad = |a: &Tensor, b: &Tensor| -> Result<f64> {
        a.same_shape(b)?;
        Ok(a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
            .sum::<f64>()
            / a.len() as f64)
    };
    let pairs = frames
        .windows(2)
        .map(|w| {
            Ok(PairStat {
                correlation: pearson(&w[0], &w[1])?,
                mean_abs_diff: mad(&w[0], &w[1])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let to_first = frames[1..]
        .iter()
        .map(|f| mad(&frames[0], f))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationReport {
        mean_correlation: pairs.iter().map(|p| p.correlation).sum::<f64>() / n,
        min_correlation: pairs
            .iter()
            .map(|p| p.correlation)
            .fold(f64::INFINITY, f64::min),
        max_correlation: pairs
            .iter()
            .map(|p| p.correlation)
            .fold(f64::NEG_INFINITY, f64::max),
        mean_abs_diff: pairs.iter().map(|p| p.mean_abs_diff).sum::<f64>() / n,
        mean_distance_to_first: to_first.iter().sum::<f64>() / to_first.len() as f64,
        pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonParams {
    pub alpha_mixed: f64,
    pub alpha_progressive: f64,
    pub lambda: f64,
    pub search: SearchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub frames: Vec<NormalityCheck>,
    pub adjacent_kl: Vec<f64>,
    pub all_normal: bool,
}

fn model_report(name: &str, seq: &NoiseSequence, direction: KlDirection) -> Result<ModelReport> {
    let frames = seq
        .frames
        .iter()
        .map(|f| normality(f.eps()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelReport {
        model: name.to_string(),
        all_normal: frames.iter().all(|c| c.passes),
        frames,
        adjacent_kl: seq.adjacent_kl(direction)?,
    })
}

/// Generates one sequence per prior (mixed, progressive, dependency) from
/// distinct streams of `seed` and reports per-frame normality and
/// adjacent-frame KL.
pub fn noise_model_comparison(
    seed: u64,
    m: usize,
    shape: &[usize],
    params: &ComparisonParams,
) -> Result<Vec<ModelReport>> {
    if m < 2 {
        return Err(Error::invalid("comparison needs at least 2 frames"));
    }
    let dir = params.search.kl_direction;
    // Disjoint stream ranges per model.
    let mixed = mixed_noise(
        &RngState::with_stream(seed, 1 << 60),
        m,
        MixCoefficient::new(params.alpha_mixed)?,
        shape,
    )?;
    let progressive = progressive_noise(
        &RngState::with_stream(seed, 2 << 60),
        m,
        MixCoefficient::new(params.alpha_progressive)?,
        shape,
    )?;
    let dependency = dependency_noise(
        &RngState::new(seed),
        m,
        &vec![params.lambda; m - 1],
        &params.search,
        shape,
    )?;
    Ok(vec![
        model_report("mixed", &mixed, dir)?,
        model_report("progressive", &progressive, dir)?,
        model_report("dependency", &dependency, dir)?,
    ])
}
