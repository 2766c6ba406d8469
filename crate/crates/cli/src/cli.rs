use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use zsv_core::attention::AttentionMode;

#[derive(Debug, Parser)]
#[command(
    name = "zsv",
    version,
    about = "Zero-shot video sampling with correlated noise and temporal momentum attention"
)]
pub struct Cli {
    /// Worker threads for parallel sections (results do not depend on it).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a noise sequence from one of the priors.
    GenNoise(GenNoiseArgs),
    /// Sample a clip.
    Sample(SampleArgs),
    /// Append frames to a sampled clip.
    Extend(ExtendArgs),
    /// Recompute metrics.json and traces.csv for a clip directory.
    Analyze(AnalyzeArgs),
    /// Check the attention identities on seeded or loaded Q/K/V tensors.
    AttnCheck(AttnCheckArgs),
    /// Print the beta schedule as CSV.
    ScheduleDump(ScheduleArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    Mixed,
    Progressive,
    Dependency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DenoiserArg {
    Mixture,
    ToyAttn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    Sa,
    Cfa,
    Tma,
}

impl From<AttentionArg> for AttentionMode {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::Sa => AttentionMode::SelfAttention,
            AttentionArg::Cfa => AttentionMode::CrossFrame,
            AttentionArg::Tma => AttentionMode::TemporalMomentum,
        }
    }
}

/// Flags shared by every command that builds a sampling config.
#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// JSON config file, or a manifest.json to replay.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of frames.
    #[arg(long)]
    pub m: Option<usize>,
    /// Target KL for every frame transition.
    #[arg(long, conflicts_with = "lambdas")]
    pub lambda: Option<f64>,
    /// Comma-separated per-transition KL targets (m - 1 values).
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Momentum for every frame.
    #[arg(long, conflicts_with = "mus")]
    pub mu: Option<f64>,
    /// Comma-separated per-frame momentum (m values).
    #[arg(long, value_delimiter = ',')]
    pub mus: Option<Vec<f64>>,
    #[arg(long)]
    pub random_iters: Option<usize>,
    #[arg(long)]
    pub linear_iters: Option<usize>,
    #[arg(long)]
    pub delta0: Option<f64>,
    #[arg(long, value_enum)]
    pub denoiser: Option<DenoiserArg>,
    #[arg(long, value_enum)]
    pub attention: Option<AttentionArg>,
    /// DDIM steps, uniformly spaced.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Frame shape, e.g. 64,64 or 3,32,32.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct GenNoiseArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Mixing coefficient for the mixed and progressive models.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtendArgs {
    /// Clip directory holding manifest.json and noise/.
    #[arg(long)]
    pub from: PathBuf,
    /// Frames to append.
    #[arg(long)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Clip directory to analyze.
    #[arg(long)]
    pub dir: PathBuf,
    /// Where to write the results (defaults to the clip directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnCheckArgs {
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 0.98)]
    pub mu: f64,
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Truncation threshold for the bounded matrix form.
    #[arg(long, default_value_t = 1e-6)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Query tensor container `[m, tokens, channels]`; with `--k` and `--v`
    /// replaces the seeded random inputs.
    #[arg(long, requires_all = ["k", "v"])]
    pub q: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "v"])]
    pub k: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "k"])]
    pub v: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// JSON config whose `schedule` is dumped.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
