mod cli;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use zsv_core::artifacts::{self, NoiseSidecar};
use zsv_core::attention::{equivalence_report, AttnFrames};
use zsv_core::diffusion::LinearSchedule;
use zsv_core::noise::{dependency_noise, mixed_noise, progressive_noise, MixCoefficient};
use zsv_core::numerics::{normality, randn, read_tensor_file, RngState};
use zsv_core::pipeline::{autoregressive_extend, zs2_sample, SOFTWARE};

use cli::{
    AnalyzeArgs, AttnCheckArgs, Cli, Command, ExtendArgs, GenNoiseArgs, ModelArg, SampleArgs,
    ScheduleArgs,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(zsv_core::Error),
}

impl From<zsv_core::Error> for CliError {
    fn from(e: zsv_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical_degeneracy() => 2,
            _ => 1,
        }
    }
}

/// Flags echoed into manifests. `--workers` is left out on purpose: it must
/// not change any artifact byte.
const ECHOED: &[&str] = &[
    "seed",
    "m",
    "lambda",
    "lambdas",
    "mu",
    "mus",
    "random_iters",
    "linear_iters",
    "delta0",
    "steps",
    "shape",
    "alpha",
    "denoiser",
    "attention",
    "model",
];

fn echoed_flags(matches: &ArgMatches) -> BTreeMap<String, String> {
    let Some((_, sub)) = matches.subcommand() else {
        return BTreeMap::new();
    };
    ECHOED
        .iter()
        .filter(|id| sub.try_contains_id(id).unwrap_or(false))
        .filter(|id| sub.value_source(id) == Some(ValueSource::CommandLine))
        .filter_map(|id| {
            let raw: Vec<String> = sub
                .get_raw(id)?
                .map(|v| v.to_string_lossy().into_owned())
                .collect();
            Some((id.replace('_', "-"), raw.join(",")))
        })
        .collect()
}

fn gen_noise(args: &GenNoiseArgs, flags: BTreeMap<String, String>) -> Result<(), CliError> {
    let file = match &args.run.config {
        Some(p) => config::load(p)?,
        None => config::ConfigFile::default(),
    };
    let cfg = config::resolve(&args.run, &file)?;
    let model = args.model.or(file.model).ok_or_else(|| {
        CliError::Usage("--model is required (mixed, progressive or dependency)".into())
    })?;
    let alpha = || -> Result<MixCoefficient, CliError> {
        let a = args
            .alpha
            .or(file.alpha)
            .ok_or_else(|| CliError::Usage("--alpha is required for this model".into()))?;
        Ok(MixCoefficient::new(a)?)
    };
    let rng = RngState::new(cfg.seed);
    let seq = match model {
        ModelArg::Mixed => mixed_noise(&rng, cfg.m, alpha()?, &cfg.frame_shape)?,
        ModelArg::Progressive => progressive_noise(&rng, cfg.m, alpha()?, &cfg.frame_shape)?,
        ModelArg::Dependency => {
            dependency_noise(&rng, cfg.m, &cfg.lambdas, &cfg.search, &cfg.frame_shape)?
        }
    };
    let mut merged = file.flags.clone();
    merged.extend(flags);
    let sidecar = NoiseSidecar {
        software: SOFTWARE.to_string(),
        m: cfg.m,
        seed: cfg.seed,
        shape: cfg.frame_shape.clone(),
        prior: seq.prior.clone(),
        achieved_kl: seq.adjacent_kl(cfg.search.kl_direction)?,
        normality: seq
            .frames
            .iter()
            .filter(|f| f.eps().len() >= 8)
            .map(|f| normality(f.eps()))
            .collect::<Result<_, _>>()?,
        traces: seq.traces.clone(),
        flags: merged,
    };
    artifacts::write_noise(&args.out, &seq, &sidecar)?;
    Ok(())
}

fn sample(args: &SampleArgs, flags: BTreeMap<String, String>) -> Result<(), CliError> {
    let file = match &args.run.config {
        Some(p) => config::load(p)?,
        None => config::ConfigFile::default(),
    };
    let cfg = config::resolve(&args.run, &file)?;
    let mut clip = zs2_sample(&cfg)?;
    for &extra in &file.extensions {
        clip = autoregressive_extend(&cfg, &clip, extra)?;
    }
    clip.manifest.flags = file.flags.clone();
    clip.manifest.flags.extend(flags);
    artifacts::write_clip(&args.out, &mut clip)?;
    Ok(())
}

fn extend(args: &ExtendArgs) -> Result<(), CliError> {
    let clip = artifacts::load_clip(&args.from)?;
    let cfg = clip.manifest.config.clone();
    let mut next = autoregressive_extend(&cfg, &clip, args.frames)?;
    artifacts::write_clip(&args.out, &mut next)?;
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let clip = artifacts::load_clip(&args.dir)?;
    let out = args.out.as_deref().unwrap_or(&args.dir);
    artifacts::write_analysis(out, &clip)?;
    Ok(())
}

fn attn_check(args: &AttnCheckArgs) -> Result<(), CliError> {
    let frames = match (&args.q, &args.k, &args.v) {
        (Some(q), Some(k), Some(v)) => AttnFrames::new(
            read_tensor_file(q)?,
            read_tensor_file(k)?,
            read_tensor_file(v)?,
        )?,
        _ => {
            let shape = [args.m, args.tokens, args.channels];
            let draw = |s| randn(&mut RngState::with_stream(args.seed, s), &shape);
            AttnFrames::new(draw(0)?, draw(1)?, draw(2)?)?
        }
    };
    let report = equivalence_report(&frames, args.mu, args.threshold)?;
    let mut json = serde_json::to_vec_pretty(&report).map_err(zsv_core::Error::from)?;
    json.push(b'\n');
    if let Some(path) = &args.out {
        artifacts::atomic_write(path, &json)?;
    }
    std::io::stdout()
        .write_all(&json)
        .map_err(zsv_core::Error::from)?;
    Ok(())
}

fn schedule_dump(args: &ScheduleArgs) -> Result<(), CliError> {
    let mut spec = match &args.config {
        Some(p) => config::load(p)?.schedule.unwrap_or_default(),
        None => LinearSchedule::default(),
    };
    if let Some(t) = args.timesteps {
        spec.timesteps = t;
    }
    if let Some(b) = args.beta_start {
        spec.beta_start = b;
    }
    if let Some(b) = args.beta_end {
        spec.beta_end = b;
    }
    let sched = spec.build()?;
    let mut text = String::from("t,beta,alpha_bar\n");
    for (i, (b, ab)) in sched.betas().iter().zip(sched.alpha_bars()).enumerate() {
        text.push_str(&format!("{},{b},{ab}\n", i + 1));
    }
    match &args.out {
        Some(path) => artifacts::atomic_write(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: &Cli, flags: BTreeMap<String, String>) -> Result<(), CliError> {
    match &cli.command {
        Command::GenNoise(a) => gen_noise(a, flags),
        Command::Sample(a) => sample(a, flags),
        Command::Extend(a) => extend(a),
        Command::Analyze(a) => analyze(a),
        Command::AttnCheck(a) => attn_check(a),
        Command::ScheduleDump(a) => schedule_dump(a),
    }
}

fn run(cli: &Cli, flags: BTreeMap<String, String>) -> Result<(), CliError> {
    match cli.workers {
        None => dispatch(cli, flags),
        Some(0) => Err(CliError::Usage("--workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?
            .install(|| dispatch(cli, flags)),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
fn entry<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match run(&cli, echoed_flags(&matches)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(entry(std::env::args_os()))
}

#[cfg(test)]
mod tests;
