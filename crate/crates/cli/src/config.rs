//! Layering of command-line flags over a config file over defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use zsv_core::attention::AttentionMode;
use zsv_core::diffusion::{
    DdimConfig, DenoiserSpec, LinearSchedule, MixtureModel, ToyAttentionSpec,
};
use zsv_core::noise::SearchConfig;
use zsv_core::pipeline::{
    RunManifest, Zs2Config, DEFAULT_DDIM_STEPS, DEFAULT_FRAMES, DEFAULT_LAMBDA, DEFAULT_MU,
};

use crate::cli::{DenoiserArg, ModelArg, RunArgs};
use crate::CliError;

/// Everything a config file may set. A run manifest is accepted too and
/// contributes its full config, flags and extension history.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub m: Option<usize>,
    pub lambda: Option<f64>,
    pub lambdas: Option<Vec<f64>>,
    pub mu: Option<f64>,
    pub mus: Option<Vec<f64>>,
    pub search: Option<SearchConfig>,
    pub schedule: Option<LinearSchedule>,
    pub steps: Option<usize>,
    pub ddim: Option<DdimConfig>,
    pub denoiser: Option<DenoiserSpec>,
    pub frame_shape: Option<Vec<usize>>,
    pub model: Option<ModelArg>,
    pub alpha: Option<f64>,
    #[serde(skip)]
    pub flags: BTreeMap<String, String>,
    #[serde(skip)]
    pub extensions: Vec<usize>,
}

impl From<RunManifest> for ConfigFile {
    fn from(man: RunManifest) -> Self {
        let c = man.config;
        Self {
            seed: Some(c.seed),
            m: Some(c.m),
            lambdas: Some(c.lambdas),
            mus: Some(c.mus),
            search: Some(c.search),
            schedule: Some(c.schedule),
            ddim: Some(c.ddim),
            denoiser: Some(c.denoiser),
            frame_shape: Some(c.frame_shape),
            flags: man.flags,
            extensions: man.extensions,
            ..Self::default()
        }
    }
}

fn parse<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        CliError::Usage(format!(
            "{}: line {}, column {}, field `{}`: {}",
            path.display(),
            inner.line(),
            inner.column(),
            e.path(),
            inner
        ))
    })
}

pub fn load(path: &Path) -> Result<ConfigFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let probe: serde_json::Value = parse(&text, path)?;
    let is_manifest = probe.get("software").is_some() && probe.get("config").is_some();
    if is_manifest {
        Ok(parse::<RunManifest>(&text, path)?.into())
    } else {
        parse(&text, path)
    }
}

fn broadcast(list: &Option<Vec<f64>>, one: Option<f64>, n: usize) -> Option<Vec<f64>> {
    list.clone().or_else(|| one.map(|v| vec![v; n]))
}

/// Resolves the sampling config. Scalar `lambda`/`mu` broadcast to the
/// frame count; explicit lists must already have the right length.
pub fn resolve(args: &RunArgs, file: &ConfigFile) -> Result<Zs2Config, CliError> {
    let m = args.m.or(file.m).unwrap_or(DEFAULT_FRAMES);
    let n_lambda = m.saturating_sub(1);
    let lambdas = broadcast(&args.lambdas, args.lambda, n_lambda)
        .or_else(|| broadcast(&file.lambdas, file.lambda, n_lambda))
        .unwrap_or_else(|| vec![DEFAULT_LAMBDA; n_lambda]);
    let mus = broadcast(&args.mus, args.mu, m)
        .or_else(|| broadcast(&file.mus, file.mu, m))
        .unwrap_or_else(|| vec![DEFAULT_MU; m]);

    let mut search = file.search.unwrap_or_default();
    if let Some(v) = args.random_iters {
        search.random_iters = v;
    }
    if let Some(v) = args.linear_iters {
        search.linear_iters = v;
    }
    if let Some(v) = args.delta0 {
        search.delta0 = v;
    }

    let schedule = file.schedule.unwrap_or_default();
    let ddim = match (args.steps, &file.ddim, file.steps) {
        (Some(s), _, _) => DdimConfig::uniform(schedule.timesteps, s)?,
        (None, Some(d), _) => d.clone(),
        (None, None, Some(s)) => DdimConfig::uniform(schedule.timesteps, s)?,
        (None, None, None) => DdimConfig::uniform(schedule.timesteps, DEFAULT_DDIM_STEPS)?,
    };
    let frame_shape = args
        .shape
        .clone()
        .or_else(|| file.frame_shape.clone())
        .unwrap_or_else(|| Zs2Config::default().frame_shape);

    let mut denoiser = match (args.denoiser, file.denoiser.clone()) {
        (None, Some(d)) => d,
        (None, None) => DenoiserSpec::ToyAttention(ToyAttentionSpec::default()),
        (Some(DenoiserArg::ToyAttn), Some(d @ DenoiserSpec::ToyAttention(_))) => d,
        (Some(DenoiserArg::ToyAttn), _) => DenoiserSpec::ToyAttention(ToyAttentionSpec::default()),
        (Some(DenoiserArg::Mixture), Some(d @ DenoiserSpec::MixtureOracle(_))) => d,
        (Some(DenoiserArg::Mixture), _) => {
            DenoiserSpec::mixture(MixtureModel::two_patterns(&frame_shape)?)
        }
    };
    if let Some(mode) = args.attention {
        match &mut denoiser {
            DenoiserSpec::ToyAttention(spec) => spec.attention = AttentionMode::from(mode),
            DenoiserSpec::MixtureOracle(_) => {
                return Err(CliError::Usage(
                    "--attention only applies to the toy-attn denoiser".into(),
                ))
            }
        }
    }

    let cfg = Zs2Config {
        m,
        lambdas,
        mus,
        search,
        schedule,
        ddim,
        denoiser,
        seed: args.seed.or(file.seed).unwrap_or(0),
        frame_shape,
    };
    cfg.validate()?;
    Ok(cfg)
}
