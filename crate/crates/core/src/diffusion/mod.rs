//! Beta schedules, the forward process, deterministic DDIM sampling and the
//! two stand-in noise predictors.

mod ddim;
mod mixture;
mod schedule;
mod toy;

use serde::{Deserialize, Serialize};

pub use ddim::{
    ddim_sample, ddim_step, ddim_update, forward_diffuse, forward_update, DdimConfig, DdimStep,
    EpsPredictor, Sampled,
};
pub use mixture::{mixture_eps_predictor, MixtureComponent, MixtureModel, MixturePredictor};
pub use schedule::{linear_beta_schedule, BetaSchedule, LinearSchedule};
pub use toy::{ToyAttentionDenoiser, ToyAttentionSpec};

use crate::attention::AttentionMode;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureOracleSpec {
    pub mixture: MixtureModel,
    #[serde(default)]
    pub cond_label: Option<String>,
}

/// Serializable description of a noise predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    MixtureOracle(MixtureOracleSpec),
    ToyAttention(ToyAttentionSpec),
}

impl DenoiserSpec {
    pub fn mixture(mixture: MixtureModel) -> Self {
        DenoiserSpec::MixtureOracle(MixtureOracleSpec {
            mixture,
            cond_label: None,
        })
    }

    pub fn toy_attention(attention: AttentionMode, mus: Option<Vec<f64>>) -> Self {
        DenoiserSpec::ToyAttention(ToyAttentionSpec {
            attention,
            mus,
            ..ToyAttentionSpec::default()
        })
    }

    /// Opaque conditioning tag; recorded, never interpreted.
    pub fn cond_label(&self) -> Option<&str> {
        match self {
            DenoiserSpec::MixtureOracle(s) => s.cond_label.as_deref(),
            DenoiserSpec::ToyAttention(s) => s.cond_label.as_deref(),
        }
    }

    pub fn build(&self, frame_shape: &[usize]) -> Result<Box<dyn EpsPredictor>> {
        Ok(match self {
            DenoiserSpec::MixtureOracle(s) => {
                let p = MixturePredictor::new(s.mixture.clone())?;
                if s.mixture.shape != frame_shape {
                    return Err(crate::Error::invalid(format!(
                        "mixture shape {:?} differs from frame shape {frame_shape:?}",
                        s.mixture.shape
                    )));
                }
                Box::new(p)
            }
            DenoiserSpec::ToyAttention(s) => {
                Box::new(ToyAttentionDenoiser::new(s.clone(), frame_shape)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_shape() {
        let spec = DenoiserSpec::toy_attention(AttentionMode::TemporalMomentum, Some(vec![0.98]));
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(json["kind"], "toy_attention");
        assert_eq!(json["attention"], "temporal_momentum");
        let back: DenoiserSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);

        let short: DenoiserSpec =
            serde_json::from_str(r#"{"kind": "toy_attention", "attention": "cfa"}"#).unwrap();
        assert!(matches!(
            short,
            DenoiserSpec::ToyAttention(ToyAttentionSpec {
                attention: AttentionMode::CrossFrame,
                ..
            })
        ));
        assert!(
            serde_json::from_str::<DenoiserSpec>(r#"{"kind": "toy_attention", "bogus": 1}"#)
                .is_err()
        );
    }
}
