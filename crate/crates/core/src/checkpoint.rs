//! Versioned JSON checkpoint of a trained continual model.
//!
//! Layout (one JSON object, keys in this order):
//!
//! | key            | content                                                |
//! |----------------|--------------------------------------------------------|
//! | `format`       | always `"relanchor-checkpoint"`                        |
//! | `version`      | layout version, currently 1                            |
//! | `encoder`      | `{"transformer": BackboneConfig}` or `{"precomputed": {"dim"}}` |
//! | `class_names`  | class index map, position = label                      |
//! | `text_anchors` | unit-norm anchor matrix `{rows, cols, data}`           |
//! | `text_source`  | where the anchors came from                            |
//! | `model`        | prompt length, share mode, aggregation flag            |
//! | `loss`         | temperature, weight and variant of the structural loss |
//! | `global_seed`  | seed from which every domain seed is derived           |
//! | `domain_names` | dataset name at each stream position                   |
//! | `domains`      | per-domain parameter bundles in stream order           |
//! | `bank`         | identification prototypes built after each domain      |
//!
//! Backbone weights are not stored: they are a pure function of the
//! backbone config and its seed. Floats are written in shortest round-trip
//! form, so loading restores every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::domain_id::{IdStrategy, PrototypeBank};
use crate::model::{ContinualModel, DomainModelState, FeatureEncoder, ModelConfig, ModelError};
use crate::numerics::Matrix;
use crate::text_anchor::{AnchorSource, TextAnchorSet};
use crate::vl_rsa::LossConfig;

pub const CHECKPOINT_FORMAT: &str = "relanchor-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSpec {
    Transformer(BackboneConfig),
    Precomputed { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderSpec,
    pub class_names: Vec<String>,
    pub text_anchors: Matrix,
    pub text_source: AnchorSource,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub global_seed: u64,
    pub domain_names: Vec<String>,
    pub domains: Vec<DomainModelState>,
    /// Identification prototypes and the strategy that built them.
    pub bank: Option<(IdStrategy, PrototypeBank)>,
}

impl Checkpoint {
    pub fn capture(
        model: &ContinualModel,
        domain_names: Vec<String>,
        bank: Option<(IdStrategy, PrototypeBank)>,
    ) -> Self {
        let encoder = match model.encoder() {
            FeatureEncoder::Transformer(b) => EncoderSpec::Transformer(b.config().clone()),
            FeatureEncoder::Precomputed { dim } => EncoderSpec::Precomputed { dim: *dim },
        };
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder,
            class_names: model.text().class_names().to_vec(),
            text_anchors: model.text().anchors().clone(),
            text_source: model.text().source().clone(),
            model: model.config().clone(),
            loss: model.loss_config().clone(),
            global_seed: model.global_seed(),
            domain_names,
            domains: model.domains().to_vec(),
            bank,
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("checkpoint is serialisable");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(format!("unknown format tag {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: ck.version });
        }
        if ck.domain_names.len() != ck.domains.len() {
            return Err(CheckpointError::Format(format!(
                "{} domain names for {} domains",
                ck.domain_names.len(),
                ck.domains.len()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read(path)?)
    }

    /// Rebuilds the model (backbone weights are re-derived from their seed).
    pub fn restore(&self) -> Result<ContinualModel, CheckpointError> {
        let encoder = match &self.encoder {
            EncoderSpec::Transformer(cfg) => FeatureEncoder::transformer(cfg.clone())?,
            EncoderSpec::Precomputed { dim } => FeatureEncoder::Precomputed { dim: *dim },
        };
        let text = TextAnchorSet::new(
            self.text_anchors.clone(),
            self.class_names.clone(),
            self.text_source.clone(),
        )
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
        Ok(ContinualModel::new(encoder, text, self.model.clone(), self.loss.clone(), self.global_seed)?
            .with_domains(self.domains.clone())?)
    }
}
