//! Versioned JSON checkpoints holding parameters and everything needed to rebuild the model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ToyVocabulary;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub relations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<ToyVocabulary>,
    /// Epoch the parameters come from; `None` for untrained parameters.
    #[serde(default)]
    pub epoch: Option<usize>,
    pub params: ParamStore,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        relations: Vec<String>,
        vocab: Option<ToyVocabulary>,
        epoch: Option<usize>,
        params: ParamStore,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config,
            relations,
            vocab,
            epoch,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        match probe.format_version {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint format {v}, this build reads {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(Error::Checkpoint("checkpoint has no format_version".into())),
        }
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.relations.len() != ck.config.num_relations {
            return Err(Error::Checkpoint(format!(
                "{} relation names for {} configured relations",
                ck.relations.len(),
                ck.config.num_relations
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
