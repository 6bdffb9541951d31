//! Run configuration: one JSON file describing data, model, optimizer and outputs.

use std::fs;
use std::path::{Path, PathBuf};

use glre::model::{Ablation, ModelConfig};
use glre::trainer::TrainConfig;
use glre::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    /// DocRED JSON arrays.
    Docred,
    /// BioCreative CDR PubTator files.
    Cdr,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Train on train, select the epoch on dev.
    #[default]
    Train,
    /// As `train`, then retrain on train + dev up to the selected epoch.
    TrainDev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Relation inventory: a JSON array of names or an object keyed by name.
    #[serde(default)]
    pub relations: Option<PathBuf>,
    /// Directory of precomputed word states, for the `precomputed-file` encoder.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub paths: DataPaths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    pub output_dir: PathBuf,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub protocol: Option<Protocol>,
    pub ablations: Vec<Ablation>,
    pub threshold: Option<f64>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn default_for(dataset: Dataset) -> Self {
        match dataset {
            Dataset::Docred => RunConfig {
                dataset,
                paths: DataPaths {
                    train: "data/docred/train_annotated.json".into(),
                    dev: Some("data/docred/dev.json".into()),
                    test: Some("data/docred/test.json".into()),
                    relations: Some("data/docred/rel_info.json".into()),
                    embeddings: None,
                },
                model: ModelConfig::docred(),
                train: TrainConfig::default(),
                protocol: Protocol::Train,
                ablations: vec![],
                output_dir: "runs/docred".into(),
            },
            Dataset::Cdr => RunConfig {
                dataset,
                paths: DataPaths {
                    train: "data/cdr/CDR_TrainingSet.PubTator.txt".into(),
                    dev: Some("data/cdr/CDR_DevelopmentSet.PubTator.txt".into()),
                    test: Some("data/cdr/CDR_TestSet.PubTator.txt".into()),
                    relations: None,
                    embeddings: None,
                },
                model: ModelConfig::cdr(),
                train: TrainConfig::default(),
                protocol: Protocol::TrainDev,
                ablations: vec![],
                output_dir: "runs/cdr".into(),
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize") + "\n"
    }

    /// Applies overrides and folds the ablation list into the model flags, so
    /// the result can be written out and reloaded to the same run.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            self.train.seed = seed;
        }
        if let Some(p) = overrides.protocol {
            self.protocol = p;
        }
        if let Some(t) = overrides.threshold {
            self.model.threshold = t;
        }
        if let Some(out) = &overrides.output_dir {
            self.output_dir = out.clone();
        }
        self.ablations.extend(overrides.ablations.iter().copied());
        self.ablations.sort();
        self.ablations.dedup();
        for &a in &self.ablations {
            self.model = self.model.with_ablation(a);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.protocol == Protocol::TrainDev && self.paths.dev.is_none() {
            return Err(Error::Config("protocol train-dev needs paths.dev".into()));
        }
        if self.model.encoder_kind == glre::encoder::EncoderKind::PrecomputedFile && self.paths.embeddings.is_none() {
            return Err(Error::Config("the precomputed-file encoder needs paths.embeddings".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// Every raw input the config names must exist.
    pub fn check_inputs_exist(&self) -> Result<()> {
        let p = &self.paths;
        let named = [Some(&p.train), p.dev.as_ref(), p.test.as_ref(), p.relations.as_ref(), p.embeddings.as_ref()];
        for path in named.into_iter().flatten() {
            if !path.exists() {
                return Err(Error::Config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults_round_trip() {
        for d in [Dataset::Docred, Dataset::Cdr] {
            let c = RunConfig::default_for(d);
            c.validate().unwrap();
            assert_eq!(serde_json::from_str::<RunConfig>(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn train_dev_without_dev_path_is_rejected() {
        let mut c = RunConfig::default_for(Dataset::Docred);
        c.paths.dev = None;
        assert!(c.clone().resolve(&Overrides::default()).is_ok());
        let o = Overrides {
            protocol: Some(Protocol::TrainDev),
            ..Default::default()
        };
        assert!(matches!(c.resolve(&o), Err(Error::Config(_))));
    }

    #[test]
    fn resolution_is_idempotent() {
        let o = Overrides {
            seed: Some(9),
            ablations: vec![Ablation::NoContext, Ablation::NoLocal, Ablation::NoContext],
            threshold: Some(0.3),
            ..Default::default()
        };
        let once = RunConfig::default_for(Dataset::Cdr).resolve(&o).unwrap();
        assert_eq!(once.ablations, vec![Ablation::NoLocal, Ablation::NoContext]);
        assert!(!once.model.use_context && !once.model.use_local);
        assert_eq!(once.train.seed, 9);
        let again = once.clone().resolve(&Overrides::default()).unwrap();
        assert_eq!(again, once);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default_for(Dataset::Cdr).to_json()).unwrap();
        v["epochs"] = 3.into();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }
}
