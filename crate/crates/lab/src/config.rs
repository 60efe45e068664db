//! Experiment configuration, read from JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use ltlab_core::data::{LongTailProfile, SynthParams, DEFAULT_T_FEW, DEFAULT_T_MANY};
use ltlab_core::model::ModelConfig;
use ltlab_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generate a synthetic long-tailed dataset.
    Synth {
        profile: LongTailProfile,
        #[serde(default)]
        params: SynthParams,
        #[serde(default)]
        seed: u64,
    },
    /// Read an LTDS file holding train, val and test splits. Relative paths
    /// are taken from the directory of the config file.
    File { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth {
            profile: LongTailProfile {
                num_classes: 10,
                n_max: 500,
                imbalance_factor: 100.0,
            },
            params: SynthParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    pub t_many: usize,
    pub t_few: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            t_many: DEFAULT_T_MANY,
            t_few: DEFAULT_T_FEW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grouping: GroupingConfig,
    /// Seeds model initialization and sample order.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Checkpoint whose frozen backbone weights replace the random initialization.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grouping: GroupingConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/run"),
            init_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = fsio::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSource::File { path: p } = &mut cfg.dataset {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut cfg.init_checkpoint {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.grouping.t_few < 1 || self.grouping.t_many <= self.grouping.t_few {
            return Err(LabError::Config(format!(
                "grouping needs t_many > t_few >= 1, got {} / {}",
                self.grouping.t_many, self.grouping.t_few
            )));
        }
        match &self.dataset {
            DatasetSource::Synth { profile, params, .. } => {
                profile.validate()?;
                if params.image_size != self.model.vit.image_size || params.channels != self.model.vit.channels {
                    return Err(LabError::Config(format!(
                        "synthetic images {}x{}x{} do not match the backbone's {}x{}x{}",
                        params.image_size,
                        params.image_size,
                        params.channels,
                        self.model.vit.image_size,
                        self.model.vit.image_size,
                        self.model.vit.channels
                    )));
                }
            }
            DatasetSource::File { path } => {
                if !path.exists() {
                    return Err(LabError::Config(format!("dataset {} does not exist", path.display())));
                }
            }
        }
        if let Some(p) = &self.init_checkpoint {
            if !p.exists() {
                return Err(LabError::Config(format!("init checkpoint {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = ExperimentConfig::default();
        let s = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"seeed": 1}"#,
            r#"{"train": {"epochs": 1, "lr": 0.1}}"#,
            r#"{"model": {"head": {"kind": "scilt", "fusoin": false}}}"#,
            r#"{"dataset": {"source": "file", "path": "x", "extra": 1}}"#,
        ] {
            assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err(), "{bad}");
        }
        let ok: ExperimentConfig =
            serde_json::from_str(r#"{"model": {"head": {"kind": "single", "loss": {"kind": "focal"}}}}"#).unwrap();
        assert!(matches!(ok.model.head, ltlab_core::model::HeadConfig::Single(_)));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.vit.image_size = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.grouping.t_few = 200;
        assert!(cfg.validate().is_err());
    }
}
