//! Serialized experiment configuration: one JSON document caught in version
//! control reproduces a run end to end. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{AugmentConfig, GenConfig};
use crate::error::{GcdError, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::{TrainConfig, TrainSettings};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: GenConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: "runs/default".to_string(),
            data: GenConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            model: self.model.clone(),
            augment: self.augment,
            loss: self.loss.clone(),
            train: self.train.clone(),
            seed: self.seed,
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GcdError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_pretty()? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = cfg.to_json_pretty().unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn paper_defaults_are_wired() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.loss.lambda, 0.35);
        assert_eq!(cfg.loss.tau_u, 0.07);
        assert_eq!(cfg.loss.tau_sup, 0.1);
        assert_eq!(cfg.loss.tau_s, 0.1);
        assert_eq!(cfg.loss.lambda_n, 0.1);
        assert_eq!(cfg.loss.lambda_c, 0.3);
        assert_eq!(cfg.train.k_nn, 10);
        assert_eq!(cfg.train.warmup_epochs, 50);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.train.lr0, 0.1);
        assert_eq!(cfg.train.teacher_temp_start, 0.07);
        assert_eq!(cfg.train.teacher_temp_end, 0.04);
        assert_eq!(cfg.train.teacher_temp_warm_epochs, 30);
        assert_eq!(cfg.train.batch_size(), 128);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::default().to_json_pretty().unwrap()).unwrap();
        value["surprise"] = serde_json::json!(1);
        let err = ExperimentConfig::from_json(&value.to_string());
        assert!(err.is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.lambda = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.data.k_old = cfg.data.k_total + 1;
        assert!(cfg.validate().is_err());
    }
}
