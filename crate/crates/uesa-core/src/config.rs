//! Flat JSON run configuration.
//!
//! The file is a single flat object mirroring the training-config fields;
//! unknown keys are rejected so typos fail fast. Missing keys take the desk
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::train::{LossKind, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub depth: usize,
    pub base_filters: usize,
    pub th: f64,
    pub input_size: usize,
    pub dropout_rate: f64,
    pub enable_encoder_attention: bool,
    pub enable_decoder_attention: bool,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: String,
    pub val_fraction: f64,
    /// Number of synthetic samples generated when no dataset directory is
    /// given.
    pub samples: usize,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let train = TrainConfig::desk();
        ConfigFile {
            depth: model.depth,
            base_filters: model.base_filters,
            th: model.th,
            input_size: model.input_size,
            dropout_rate: model.dropout_rate,
            enable_encoder_attention: model.enable_encoder_attention,
            enable_decoder_attention: model.enable_decoder_attention,
            seed: model.seed,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            loss: train.loss.to_string(),
            val_fraction: train.val_fraction,
            samples: 200,
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            base_filters: self.base_filters,
            th: self.th,
            input_size: self.input_size,
            dropout_rate: self.dropout_rate,
            enable_encoder_attention: self.enable_encoder_attention,
            enable_decoder_attention: self.enable_decoder_attention,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            model: self.model_config(),
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            loss: self.loss.parse::<LossKind>()?,
            val_fraction: self.val_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ConfigFile::default();
        let parsed = ConfigFile::parse(&cfg.to_json()).unwrap();
        assert_eq!(parsed, cfg);
        assert!(parsed.train_config().is_ok());
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = ConfigFile::parse(r#"{"depth": 2, "epochs": 5}"#).unwrap();
        assert_eq!(cfg.depth, 2);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.base_filters, ConfigFile::default().base_filters);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ConfigFile::parse(r#"{"depht": 2}"#);
        assert!(err.is_err());
    }

    #[test]
    fn bad_loss_name_is_rejected() {
        let cfg = ConfigFile::parse(r#"{"loss": "focal"}"#).unwrap();
        assert!(cfg.train_config().is_err());
    }

    #[test]
    fn invalid_model_geometry_is_rejected() {
        let cfg = ConfigFile::parse(r#"{"input_size": 60}"#).unwrap();
        assert!(cfg.train_config().is_err());
    }
}
