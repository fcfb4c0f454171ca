//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, FEAT_DIM};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::optim::{AdamConfig, TrainSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    /// 1-based layer whose frame outputs feed the phone-state head.
    pub tap_layer: usize,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden: 128,
            input_dim: FEAT_DIM,
            tap_layer: 1,
            clip_norm: None,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, num_classes: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            hidden: self.hidden,
            input_dim: self.input_dim,
            num_classes,
            tap_layer: self.tap_layer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    /// Corpus generation and triplet sampling.
    pub data: u64,
    pub enroll: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            shuffle: 2,
            data: 3,
            enroll: 4,
        }
    }
}

/// Fallback input paths for commands whose positional paths are omitted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub schedule: TrainSchedule,
    pub corpus: CorpusConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.input_dim != FEAT_DIM {
            return Err(Error::config(
                "model.input_dim",
                format!("corpus frames are {FEAT_DIM}-dimensional"),
            ));
        }
        if let Some(c) = self.model.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("model.clip_norm", "must be positive"));
            }
        }
        self.model.encoder_config(self.corpus.num_classes()).validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.corpus.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.hidden, 128);
        assert_eq!(c.model.num_layers, 2);
        assert_eq!(c.loss.lambda, 0.1);
        assert_eq!(c.schedule.epochs, 40);
        assert_eq!(c.schedule.batch_size, 128);
        assert_eq!(c.optimizer.learning_rate, 0.0005);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.loss.lambda = 0.3;
        c.model.clip_norm = Some(5.0);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::from_json(r#"{"loss": {"lamda": 0.2}}"#).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "loss.lamda"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn out_of_range_value_names_its_key() {
        let err = RunConfig::from_json(r#"{"loss": {"lambda": 1.5}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "loss.lambda"), "{err}");
        let err = RunConfig::from_json(r#"{"model": {"tap_layer": 3}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "model.tap_layer"), "{err}");
    }
}
