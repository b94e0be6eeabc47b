//! Pipeline configuration, read from JSON. Every field has a default, so
//! `{}` is a complete config; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Augment, BlobSpec, Normalization};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::evosearch::SearchConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub meta: MetaConfig,
    /// Full training schedule, used for final and baseline training.
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Applied to CIFAR-10 pixels after scaling to `[0, 1]`.
    pub normalization: Normalization,
    /// Synthetic training set used for `--data synth`.
    pub synth: BlobSpec,
    /// Per-class size of the synthetic test set.
    pub synth_test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            normalization: Normalization::default(),
            synth: BlobSpec::default(),
            synth_test_per_class: 50,
        }
    }
}

/// Meta-training schedule. `epochs: None` means a quarter of the full
/// training epochs (rounded up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: Augment,
}

impl Default for MetaConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        MetaConfig {
            epochs: None,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            augment: t.augment,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        for (what, t) in [("train", &self.train), ("meta", &self.meta_train())] {
            if t.batch_size == 0 || !t.lr.is_finite() || t.lr <= 0.0 || t.momentum < 0.0 || t.weight_decay < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{what}: batch_size must be >= 1, lr > 0, momentum and weight_decay >= 0"
                )));
            }
        }
        if self.eval.calib_batch == 0 || self.eval.calib_images == Some(0) {
            return Err(Error::InvalidArgument("eval: calibration sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// The meta-training schedule as a concrete training config.
    pub fn meta_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.meta.epochs.unwrap_or(self.train.epochs.div_ceil(4)),
            batch_size: self.meta.batch_size,
            lr: self.meta.lr,
            momentum: self.meta.momentum,
            weight_decay: self.meta.weight_decay,
            augment: self.meta.augment,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
    }

    #[test]
    fn meta_epochs_quarter_of_training() {
        let c = Config::from_json(r#"{"train": {"epochs": 40}}"#).unwrap();
        assert_eq!(c.meta_train().epochs, 10);
        let c = Config::from_json(r#"{"train": {"epochs": 10}, "meta": {"lr": 0.2}}"#).unwrap();
        assert_eq!(c.meta_train().epochs, 3);
        assert_eq!(c.meta_train().lr, 0.2);
        let c = Config::from_json(r#"{"meta": {"epochs": 0}}"#).unwrap();
        assert_eq!(c.meta_train().epochs, 0);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(Config::from_json(r#"{"trian": {}}"#).is_err());
        assert!(Config::from_json(r#"{"search": {"pop": 3}}"#).is_err());
        assert!(Config::from_json(r#"{"search": {"top_k": 200}}"#).is_err());
        assert!(Config::from_json(r#"{"train": {"lr": 0}}"#).is_err());
        assert!(Config::from_json(r#"{"train": {"augment": "pad4crop"}}"#).is_ok());
    }
}
