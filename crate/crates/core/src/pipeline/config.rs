//! Training configuration, read from sectioned TOML. Every field has a
//! default, so an empty file is valid.
//!
//! ```toml
//! seed = 0
//!
//! [network]
//! levels = 2
//! base_features = 8
//! input_size = [64, 64]
//!
//! [optimizer]
//! lr = 1e-3
//!
//! [training]
//! epochs = 10
//! batch_size = 1
//!
//! [augmentation]
//! pad_radius = 8
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::architecture::NetworkSpec;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::tensor::AdamConfig;

pub const SEED_ENV: &str = "FUSIONNET_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Cross-validation folds; 1 trains on everything.
    pub folds: usize,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Stop after this many steps even if epochs remain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            batch_size: 1,
            folds: 3,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Eightfold dihedral enrichment before training.
    pub enrich: bool,
    /// Maximum elastic displacement in pixels; 0 disables warping.
    pub elastic_amplitude: f32,
    /// Standard deviation of additive noise; 0 disables it.
    pub noise_sigma: f32,
    /// Mirror padding added around every image.
    pub pad_radius: usize,
    pub shuffle: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enrich: true,
            elastic_amplitude: 10.0,
            noise_sigma: 0.1,
            pad_radius: 64,
            shuffle: true,
        }
    }
}

impl AugmentConfig {
    /// No enrichment, warping, noise or shuffling; padding kept.
    pub fn off(pad_radius: usize) -> Self {
        AugmentConfig {
            enrich: false,
            elastic_amplitude: 0.0,
            noise_sigma: 0.0,
            pad_radius,
            shuffle: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub tta: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { tta: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub network: NetworkSpec,
    pub optimizer: AdamConfig,
    pub training: TrainingConfig,
    pub augmentation: AugmentConfig,
    pub prediction: PredictConfig,
    pub evaluation: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            network: NetworkSpec::default(),
            optimizer: AdamConfig::default(),
            training: TrainingConfig::default(),
            augmentation: AugmentConfig {
                pad_radius: 8,
                ..AugmentConfig::default()
            },
            prediction: PredictConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the
    /// environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, format!("cannot read config: {e}")))?;
        let mut cfg = TrainConfig::from_toml(&text).map_err(|e| Error::file(path, e.to_string()))?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.training.folds == 0 {
            return Err(Error::Config("training.folds must be at least 1".into()));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        let a = &self.augmentation;
        if [a.elastic_amplitude, a.noise_sigma].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Config("augmentation amplitudes must be non-negative".into()));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(Error::Config("optimizer.lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.evaluation.threshold) {
            return Err(Error::Config("evaluation.threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
