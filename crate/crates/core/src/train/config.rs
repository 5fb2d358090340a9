use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;

/// Adam hyperparameters. The learning rate default is `1e-3`; the moment
/// decay rates and epsilon are the usual `0.9`, `0.999`, `1e-8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Everything needed to reproduce a training run. Serialized as TOML:
///
/// ```toml
/// epochs = 30
/// init_seed = 0
/// train_split = "train"
/// epoch_partition = false
///
/// [model]     # variant, feature dims, encoder widths, embed_dim, normalize
/// [loss]      # kind, margin, ranking_margin, neighbor_radius, symmetric
/// [sampler]   # videos_per_batch, clips_per_video, clip_length_s, seed
/// [optimizer] # learning_rate, beta1, beta2, epsilon
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    /// Manifest split used for training; all videos when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_split: Option<String>,
    /// When set, each epoch visits every video once (shuffled, split into
    /// consecutive batches). Otherwise every batch draws its videos
    /// independently.
    pub epoch_partition: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            init_seed: 0,
            train_split: Some("train".into()),
            epoch_partition: false,
            checkpoint_path: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0)
        {
            return Err(Error::InvalidConfig("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Layers defaults, then `flags`, then `file`: a key set in the config
    /// file wins over the same key given as a flag.
    pub fn resolve(flags: &toml::Table, file: Option<&toml::Table>) -> Result<Self> {
        let mut merged = toml::Table::try_from(TrainConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_table(&mut merged, flags);
        if let Some(file) = file {
            merge_table(&mut merged, file);
        }
        let cfg: TrainConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::resolve(&toml::Table::new(), Some(&table))
    }
}

/// Recursively overlays `overlay` onto `base`.
pub fn merge_table(base: &mut toml::Table, overlay: &toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_table(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}
