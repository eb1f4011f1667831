//! Nested key-value run configuration (TOML): `model.*`, `data.*`,
//! `train.*`. Every field has a default; CLI flags override file values.

use crate::data::SplitStrategy;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PatchConfig};
use crate::numerics::DType;
use crate::polyops::PolyVariant;
use crate::sscan::ScanMode;
use crate::pipeline::TrainConfig;
use std::path::Path;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Channel count; inferred from the data when absent.
    pub channels: Option<usize>,
    pub d_model: usize,
    pub d_state: usize,
    pub layers: usize,
    pub d_inner: usize,
    pub horizon: usize,
    pub dropout: f64,
    pub patch_len: usize,
    pub stride: usize,
    pub lookback: usize,
    pub variant: PolyVariant,
    pub instance_norm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            channels: None,
            d_model: 16,
            d_state: 8,
            layers: 2,
            d_inner: 32,
            horizon: 96,
            dropout: 0.1,
            patch_len: 16,
            stride: 8,
            lookback: 96,
            variant: PolyVariant::Full,
            instance_norm: true,
        }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<String>,
    pub splits: SplitStrategy,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub precision: DType,
    pub scan: ScanMode,
    pub threads: usize,
    pub max_steps_per_epoch: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            epochs: 10,
            batch_size: 32,
            patience: 3,
            seed: 0,
            precision: DType::F32,
            scan: ScanMode::Parallel,
            threads: 0,
            max_steps_per_epoch: None,
        }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
    }

    /// Resolves the model config against the dataset's channel count.
    pub fn model_config(&self, data_channels: usize) -> Result<ModelConfig> {
        if let Some(c) = self.model.channels {
            if c != data_channels {
                return Err(Error::Config(format!(
                    "config says {c} channels but the data has {data_channels}"
                )));
            }
        }
        let cfg = ModelConfig {
            channels: data_channels,
            d_model: self.model.d_model,
            d_state: self.model.d_state,
            layers: self.model.layers,
            d_inner: self.model.d_inner,
            horizon: self.model.horizon,
            dropout: self.model.dropout,
            patch: PatchConfig {
                patch_len: self.model.patch_len,
                stride: self.model.stride,
                lookback: self.model.lookback,
            },
            variant: self.model.variant,
            instance_norm: self.model.instance_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            patience: self.train.patience,
            seed: self.train.seed,
            precision: self.train.precision,
            scan: self.train.scan,
            max_steps_per_epoch: self.train.max_steps_per_epoch,
        }
    }
}
