use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{BranchKind, BranchSpec, ConvBlock, ModelSpec, TrunkSpec, CROPS_PER_IMAGE};
use crate::nn::SgdConfig;
use crate::pooling::{PoolMode, DEFAULT_LAMBDA};

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synth(SynthSpec),
    Folder {
        root: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        manifest: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: BranchKind,
    pub global_input_size: usize,
    pub local_crop_size: usize,
    pub blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// `average`, `max`, `outlier` or `dynamic_outlier`.
    pub mode: String,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per pooling mode learning rates that replace `learning_rate`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub learning_rate_by_pool: BTreeMap<String, f64>,
    pub momentum: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

/// One training run. Serialized as TOML with `[data]`, `[model]`, `[pool]`
/// and `[train]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pool: PoolConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::Synth(SynthSpec::default()),
            model: ModelConfig {
                kind: BranchKind::MultiRes,
                global_input_size: 32,
                local_crop_size: 32,
                blocks: TrunkSpec::desk().blocks,
            },
            pool: PoolConfig {
                mode: PoolMode::DynamicOutlier {
                    lambda: DEFAULT_LAMBDA,
                }
                .label()
                .into(),
                lambda: DEFAULT_LAMBDA,
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                learning_rate: 0.05,
                learning_rate_by_pool: [("max".to_string(), 0.01), ("outlier".to_string(), 0.01)]
                    .into_iter()
                    .collect(),
                momentum: 0.9,
                seed: 0,
                output_dir: PathBuf::from("runs/default"),
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn pool_mode(&self) -> Result<PoolMode> {
        PoolMode::parse(&self.pool.mode, self.pool.lambda)
    }

    /// Learning rate for the configured pooling mode.
    pub fn learning_rate(&self) -> f64 {
        let label = |m: &str| PoolMode::parse(m, self.pool.lambda).map(|p| p.label());
        let Ok(current) = label(&self.pool.mode) else {
            return self.train.learning_rate;
        };
        self.train
            .learning_rate_by_pool
            .iter()
            .find(|(m, _)| label(m).ok() == Some(current))
            .map_or(self.train.learning_rate, |(_, &lr)| lr)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate(),
            momentum: self.train.momentum,
        }
    }

    pub fn model_spec(&self, num_classes: usize, in_channels: usize) -> Result<ModelSpec> {
        let spec = ModelSpec {
            branch: BranchSpec {
                kind: self.model.kind,
                global_input_size: self.model.global_input_size,
                local_crop_size: self.model.local_crop_size,
                crops_per_image: CROPS_PER_IMAGE,
                pool_mode: self.pool_mode()?,
            },
            trunk: TrunkSpec {
                in_channels,
                blocks: self.model.blocks.clone(),
            },
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataConfig::Synth(s) = &self.data {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
            self.model_spec(s.num_classes, 3)?;
            let needed = match self.model.kind {
                BranchKind::GlobalOnly => self.model.global_input_size,
                BranchKind::LocalOnly => 2 * self.model.local_crop_size,
                BranchKind::MultiRes => self
                    .model
                    .global_input_size
                    .min(2 * self.model.local_crop_size),
            };
            if s.image_size < needed {
                return Err(Error::Config(format!(
                    "synthetic images of {} pixels are smaller than the {needed} the model needs",
                    s.image_size
                )));
            }
        } else {
            self.model_spec(2, 3)?;
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if t.seed > i64::MAX as u64 {
            return Err(Error::Config(
                "seed must fit in a signed 64-bit integer".into(),
            ));
        }
        for (mode, &lr) in &t.learning_rate_by_pool {
            PoolMode::parse(mode, self.pool.lambda)?;
            SgdConfig {
                learning_rate: lr,
                momentum: t.momentum,
            }
            .validate()?;
        }
        self.sgd().validate()
    }

    /// Stable hash of everything that defines an experiment cell: the
    /// canonical serialization with the seed and output directory cleared,
    /// so replicate seeds of one cell share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.train.seed = 0;
        c.train.output_dir = PathBuf::new();
        if let DataConfig::Synth(s) = &mut c.data {
            s.seed = 0;
        }
        let canonical = serde_json::to_string(&c).expect("config is serializable");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    /// Copy with another seed; the synthetic data seed follows the run seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        if let DataConfig::Synth(s) = &mut c.data {
            s.seed = seed;
        }
        c
    }
}
