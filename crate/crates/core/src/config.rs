//! Run configuration file (JSON).
//!
//! ```json
//! {
//!   "schema": 1,
//!   "seed": 0,
//!   "data": { "synthetic": { "num_classes": 8, ... } },
//!   "loss": { "name": "triplet", ... },
//!   "train": { "epochs": 100, ... },
//!   "eval": { "ks": [1, 2, 4], "metric": "cosine" },
//!   "language": null,
//!   "output_dir": "out"
//! }
//! ```
//!
//! Every section is optional. Unknown keys are rejected. Training fields
//! whose defaults depend on the loss (learning rate, batch size, sampler)
//! stay unset until [`RunConfig::resolve`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, Sampler, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::EvalMetric;
use crate::io::read_dataset;
use crate::trainer::{EncoderMode, LanguageConfig, LossConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "METRIC_FORGE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Path(p) => read_dataset(p),
            DataSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub proxy_learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub sampler: Option<Sampler>,
    pub encoder_mode: EncoderMode,
    pub embedding_dim: usize,
    pub normalize_embeddings: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: None,
            proxy_learning_rate: None,
            epochs: t.epochs,
            batch_size: None,
            sampler: None,
            encoder_mode: t.encoder_mode,
            embedding_dim: t.embedding_dim,
            normalize_embeddings: t.normalize_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub metric: EvalMetric,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4],
            metric: EvalMetric::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: u32,
    pub seed: Option<u64>,
    pub data: DataSource,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub language: Option<LanguageConfig>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            seed: None,
            data: DataSource::default(),
            loss: LossConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            language: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        if cfg.schema != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file. Relative data and label-table paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.to_path_buf(),
                line: j.line(),
                message: j.to_string(),
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataSource::Path(p) = &mut cfg.data {
            *p = base.join(&*p);
        }
        if let Some(t) = cfg.language.as_mut().and_then(|l| l.table.as_mut()) {
            *t = base.join(&*t);
        }
        Ok(cfg)
    }

    /// Fills every loss-dependent default and the seed. The seed falls back
    /// to `METRIC_FORGE_SEED`, then 0.
    pub fn resolve(mut self) -> Result<Self> {
        let preset = TrainConfig::for_loss(self.loss.name);
        self.train.learning_rate.get_or_insert(preset.learning_rate);
        self.train.batch_size.get_or_insert(preset.batch_size);
        self.train.sampler.get_or_insert(preset.sampler);
        if self.train.proxy_learning_rate.is_none() && self.loss.name.uses_proxies() {
            self.train.proxy_learning_rate = Some(10.0 * self.train.learning_rate.unwrap_or_default());
        }
        if self.seed.is_none() {
            self.seed = Some(seed_from_env()?);
        }
        Ok(self)
    }

    /// Trainer settings. Call on a resolved config.
    pub fn to_train_config(&self) -> TrainConfig {
        let preset = TrainConfig::for_loss(self.loss.name);
        TrainConfig {
            loss: self.loss,
            learning_rate: self.train.learning_rate.unwrap_or(preset.learning_rate),
            proxy_learning_rate: self.train.proxy_learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size.unwrap_or(preset.batch_size),
            seed: self.seed.unwrap_or(0),
            encoder_mode: self.train.encoder_mode,
            embedding_dim: self.train.embedding_dim,
            normalize_embeddings: self.train.normalize_embeddings,
            sampler: self.train.sampler.unwrap_or(preset.sampler),
            language: self.language.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn seed_from_env() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(0),
    }
}
