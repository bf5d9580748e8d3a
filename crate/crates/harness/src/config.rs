//! Experiment files.
//!
//! ```json
//! {
//!   "version": 1,
//!   "seeds": [1, 2, 3],
//!   "data": { "spec": { "n_samples": 6000, ... } },
//!   "train": { "selector": "mt-pkdot", ... }
//! }
//! ```
//!
//! `data` is either `{"spec": GenSpec}` (generated on the fly) or
//! `{"dir": "path"}` (an exported dataset). Omitted `train` keys take their
//! defaults; unknown keys anywhere are errors. For every seed `s`, both the
//! generator seed and the training seed are set to `s`, overriding the
//! `seed` fields inside `data.spec` and `train`. A dataset directory keeps the
//! seed it was generated with.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use otdistill_core::synthdata::{generate, Dataset, GenSpec};
use otdistill_core::training::TrainConfig;

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Spec(GenSpec),
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl ExperimentConfig {
    pub fn new(data: DataSource, train: TrainConfig, seeds: Vec<u64>) -> Self {
        Self {
            version: CONFIG_VERSION,
            seeds,
            data,
            train,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let bad = |detail: String| HarnessError::Config {
            path: path.to_path_buf(),
            detail,
        };
        let mut config: Self = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        // Relative dataset paths are relative to the config file.
        if let DataSource::Dir(dir) = &mut config.data {
            if dir.is_relative() {
                if let Some(parent) = path.parent() {
                    *dir = parent.join(&*dir);
                }
            }
        }
        config.validate().map_err(|e| bad(e.to_string()))?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(otdistill_core::Error::from)?;
        fs::write(path, json).map_err(|e| HarnessError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Usage("seeds must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(HarnessError::Usage("seeds contain duplicates".into()));
        }
        self.train.validate()?;
        if let DataSource::Spec(spec) = &self.data {
            spec.validate()?;
            if spec.task != self.train.task {
                return Err(HarnessError::Usage("data.spec.task and train.task differ".into()));
            }
        }
        Ok(())
    }

    /// Training config for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Dataset for one seed.
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        let data = match &self.data {
            DataSource::Spec(spec) => generate(&GenSpec { seed, ..spec.clone() })?,
            DataSource::Dir(dir) => Dataset::import(dir)?,
        };
        if data.task() != self.train.task {
            return Err(HarnessError::Usage("dataset task differs from train.task".into()));
        }
        Ok(data)
    }
}

/// Parses `1,2,3`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| HarnessError::Usage(format!("bad seed {t:?} in --seeds")))
        })
        .collect()
}
