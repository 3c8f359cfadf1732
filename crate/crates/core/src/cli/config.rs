use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSchema;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};

/// Split sizes for generated corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self {
            train: 4000,
            dev: 500,
            test: 500,
        }
    }
}

impl DataSizes {
    pub fn as_array(&self) -> [usize; 3] {
        [self.train, self.dev, self.test]
    }
}

/// Everything a run can be configured with. Every field has a default and
/// unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives model initialization, shuffling, sampling and data generation.
    /// When absent, the model section's seed is used.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schema: SyntheticSchema,
    pub data: DataSizes,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|_| Error::MissingFile(p.display().to_string()))?;
                Self::parse(&text)
            }
        }
    }

    /// Applies a command-line seed and propagates the effective seed into the
    /// model section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        let effective = seed.or(self.seed).unwrap_or(self.model.seed);
        self.seed = Some(effective);
        self.model.seed = effective;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.model.seed)
    }
}
