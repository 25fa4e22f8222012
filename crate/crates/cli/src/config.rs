//! Run configuration: a TOML file with `[train]`, `[model]` and `[paths]`
//! sections, overridden field by field from the command line.

use std::path::{Path, PathBuf};

use cacnet::training::TrainConfig;
use cacnet::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub paths: Paths,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub input_size: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if o.data.is_some() {
            self.paths.data.clone_from(&o.data);
        }
        if o.splits.is_some() {
            self.paths.splits.clone_from(&o.splits);
        }
        if o.out.is_some() {
            self.paths.out.clone_from(&o.out);
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(epochs) = o.epochs {
            self.train.epochs = epochs;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(lr) = o.learning_rate {
            self.train.learning_rate = lr;
        }
        if let Some(size) = o.input_size {
            self.model.input_size = (size, size);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.model.input_size.0 != self.model.input_size.1 {
            return Err(Error::Config(format!(
                "input_size {:?} must be square",
                self.model.input_size
            )));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.model.input_size.0
    }

    pub fn require(path: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Config(format!("missing required path `{name}` (flag or [paths] entry)")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
