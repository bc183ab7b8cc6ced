//! The JSON run configuration consumed by the `comba` binary.
//!
//! A config file is one JSON object with a mandatory `version` and optional
//! `model`, `task`, `train`, and `bench` sections. Parsing is strict:
//! unknown keys anywhere are rejected, so a typo fails loudly instead of
//! silently running defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use comba_core::bench::BenchCase;
use comba_core::model::ModelConfig;
use comba_core::tasks::{MqarConfig, TrainConfig};
use comba_core::{KernelError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Config format version; must be 1.
    #[serde(default = "default_version")]
    pub version: u32,
    pub model: Option<ModelConfig>,
    pub task: Option<MqarConfig>,
    pub train: Option<TrainConfig>,
    pub bench: Option<Vec<BenchCase>>,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| KernelError::format("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| KernelError::io(format!("run config {}", path.display()), e))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(KernelError::format(
                "run config",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        if let Some(model) = &self.model {
            model.validate()?;
        }
        if let Some(task) = &self.task {
            task.validate()?;
        }
        if let Some(train) = &self.train {
            train.validate()?;
        }
        if let Some(bench) = &self.bench {
            for case in bench {
                case.validate()?;
            }
        }
        Ok(())
    }

    /// The section for training runs, or a clear error naming what's missing.
    pub fn require_training(&self) -> Result<(&ModelConfig, &MqarConfig, &TrainConfig)> {
        let missing = |name| {
            KernelError::format("run config", format!("training needs a {name:?} section"))
        };
        Ok((
            self.model.as_ref().ok_or_else(|| missing("model"))?,
            self.task.as_ref().ok_or_else(|| missing("task"))?,
            self.train.as_ref().ok_or_else(|| missing("train"))?,
        ))
    }
}
