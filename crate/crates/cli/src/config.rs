use std::path::{Path, PathBuf};

use defectscan_core::data::CleanPolicy;
use defectscan_core::trainer::{ArchConfig, TrainConfig};
use defectscan_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a training run depends on. Written back verbatim into the run
/// directory after flag overrides are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Manifest with assigned splits.
    pub manifest: Option<PathBuf>,
    /// Parent directory of run directories.
    pub out_dir: PathBuf,
    /// Seeds initialization, pretraining, augmentation, batching and dropout.
    /// Overrides `train.seed`.
    pub seed: u64,
    /// Bit-stable single-threaded execution. Every kernel is single-threaded,
    /// so the flag is recorded for auditability only.
    pub deterministic: bool,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub clean: CleanPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: PathBuf::from("runs"),
            seed: 0,
            deterministic: false,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            clean: CleanPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Propagates the run seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.arch.validate()?;
        self.train.validate()?;
        self.train.augment.validate()?;
        self.clean.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
