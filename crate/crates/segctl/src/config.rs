//! The merged run configuration: a JSON file overlaid with flag values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swinseg::model::ModelConfig;
use swinseg::training::{InferConfig, TrainConfig};

use crate::error::{CliError, Result};

/// Everything a training or inference command needs. Every section may be
/// omitted from the file, in which case its defaults apply.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    /// Dataset manifest.
    pub manifest: Option<PathBuf>,
    /// Starting checkpoint (fine-tuning, resuming, inference).
    pub checkpoint: Option<PathBuf>,
    /// Output run directory.
    pub run_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))
    }

    /// The file at `path`, or defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("run config serializes");
        json.push('\n');
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        }
        std::fs::write(path, json).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.infer.validate(&self.model)?;
        Ok(())
    }
}
