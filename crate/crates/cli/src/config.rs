//! JSON run configuration for `opunet train` and `opunet info`.

use std::fs;
use std::path::{Path, PathBuf};

use opunet::{OpUNetConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and the per-epoch shuffle.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: OpUNetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    /// Resample patches to `model.input_size` instead of rejecting other sizes.
    #[serde(default)]
    pub resize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: "model.opun".into(),
            log: "train.log".into(),
        }
    }
}

impl RunConfig {
    /// Parse and validate; relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(data) = &mut config.data {
            data.train_manifest = base.join(&data.train_manifest);
            data.val_manifest = base.join(&data.val_manifest);
        }
        config.output.checkpoint = base.join(&config.output.checkpoint);
        config.output.log = base.join(&config.output.log);
        config.train.seed = config.seed;
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }
}
