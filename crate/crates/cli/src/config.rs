use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use moetune::lora::LoraConfig;
use moetune::train::TrainConfig;
use moetune::ModelConfig;

/// Bad invocation or unreadable configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Contents of `--model-config`. Missing blocks fall back to defaults,
/// missing fields inside a block to that block's defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<ModelConfig>,
    pub lora: Option<LoraConfig>,
    pub train: Option<TrainConfig>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }
}
