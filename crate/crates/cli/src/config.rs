//! Run configuration: one JSON document holding the model, training
//! protocol, data location, output directory, and seed. Unknown keys are
//! rejected so typos fail loudly instead of silently using defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use usvid_core::model::{ModelSpec, TemporalModelConfig};
use usvid_core::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    /// Companion config for the factorized baseline in model sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_model: Option<TemporalModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Master seed; overrides `train.seed`.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        // manifest paths are relative to the config file's directory
        if cfg.data.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.manifest = dir.join(&cfg.data.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(t) = &self.temporal_model {
            t.validate()?;
        }
        self.train.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            bail!("output_dir must not be empty");
        }
        Ok(())
    }
}
