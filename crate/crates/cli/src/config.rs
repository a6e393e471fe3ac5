use std::path::{Path, PathBuf};

use aia_core::model::ModelConfig;
use aia_core::train::TrainConfig;
use aia_core::world::WorldConfig;
use serde::{Deserialize, Serialize};

/// A usage or configuration problem; the process exits with status 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_amu_windows")]
    pub amu_windows: Vec<usize>,
    #[serde(default = "default_joint_windows")]
    pub joint_windows: Vec<usize>,
}

fn default_amu_windows() -> Vec<usize> {
    vec![1, 5, 15, 30]
}

fn default_joint_windows() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            amu_windows: default_amu_windows(),
            joint_windows: default_joint_windows(),
        }
    }
}

/// Everything a run needs. The top-level seed drives data, init and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        if let Some(dir) = output_dir {
            config.output_dir = dir;
        }
        config.world.seed = config.seed;
        config.trainer.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: aia_core::Error| ConfigError(e.to_string());
        self.world.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.trainer.validate().map_err(wrap)?;
        if self.model.d_in != self.world.d_in {
            return Err(ConfigError(format!(
                "model.d_in {} does not match world.d_in {}",
                self.model.d_in, self.world.d_in
            )));
        }
        Ok(())
    }
}
