//! Run configuration shared by every command.
//!
//! One TOML file with a section per stage. Missing sections and keys take
//! their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::trainer::TrainConfig;
use crate::worldgen::ScenarioConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Number of sequences.
    pub count: usize,
    /// Seed of the first sequence; sequence `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { count: 200, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    /// Belief values above this are drawn.
    pub threshold: f64,
    /// Output pixels per frame pixel.
    pub scale: usize,
    /// Only the first `limit` sequences are rendered.
    pub limit: Option<usize>,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            threshold: 0.02,
            scale: 8,
            limit: Some(4),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: ScenarioConfig,
    pub generate: GenerateConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub viz: VizConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        if self.viz.scale == 0 {
            return Err(Error::Config("viz.scale must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `--seed` to the stages that consume randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generate.seed = seed;
        self.train.seed = seed;
        self.model.seed = seed;
        self
    }
}
