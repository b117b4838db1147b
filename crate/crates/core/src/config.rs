//! Run configuration: one TOML file with a section per stage.
//!
//! ```toml
//! seed = 7            # optional; overrides every section seed
//! [synth]
//! image_height = 64
//! [train]
//! epochs = 300
//! ```
//!
//! Unknown keys are rejected. Missing keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptConfig;
use crate::densitymap::KernelConfig;
use crate::error::{Error, Result};
use crate::source_training::TrainConfig;
use crate::synthgen::{ShiftConfig, SynthConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub shift: ShiftConfig,
    pub kernel: KernelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub paths: PathsConfig,
}

/// Default locations used when a command is not given explicit paths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Derives every section seed from one base seed. The shift stream is
    /// offset so it never coincides with the generator stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.shift.seed = seed.wrapping_add(1_000_003);
        self.train.seed = seed;
        self.adapt.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.shift.validate()?;
        self.kernel.validate()?;
        self.train.validate()?;
        self.adapt.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }
}
