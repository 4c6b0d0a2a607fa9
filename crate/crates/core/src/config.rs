//! Run configuration: every module's settings in one TOML document.
//!
//! Precedence is defaults, then the file, then command-line overrides
//! applied by the caller; [`RunConfig::validate`] runs once everything is
//! merged and before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlation::{SigmaSearchConfig, DEFAULT_CELL, MIN_CELL};
use crate::distortion::SaliencyConfig;
use crate::error::{Error, Result};
use crate::local::LocalConfig;
use crate::losses::LossWeights;
use crate::metrics::BucketMode;
use crate::plane::OptimizerConfig;
use crate::refine::RefineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Correlation cell size in pixels.
    pub cell: usize,
    /// Run the local thin-plate spline stage.
    pub local: bool,
    /// Run photometric refinement of the global homography.
    pub refine_global: bool,
    pub bucket: BucketMode,
    pub sigma: SigmaSearchConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub saliency: SaliencyConfig,
    pub refine: RefineConfig,
    #[serde(rename = "local_tps")]
    pub local_tps: LocalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cell: DEFAULT_CELL,
            local: false,
            refine_global: true,
            bucket: BucketMode::default(),
            sigma: SigmaSearchConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            saliency: SaliencyConfig::default(),
            refine: RefineConfig::default(),
            local_tps: LocalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse TOML; `origin` names the source in diagnostics.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    Error::Config(format!("{origin}: line {line}: {msg}"))
                }
                None => Error::Config(format!("{origin}: {msg}")),
            }
        })
    }

    /// Read a config file. A missing or unreadable file is an I/O error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell < MIN_CELL {
            return Err(Error::Config(format!("cell: must be at least {MIN_CELL}, got {}", self.cell)));
        }
        self.sigma.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.saliency.validate()?;
        self.refine.validate()?;
        self.local_tps.validate()
    }
}
