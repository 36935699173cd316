//! Run configuration files: one versioned JSON document naming the model,
//! the dataset, the optimization settings, and optionally an analytic-cost
//! request. Unknown keys are rejected so typos fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const RUN_SPEC_VERSION: u32 = 1;

fn d_width() -> f64 {
    1.0
}

/// Request for an analytic cost table, as embedded in a run config or built
/// from command-line flags. `network` is either a registered family name
/// ("mobilenet_v2") or "file:PATH" pointing at a serialized network table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRequest {
    pub network: String,
    #[serde(default = "d_width")]
    pub width: f64,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spec_version: u32,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostRequest>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spec_version != RUN_SPEC_VERSION {
            return Err(Error::Format(format!(
                "config spec_version {} not supported (expected {RUN_SPEC_VERSION})",
                self.spec_version
            )));
        }
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("unreadable run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
