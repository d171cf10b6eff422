//! JSON checkpoints: parameters plus the metadata needed to resume or
//! evaluate a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PolicyConfig, PolicyParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Training stage that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Freshly initialized, never trained.
    Init,
    /// After supervised fine-tuning.
    Sft,
    /// After group-relative reinforcement fine-tuning.
    Dft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub phase: Phase,
    /// Hex digest of the run configuration that produced this checkpoint.
    pub config_hash: String,
    /// Optimizer steps taken in the phase that wrote this checkpoint.
    pub step: u64,
    pub policy: PolicyConfig,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(phase: Phase, config_hash: impl Into<String>, step: u64, params: &PolicyParams) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            phase,
            config_hash: config_hash.into(),
            step,
            policy: *params.config(),
            params: params.values().to_vec(),
        }
    }

    pub fn to_params(&self) -> Result<PolicyParams> {
        self.validate()?;
        PolicyParams::from_values(self.policy, self.params.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.policy.validate()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ck.validate()?;
        Ok(ck)
    }
}
