//! Run configuration: one TOML file covering every pipeline stage.

use std::path::Path;

use anyhow::{bail, Context, Result};
use endotrack::annotate::{AnnotationConfig, DatasetOptions};
use endotrack::eval::EvalContext;
use endotrack::format::Instruction;
use endotrack::policy::PolicyConfig;
use endotrack::seed;
use endotrack::sim::{KinematicsConfig, NoiseConfig, Task};
use endotrack::trainer::{GrpoConfig, SftConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Scene pool and labeling settings for dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    pub tasks: Vec<Task>,
    pub cc_markers: usize,
    pub episode_budget: usize,
    pub split_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 500,
            tasks: vec![Task::Pp, Task::Ar, Task::Cc],
            cc_markers: 8,
            episode_budget: DatasetOptions::default().episode_budget,
            split_frac: DatasetOptions::default().split_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pp_ar_trials: usize,
    pub pp_ar_budget: usize,
    pub cc_trials: usize,
    pub cc_budget: usize,
    pub cc_markers: usize,
    pub general_trials: usize,
    pub general_budget: usize,
    /// Output variant the policy controller is prompted for.
    pub instruction: Instruction,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pp_ar_trials: 30,
            pp_ar_budget: 30,
            cc_trials: 10,
            cc_budget: 200,
            cc_markers: 8,
            general_trials: 10,
            general_budget: 200,
            instruction: Instruction::Ib,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Outer GRPO iterations; `--steps` overrides.
    pub grpo_steps: u64,
    pub kinematics: KinematicsConfig,
    pub noise: NoiseConfig,
    pub annotation: AnnotationConfig,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            grpo_steps: 200,
            kinematics: KinematicsConfig::default(),
            noise: NoiseConfig::default(),
            annotation: AnnotationConfig::default(),
            data: DataConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Stream identifiers for seeds derived from the master seed.
mod stream {
    pub const SCENES: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SFT: u64 = 4;
    pub const GRPO: u64 = 5;
    pub const EVAL: u64 = 6;
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Loads `path`, or the defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.kinematics.validate()?;
        self.annotation.validate()?;
        self.policy.validate()?;
        self.sft.validate()?;
        self.grpo.validate()?;
        if self.annotation.image_center != self.kinematics.center {
            bail!("annotation.image_center must equal kinematics.center");
        }
        if self.data.tasks.is_empty() {
            bail!("data.tasks must not be empty");
        }
        if self.data.tasks.contains(&Task::GeneralSeq) {
            bail!("data.tasks: GENERAL_SEQ scenes are evaluation-only");
        }
        if self.policy.grid as u32 > self.kinematics.image_size {
            bail!("policy.grid must not exceed kinematics.image_size");
        }
        if self.eval.pp_ar_budget == 0 || self.eval.cc_budget == 0 || self.eval.general_budget == 0 {
            bail!("eval budgets must be >= 1");
        }
        Ok(())
    }

    /// SHA-256 of the configuration's canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn derived_seed(&self, stream: u64) -> u64 {
        seed::derive(self.seed, stream)
    }

    pub fn scene_seed(&self) -> u64 {
        self.derived_seed(stream::SCENES)
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            episode_budget: self.data.episode_budget,
            split_frac: self.data.split_frac,
            seed: self.derived_seed(stream::SPLIT),
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.derived_seed(stream::INIT)
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            seed: self.derived_seed(stream::SFT),
            ..self.sft
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            seed: self.derived_seed(stream::GRPO),
            ..self.grpo.clone()
        }
    }

    pub fn eval_context(&self) -> EvalContext {
        EvalContext {
            kin: self.kinematics.clone(),
            noise: self.noise,
            annotation: self.annotation,
            rewards: self.grpo.rewards,
            seed: self.derived_seed(stream::EVAL),
            config_hash: self.hash(),
        }
    }
}
