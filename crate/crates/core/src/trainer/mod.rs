//! Two-phase fine-tuning: teacher-forced supervised training followed by
//! group-relative policy optimization with a clipped surrogate and a KL
//! penalty.

mod grpo;
mod optim;
mod sft;

pub use grpo::{
    clipped_surrogate, compute_advantages, grpo_objective, grpo_train, AdvantageNorm, GroupBatch, GrpoConfig, GrpoLogRecord, GrpoOutcome,
    KlReference, ObjectiveDiagnostics,
};
pub use optim::AdamW;
pub use sft::{sft_step, sft_train, SftConfig, SftLogRecord, SftOutcome};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::LabeledSample;
use crate::error::{Error, Result};
use crate::format::{parse, TokenSequence};
use crate::policy::{featurize, greedy, FeatureVector, PolicyParams};
use crate::rewards::{total_reward, RewardWeights};
use crate::sim::{render, KinematicsConfig, NoiseConfig, Scene};

/// A labeled sample together with the features of its rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub sample: LabeledSample,
    pub features: FeatureVector,
    pub target: TokenSequence,
}

/// Re-renders every sample's frame from its scene and featurizes it.
///
/// Rendering uses the sample's recorded motor state and render seed, so the
/// features are exactly those of the frame the label was made on.
pub fn build_prompts(
    scenes: &[Scene],
    samples: &[LabeledSample],
    kin: &KinematicsConfig,
    noise: &NoiseConfig,
    grid: usize,
) -> Result<Vec<Prompt>> {
    let by_id: std::collections::HashMap<u64, &Scene> = scenes.iter().map(|s| (s.id, s)).collect();
    samples
        .par_iter()
        .map(|s| {
            let scene = by_id
                .get(&s.frame.scene_id)
                .ok_or_else(|| Error::Scene(format!("sample references unknown scene {}", s.frame.scene_id)))?;
            let frame = render(scene, s.frame.theta, kin, noise, s.frame.render_seed)?;
            Ok(Prompt {
                features: featurize(&frame, s.task, s.instruction, grid),
                target: s.tokens()?,
                sample: s.clone(),
            })
        })
        .collect()
}

/// Greedy-decoding quality of a policy on a prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptMetrics {
    pub prompts: usize,
    /// Fraction of outputs that parse under the strict grammar.
    pub format_rate: f64,
    /// Fraction of outputs whose parsed action equals the label.
    pub action_accuracy: f64,
    /// Mean IoU over parseable outputs that carry a box.
    pub mean_iou: f64,
    pub mean_reward: f64,
}

pub fn evaluate_prompts(params: &PolicyParams, prompts: &[Prompt], weights: &RewardWeights, image_size: u32) -> PromptMetrics {
    if prompts.is_empty() {
        return PromptMetrics::default();
    }
    let rows: Vec<(bool, bool, Option<f64>, f64)> = prompts
        .par_iter()
        .map(|p| {
            let out = greedy(params, &p.features);
            let r = total_reward(&out.tokens, &p.sample, weights, image_size);
            match parse(&out.tokens, p.sample.instruction, image_size) {
                Ok(parsed) => (true, parsed.action == p.sample.action, parsed.bbox.map(|_| r.r_iou), r.total),
                Err(_) => (false, false, None, r.total),
            }
        })
        .collect();
    let n = rows.len() as f64;
    let ious: Vec<f64> = rows.iter().filter_map(|r| r.2).collect();
    PromptMetrics {
        prompts: rows.len(),
        format_rate: rows.iter().filter(|r| r.0).count() as f64 / n,
        action_accuracy: rows.iter().filter(|r| r.1).count() as f64 / n,
        mean_iou: if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
        mean_reward: rows.iter().map(|r| r.3).sum::<f64>() / n,
    }
}

pub(crate) fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}
