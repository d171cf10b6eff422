//! Verifiable rewards: box overlap, motion agreement and output format, and
//! their composition into one sequence-level scalar.

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::annotate::LabeledSample;
use crate::bbox::BBox;
use crate::format::{parse, Instruction, TokenSequence};

/// Intersection over union in continuous coordinates; 0 for disjoint boxes.
pub fn iou_reward(pred: &BBox, gt: &BBox) -> f64 {
    let ix = (pred.right().min(gt.right()) as f64 - pred.x.max(gt.x) as f64).max(0.0);
    let iy = (pred.bottom().min(gt.bottom()) as f64 - pred.y.max(gt.y) as f64).max(0.0);
    let inter = ix * iy;
    let union = pred.area() + gt.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

pub fn ma_reward(pred: Action, gt: Action) -> f64 {
    if pred == gt {
        1.0
    } else {
        0.0
    }
}

pub fn format_reward(seq: &TokenSequence, instruction: Instruction, image_size: u32) -> f64 {
    if parse(seq, instruction, image_size).is_ok() {
        1.0
    } else {
        0.0
    }
}

/// Per-component weights of the summed reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub iou: f64,
    pub ma: f64,
    pub format: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            iou: 1.0,
            ma: 1.0,
            format: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_iou: f64,
    pub r_ma: f64,
    pub r_format: f64,
    pub total: f64,
}

/// Scores `seq` against the sample's ground truth. An unparseable output
/// scores zero on every component.
pub fn total_reward(seq: &TokenSequence, sample: &LabeledSample, weights: &RewardWeights, image_size: u32) -> RewardBreakdown {
    score(seq, sample.instruction, &sample.bbox, sample.action, weights, image_size)
}

pub fn score(
    seq: &TokenSequence,
    instruction: Instruction,
    gt_box: &BBox,
    gt_action: Action,
    weights: &RewardWeights,
    image_size: u32,
) -> RewardBreakdown {
    let Ok(parsed) = parse(seq, instruction, image_size) else {
        return RewardBreakdown::default();
    };
    let r_ma = ma_reward(parsed.action, gt_action);
    let r_format = 1.0;
    let r_iou = parsed.bbox.map_or(0.0, |b| iou_reward(&b, gt_box));
    let total = match instruction {
        Instruction::Ib => weights.iou * r_iou + weights.ma * r_ma + weights.format * r_format,
        Instruction::Ia => weights.ma * r_ma + weights.format * r_format,
    };
    RewardBreakdown {
        r_iou,
        r_ma,
        r_format,
        total,
    }
}
