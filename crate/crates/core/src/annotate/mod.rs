//! Automated labeling: focus-region stop logic, quadrant-to-action labels,
//! the distance-minimizing oracle controller, ring-marker ordering and
//! dataset generation.

mod circle;
mod dataset;

pub use circle::{fit_circle, next_marker_anticlockwise, screen_angle, CircleFit};
pub use dataset::{
    generate_dataset, read_samples, write_samples, AnnotationStats, DatasetBundle, DatasetOptions, SkippedScene,
    StatsRow,
};

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::format::{Instruction, TokenSequence};
use crate::sim::{apply_action, project, KinematicsConfig, MotorState, PixelPoint, Projection, Scene, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    /// Labeling radius of the focus region, pixels.
    pub fr_radius: f64,
    pub image_center: PixelPoint,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            fr_radius: 20.0 * std::f64::consts::SQRT_2,
            image_center: PixelPoint::new(200.0, 200.0),
        }
    }
}

impl AnnotationConfig {
    /// Default focus-region radius centered on `kin`'s image center.
    pub fn for_kinematics(kin: &KinematicsConfig) -> Self {
        AnnotationConfig {
            image_center: kin.center,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fr_radius > 0.0) {
            return Err(Error::Config("annotation: fr_radius must be > 0".into()));
        }
        Ok(())
    }
}

/// Quadrant of `p` relative to `center`, never STOP. Points exactly on the
/// vertical axis count as right, on the horizontal axis as upper.
pub fn quadrant_of(p: PixelPoint, center: PixelPoint) -> Action {
    let right = p.u >= center.u;
    let lower = p.v > center.v;
    match (right, lower) {
        (true, false) => Action::UpperRight,
        (false, false) => Action::UpperLeft,
        (false, true) => Action::LowerLeft,
        (true, true) => Action::LowerRight,
    }
}

/// STOP inside the focus region, otherwise the quadrant of the box center.
pub fn quadrant_label(bbox: &BBox, cfg: &AnnotationConfig) -> Action {
    let (u, v) = bbox.center();
    let p = PixelPoint::new(u, v);
    if p.distance(&cfg.image_center) < cfg.fr_radius {
        Action::Stop
    } else {
        quadrant_of(p, cfg.image_center)
    }
}

/// Ground-truth-informed greedy controller: STOP within `stop_epsilon`,
/// otherwise the motion whose next projection lands closest to the focus
/// center. Ties resolve in [`Action::MOVES`] order.
pub fn oracle_action(scene: &Scene, target_index: usize, theta: MotorState, cfg: &KinematicsConfig) -> Result<Action> {
    let t = scene.targets.get(target_index).ok_or(Error::TargetIndex {
        index: target_index,
        count: scene.targets.len(),
    })?;
    let current = cfg
        .project_bearing(t.bearing_u, t.bearing_v, theta)
        .ok_or(Error::NoProgress)?;
    if current.distance(&cfg.center) <= cfg.stop_epsilon {
        return Ok(Action::Stop);
    }
    let mut best: Option<(f64, Action)> = None;
    for a in Action::MOVES {
        let next = apply_action(theta, a, cfg).state;
        if let Projection::InView(p) = project(scene, target_index, next, cfg)? {
            let d = p.distance(&cfg.center);
            if best.is_none_or(|(b, _)| d < b) {
                best = Some((d, a));
            }
        }
    }
    best.map(|(_, a)| a).ok_or(Error::NoProgress)
}

/// Pointer to a rendered observation; frames are regenerated on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub scene_id: u64,
    pub step: u32,
    pub theta: MotorState,
    pub render_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledSample {
    /// Annotation id; both instruction variants of one frame share it.
    pub annotation: u64,
    pub frame: FrameRef,
    pub instruction: Instruction,
    pub task: Task,
    /// Index of the labeled target within the scene.
    pub target_index: usize,
    pub bbox: BBox,
    pub action: Action,
    pub canonical_text: String,
}

impl LabeledSample {
    pub fn tokens(&self) -> Result<TokenSequence> {
        TokenSequence::from_canonical(&self.canonical_text)
    }
}
