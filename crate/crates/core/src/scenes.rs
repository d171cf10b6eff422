//! Seeded scene generators for each task family and generalization suite.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::sim::{Appearance, KinematicsConfig, Scene, TargetSpec, Task};

/// Largest bearing used for generated targets. Keeps every target reachable
/// (centered) without hitting the default workspace limit.
const MAX_GEN_BEARING: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GeneralizationSuite {
    SeqChars,
    SeqFruitAnalog,
    HoleAnalog,
}

impl GeneralizationSuite {
    pub const ALL: [GeneralizationSuite; 3] = [
        GeneralizationSuite::SeqChars,
        GeneralizationSuite::SeqFruitAnalog,
        GeneralizationSuite::HoleAnalog,
    ];

    fn layout(self) -> (usize, Appearance, u32, (f64, f64)) {
        match self {
            GeneralizationSuite::SeqChars => (4, Appearance::Square, 3, (0.035, 0.05)),
            GeneralizationSuite::SeqFruitAnalog => (3, Appearance::Blob, 2, (0.05, 0.07)),
            GeneralizationSuite::HoleAnalog => (2, Appearance::Dot, 4, (0.02, 0.03)),
        }
    }
}

fn bearing_limit(cfg: &KinematicsConfig) -> f64 {
    MAX_GEN_BEARING.min(cfg.max_bearing() * 0.95).min(cfg.bend_gain * cfg.theta_max * 0.8)
}

/// Samples a bearing pair whose straight-ahead projection lies at least
/// `min_px` from the image center.
fn offset_bearing<R: Rng>(rng: &mut R, cfg: &KinematicsConfig, min_px: f64) -> (f64, f64) {
    let lim = bearing_limit(cfg);
    loop {
        let bu = rng.random_range(-lim..lim);
        let bv = rng.random_range(-lim..lim);
        let du = cfg.focal_px * bu.tan();
        let dv = cfg.focal_px * bv.tan();
        if du.hypot(dv) >= min_px {
            return (bu, bv);
        }
    }
}

/// Single-target PP (disc) or AR (blob) scene.
pub fn single_target_scene(task: Task, scene_seed: u64, cfg: &KinematicsConfig) -> Scene {
    let mut rng = seed::rng(scene_seed);
    let (bu, bv) = offset_bearing(&mut rng, cfg, 2.0 * cfg.stop_epsilon);
    let (appearance, radius, intensity) = match task {
        Task::Ar => (
            Appearance::Blob,
            rng.random_range(0.06..0.09),
            rng.random_range(0.55..0.85),
        ),
        _ => (
            Appearance::Disc,
            rng.random_range(0.05..0.09),
            rng.random_range(0.7..1.0),
        ),
    };
    Scene {
        id: scene_seed,
        task: if task == Task::Ar { Task::Ar } else { Task::Pp },
        targets: vec![TargetSpec {
            bearing_u: bu,
            bearing_v: bv,
            radius_world: radius,
            appearance,
            intensity,
        }],
        seed: scene_seed,
        distractor_count: 0,
    }
}

/// Ring of `markers` dots listed anti-clockwise, placed so marker 0 starts
/// inside the focus region.
pub fn cc_scene(scene_seed: u64, markers: usize, cfg: &KinematicsConfig) -> Scene {
    let mut rng = seed::rng(scene_seed);
    let ring = rng.random_range(0.2..0.24f64).min(bearing_limit(cfg) / 2.0);
    let start: f64 = rng.random_range(0.0..TAU);
    let jitter = 0.02;
    let cu = -ring * start.cos() + rng.random_range(-jitter..jitter);
    let cv = -ring * start.sin() + rng.random_range(-jitter..jitter);
    let radius = rng.random_range(0.015..0.02);
    let targets = (0..markers)
        .map(|i| {
            let ang = start + TAU * i as f64 / markers as f64;
            TargetSpec {
                bearing_u: cu + ring * ang.cos(),
                bearing_v: cv + ring * ang.sin(),
                radius_world: radius,
                appearance: Appearance::Dot,
                intensity: 0.95,
            }
        })
        .collect();
    Scene {
        id: scene_seed,
        task: Task::Cc,
        targets,
        seed: scene_seed,
        distractor_count: 0,
    }
}

/// Ordered multi-target scene with novel appearances and clutter.
pub fn general_scene(suite: GeneralizationSuite, scene_seed: u64, cfg: &KinematicsConfig) -> Scene {
    let (count, appearance, distractors, (rlo, rhi)) = suite.layout();
    let mut rng = seed::rng(scene_seed);
    let lim = bearing_limit(cfg);
    let mut targets: Vec<TargetSpec> = Vec::with_capacity(count);
    while targets.len() < count {
        let (bu, bv) = if targets.is_empty() {
            offset_bearing(&mut rng, cfg, 2.0 * cfg.stop_epsilon)
        } else {
            (rng.random_range(-lim..lim), rng.random_range(-lim..lim))
        };
        let clear = targets
            .iter()
            .all(|t| (t.bearing_u - bu).hypot(t.bearing_v - bv) > 0.2);
        if clear {
            targets.push(TargetSpec {
                bearing_u: bu,
                bearing_v: bv,
                radius_world: rng.random_range(rlo..rhi),
                appearance,
                intensity: rng.random_range(0.75..1.0),
            });
        }
    }
    Scene {
        id: scene_seed,
        task: Task::GeneralSeq,
        targets,
        seed: scene_seed,
        distractor_count: distractors,
    }
}

/// Scene for `task`; GENERAL_SEQ uses the character-sequence layout.
pub fn scene_for_task(task: Task, scene_seed: u64, cc_markers: usize, cfg: &KinematicsConfig) -> Scene {
    match task {
        Task::Pp | Task::Ar => single_target_scene(task, scene_seed, cfg),
        Task::Cc => cc_scene(scene_seed, cc_markers, cfg),
        Task::GeneralSeq => general_scene(GeneralizationSuite::SeqChars, scene_seed, cfg),
    }
}

/// A deterministic pool of scenes cycling through `tasks`.
pub fn scene_pool(tasks: &[Task], count: usize, base_seed: u64, cc_markers: usize, cfg: &KinematicsConfig) -> Vec<Scene> {
    (0..count)
        .map(|i| {
            let task = tasks[i % tasks.len()];
            scene_for_task(task, seed::derive(base_seed, i as u64), cc_markers, cfg)
        })
        .collect()
}
