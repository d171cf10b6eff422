//! Oracle rollouts turned into labeled vision-to-action samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_circle, next_marker_anticlockwise, oracle_action, quadrant_label, quadrant_of, AnnotationConfig, FrameRef, LabeledSample};
use crate::action::Action;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::format::{serialize, Instruction};
use crate::seed;
use crate::sim::{
    apply_action, focus_distance, ground_truth, observed_boxes, KinematicsConfig, MotorState, NoiseConfig, PixelPoint,
    Scene, Task, TargetView,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    /// Maximum oracle steps per scene.
    pub episode_budget: usize,
    /// Fraction of annotations assigned to the training split.
    pub split_frac: f64,
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            episode_budget: 60,
            split_frac: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedScene {
    pub scene_id: u64,
    pub reason: String,
}

/// One row of the motion-annotation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    /// `TS` (training split) or `ES` (evaluation split).
    pub split: String,
    pub task: Task,
    /// Counts in [`Action::ALL`] order.
    pub counts: [usize; 5],
}

impl StatsRow {
    pub fn all(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub rows: Vec<StatsRow>,
    /// Annotations kept (one per labeled frame).
    pub annotations: usize,
    /// Samples emitted over both instruction variants.
    pub samples: usize,
    /// Frames whose noisy label disagreed with the noiseless one.
    pub curated_out: usize,
    /// Frames lost to detection dropout or too few ring detections.
    pub dropped: usize,
}

impl AnnotationStats {
    pub const COLUMNS: [&'static str; 6] = ["[1,1]", "[-1,1]", "[-1,-1]", "[1,-1]", "[0,0]", "All"];

    /// Plain-text table with one row per split and task plus a total row.
    /// CC never carries a stop label, so its `[0,0]` cell reads `N/A`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "MA");
        for c in Self::COLUMNS {
            let _ = write!(out, "{c:>9}");
        }
        out.push('\n');
        let mut total = [0usize; 5];
        for row in &self.rows {
            let _ = write!(out, "{:<12}", format!("{} ({})", row.split, row.task));
            for (i, n) in row.counts.iter().enumerate() {
                total[i] += n;
                if i == 4 && row.task == Task::Cc {
                    let _ = write!(out, "{:>9}", "N/A");
                } else {
                    let _ = write!(out, "{n:>9}");
                }
            }
            let _ = writeln!(out, "{:>9}", row.all());
        }
        let _ = write!(out, "{:<12}", "All Number");
        for n in total {
            let _ = write!(out, "{n:>9}");
        }
        let _ = writeln!(out, "{:>9}", total.iter().sum::<usize>());
        let _ = writeln!(
            out,
            "\nannotations N_t = {}, samples = 2 x N_t = {}, curated out = {}, dropped = {}",
            self.annotations, self.samples, self.curated_out, self.dropped
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub scenes: Vec<Scene>,
    pub train: Vec<LabeledSample>,
    pub eval: Vec<LabeledSample>,
    pub stats: AnnotationStats,
    pub skipped: Vec<SkippedScene>,
}

impl DatasetBundle {
    pub fn scene(&self, id: u64) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone)]
struct Annotation {
    scene_id: u64,
    task: Task,
    step: u32,
    theta: MotorState,
    render_seed: u64,
    target_index: usize,
    bbox: BBox,
    action: Action,
}

#[derive(Debug, Default)]
struct SceneOutcome {
    annotations: Vec<Annotation>,
    curated_out: usize,
    dropped: usize,
}

fn render_seed(scene: &Scene, step: usize) -> u64 {
    seed::derive(scene.seed, 0x5EED_0000 + step as u64)
}

fn dropout_mask(scene: &Scene, step: usize, count: usize, prob: f64) -> Vec<bool> {
    if prob <= 0.0 {
        return vec![false; count];
    }
    let mut rng = seed::rng(seed::derive(scene.seed, 0xD809_0000 + step as u64));
    (0..count).map(|_| rng.random_bool(prob.min(1.0))).collect()
}

/// Ring-label decision: which marker to head for and in which quadrant it lies.
#[derive(Debug, Clone, Copy, PartialEq)]
struct RingLabel {
    marker: usize,
    bbox: BBox,
    action: Action,
}

/// Fits the ring through the detected centroids and picks the marker after
/// `anchor` anti-clockwise. Without the anchor among the detections, the
/// most central detection stands in for it.
fn ring_label(detections: &[(usize, BBox)], anchor: usize, center: PixelPoint) -> Option<RingLabel> {
    if detections.len() < 3 {
        return None;
    }
    let centroids: Vec<PixelPoint> = detections
        .iter()
        .map(|(_, b)| {
            let (u, v) = b.center();
            PixelPoint::new(u, v)
        })
        .collect();
    let fit = fit_circle(&centroids, 3).ok()?;
    let current = detections.iter().position(|(m, _)| *m == anchor).unwrap_or_else(|| {
        (0..centroids.len())
            .min_by(|&a, &b| centroids[a].distance(&center).total_cmp(&centroids[b].distance(&center)))
            .expect("non-empty")
    });
    let next = next_marker_anticlockwise(&centroids, current, &fit).ok()?;
    let (marker, bbox) = detections[next];
    Some(RingLabel {
        marker,
        bbox,
        action: quadrant_of(centroids[next], center),
    })
}

fn annotate_single(
    scene: &Scene,
    kin: &KinematicsConfig,
    acfg: &AnnotationConfig,
    noise: &NoiseConfig,
    budget: usize,
) -> Result<SceneOutcome> {
    let mut out = SceneOutcome::default();
    let mut theta = MotorState::ZERO;
    for step in 0..budget {
        let rs = render_seed(scene, step);
        let oracle = oracle_action(scene, 0, theta, kin)?;
        let clean = ground_truth(scene, theta, kin)?[0];
        let observed = observed_boxes(scene, theta, kin, noise, rs)?[0];
        if let (TargetView::Visible(clean), TargetView::Visible(det)) = (clean, observed) {
            if dropout_mask(scene, step, 1, noise.dropout_prob)[0] {
                out.dropped += 1;
            } else if quadrant_label(&det, acfg) != quadrant_label(&clean, acfg) {
                out.curated_out += 1;
            } else {
                out.annotations.push(Annotation {
                    scene_id: scene.id,
                    task: scene.task,
                    step: step as u32,
                    theta,
                    render_seed: rs,
                    target_index: 0,
                    bbox: det,
                    action: quadrant_label(&det, acfg),
                });
            }
        }
        if oracle.is_stop() {
            break;
        }
        theta = apply_action(theta, oracle, kin).state;
    }
    Ok(out)
}

fn annotate_ring(
    scene: &Scene,
    kin: &KinematicsConfig,
    acfg: &AnnotationConfig,
    noise: &NoiseConfig,
    budget: usize,
) -> Result<SceneOutcome> {
    let k = scene.targets.len();
    let mut out = SceneOutcome::default();
    let mut theta = MotorState::ZERO;
    let dist = |i: usize, theta: MotorState| -> Result<f64> {
        Ok(focus_distance(scene, i, theta, kin)?.unwrap_or(f64::INFINITY))
    };
    let mut target = (0..k)
        .map(|i| dist(i, theta).map(|d| (d, i)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, i)| i)
        .expect("ring has markers");
    let mut anchor: Option<usize> = None;
    let mut visited = 0;

    for step in 0..budget {
        while dist(target, theta)? <= kin.stop_epsilon {
            anchor = Some(target);
            visited += 1;
            target = (target + 1) % k;
            if visited == k {
                return Ok(out);
            }
        }
        let rs = render_seed(scene, step);
        let clean_views = ground_truth(scene, theta, kin)?;
        let observed_views = observed_boxes(scene, theta, kin, noise, rs)?;
        let drop = dropout_mask(scene, step, k, noise.dropout_prob);
        let clean: Vec<(usize, BBox)> = clean_views
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.bbox().map(|b| (i, b)))
            .collect();
        let observed: Vec<(usize, BBox)> = observed_views
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop[*i])
            .filter_map(|(i, v)| v.bbox().map(|b| (i, b)))
            .collect();

        let label_for = |dets: &[(usize, BBox)]| -> Option<RingLabel> {
            match anchor {
                Some(a) => ring_label(dets, a, acfg.image_center),
                None => dets.iter().find(|(m, _)| *m == target).map(|&(m, b)| {
                    let (u, v) = b.center();
                    RingLabel {
                        marker: m,
                        bbox: b,
                        action: quadrant_of(PixelPoint::new(u, v), acfg.image_center),
                    }
                }),
            }
        };
        match (label_for(&observed), label_for(&clean)) {
            (Some(noisy), Some(exact)) if noisy.marker == exact.marker && noisy.action == exact.action => {
                out.annotations.push(Annotation {
                    scene_id: scene.id,
                    task: scene.task,
                    step: step as u32,
                    theta,
                    render_seed: rs,
                    target_index: noisy.marker,
                    bbox: noisy.bbox,
                    action: noisy.action,
                });
            }
            (Some(_), Some(_)) => out.curated_out += 1,
            _ => out.dropped += 1,
        }

        let act = oracle_action(scene, target, theta, kin)?;
        theta = apply_action(theta, act, kin).state;
    }
    Ok(out)
}

fn annotate_scene(
    scene: &Scene,
    kin: &KinematicsConfig,
    acfg: &AnnotationConfig,
    noise: &NoiseConfig,
    budget: usize,
) -> Result<SceneOutcome> {
    scene.validate(kin)?;
    match scene.task {
        Task::Pp | Task::Ar => annotate_single(scene, kin, acfg, noise, budget),
        Task::Cc => annotate_ring(scene, kin, acfg, noise, budget),
        Task::GeneralSeq => Err(Error::Scene("GENERAL_SEQ scenes are evaluation-only".into())),
    }
}

fn samples_for(a: &Annotation, id: u64, image_size: u32) -> Result<[LabeledSample; 2]> {
    let frame = FrameRef {
        scene_id: a.scene_id,
        step: a.step,
        theta: a.theta,
        render_seed: a.render_seed,
    };
    let make = |instruction: Instruction| -> Result<LabeledSample> {
        let bbox = (instruction == Instruction::Ib).then_some(a.bbox);
        let text = serialize(bbox, a.action, instruction, image_size)?.to_canonical();
        Ok(LabeledSample {
            annotation: id,
            frame,
            instruction,
            task: a.task,
            target_index: a.target_index,
            bbox: a.bbox,
            action: a.action,
            canonical_text: text,
        })
    };
    Ok([make(Instruction::Ia)?, make(Instruction::Ib)?])
}

fn action_slot(a: Action) -> usize {
    Action::ALL.iter().position(|&x| x == a).expect("action listed")
}

/// Rolls the oracle out on every scene, labels each visited frame and
/// splits annotations into train/eval sets with a seeded shuffle.
///
/// Every annotation yields one sample per instruction variant; both land in
/// the same split. Scenes where the oracle cannot progress are skipped.
pub fn generate_dataset(
    scenes: &[Scene],
    kin: &KinematicsConfig,
    acfg: &AnnotationConfig,
    noise: &NoiseConfig,
    opts: &DatasetOptions,
) -> Result<DatasetBundle> {
    kin.validate()?;
    acfg.validate()?;
    if !(opts.split_frac > 0.0 && opts.split_frac < 1.0) {
        return Err(Error::Config("split_frac must lie in (0, 1)".into()));
    }
    if opts.episode_budget == 0 {
        return Err(Error::Config("episode_budget must be >= 1".into()));
    }

    let outcomes: Vec<Result<SceneOutcome>> = scenes
        .par_iter()
        .map(|s| annotate_scene(s, kin, acfg, noise, opts.episode_budget))
        .collect();

    let mut annotations = Vec::new();
    let mut skipped = Vec::new();
    let mut curated_out = 0;
    let mut dropped = 0;
    for (scene, outcome) in scenes.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                curated_out += o.curated_out;
                dropped += o.dropped;
                annotations.extend(o.annotations);
            }
            Err(e) => {
                warn!("skipping scene {}: {e}", scene.id);
                skipped.push(SkippedScene {
                    scene_id: scene.id,
                    reason: e.to_string(),
                });
            }
        }
    }

    let n = annotations.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(opts.seed, 0x5_9117)));
    let n_train = (opts.split_frac * n as f64).round() as usize;
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }

    let mut train = Vec::with_capacity(2 * n_train);
    let mut eval = Vec::with_capacity(2 * (n - n_train));
    let mut counts: BTreeMap<(bool, Task), [usize; 5]> = BTreeMap::new();
    for (i, a) in annotations.iter().enumerate() {
        let pair = samples_for(a, i as u64, kin.image_size)?;
        counts.entry((in_train[i], a.task)).or_default()[action_slot(a.action)] += 1;
        if in_train[i] {
            train.extend(pair);
        } else {
            eval.extend(pair);
        }
    }

    let mut rows = Vec::new();
    for split in [true, false] {
        for task in [Task::Pp, Task::Ar, Task::Cc] {
            if let Some(c) = counts.get(&(split, task)) {
                rows.push(StatsRow {
                    split: if split { "TS" } else { "ES" }.to_string(),
                    task,
                    counts: *c,
                });
            }
        }
    }

    Ok(DatasetBundle {
        scenes: scenes.to_vec(),
        stats: AnnotationStats {
            rows,
            annotations: n,
            samples: train.len() + eval.len(),
            curated_out,
            dropped,
        },
        train,
        eval,
        skipped,
    })
}

/// Writes one JSON record per line.
pub fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
