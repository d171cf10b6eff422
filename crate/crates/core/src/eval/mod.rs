//! Closed-loop evaluation: rollouts of a controller against simulated
//! scenes, aggregated into success and completion rates.

mod controller;

pub use controller::{AlwaysStop, Controller, Decision, Observation, OracleController, PolicyController, RandomController, RawOutput};

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::annotate::{quadrant_label, AnnotationConfig};
use crate::error::{Error, Result};
use crate::rewards::{score, RewardBreakdown, RewardWeights};
use crate::scenes::{cc_scene, general_scene, single_target_scene, GeneralizationSuite};
use crate::seed;
use crate::sim::{apply_action, focus_distance, render, KinematicsConfig, MotorState, NoiseConfig, Scene, Task};

/// Shared settings for every rollout of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    pub kin: KinematicsConfig,
    pub noise: NoiseConfig,
    pub annotation: AnnotationConfig,
    pub rewards: RewardWeights,
    /// Seeds scene generation; evaluation scenes use streams disjoint from
    /// the training pool's.
    pub seed: u64,
    pub config_hash: String,
}

impl EvalContext {
    pub fn new(kin: KinematicsConfig, seed: u64) -> Self {
        EvalContext {
            annotation: AnnotationConfig::for_kinematics(&kin),
            kin,
            noise: NoiseConfig::default(),
            rewards: RewardWeights::default(),
            seed,
            config_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub theta: MotorState,
    pub target: usize,
    /// Focus distance of the current target before acting.
    pub distance: f64,
    /// Executed action; absent when the output was malformed.
    pub action: Option<Action>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    /// Score of the raw output against the frame's ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
    pub distance_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scene_id: u64,
    pub task: Task,
    pub budget: usize,
    pub steps_taken: usize,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub min_distance: f64,
    /// `min_distance <= stop_epsilon` at some point of the episode.
    pub reached_fr: bool,
    pub stop_issued: bool,
    pub malformed_steps: usize,
    pub clamped_steps: usize,
    /// Target indices visited, in visiting order.
    pub visited: Vec<usize>,
    pub target_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceStep>,
}

impl EpisodeResult {
    pub fn completed(&self) -> bool {
        self.visited.len() == self.target_count
    }
}

/// Ring marker nearest the image center at the home pose.
pub fn center_most_marker(scene: &Scene, kin: &KinematicsConfig) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for i in 0..scene.targets.len() {
        if let Some(d) = focus_distance(scene, i, MotorState::ZERO, kin)? {
            if best.is_none_or(|(b, _)| d < b) {
                best = Some((d, i));
            }
        }
    }
    best.map(|(_, i)| i)
        .ok_or_else(|| Error::Scene(format!("scene {} has no target in the view cone", scene.id)))
}

/// Order in which the scene's targets must be visited.
pub fn visit_order(scene: &Scene, kin: &KinematicsConfig) -> Result<Vec<usize>> {
    let n = scene.targets.len();
    Ok(match scene.task {
        Task::Pp | Task::Ar => vec![0],
        Task::Cc => {
            let start = center_most_marker(scene, kin)?;
            (0..n).map(|k| (start + k) % n).collect()
        }
        Task::GeneralSeq => (0..n).collect(),
    })
}

/// Render seed of the frame observed at `step` of an evaluation episode.
pub fn frame_seed(scene: &Scene, step: usize) -> u64 {
    seed::derive(scene.seed, 0xE7A1_0000 + step as u64)
}

/// Runs one closed-loop episode.
///
/// Each step: render (if the controller needs frames) → decide → act.
/// Single-target episodes end when the target enters the focus region;
/// sequential episodes advance to the next target instead and end once all
/// are visited. A STOP ends any episode; a malformed output consumes the
/// step without moving. For sequential tasks a target already inside the
/// focus region at the start counts as visited immediately.
pub fn rollout(controller: &dyn Controller, scene: &Scene, budget: usize, ctx: &EvalContext) -> Result<EpisodeResult> {
    if budget == 0 {
        return Err(Error::Config("rollout budget must be >= 1".into()));
    }
    scene.validate(&ctx.kin)?;
    let kin = &ctx.kin;
    let eps = kin.stop_epsilon;
    let order = visit_order(scene, kin)?;
    let sequential = scene.task.is_sequential();
    let dist = |idx: usize, theta: MotorState| -> Result<f64> {
        Ok(focus_distance(scene, idx, theta, kin)?.unwrap_or(f64::INFINITY))
    };

    let mut theta = MotorState::ZERO;
    let mut cursor = 0;
    let mut visited = Vec::new();
    let initial = dist(order[0], theta)?;
    let (mut min_d, mut final_d) = (initial, initial);
    if sequential {
        while cursor < order.len() && dist(order[cursor], theta)? <= eps {
            visited.push(order[cursor]);
            cursor += 1;
        }
    }

    let mut trace = Vec::new();
    let (mut stop, mut malformed, mut clamped) = (false, 0, 0);
    for step in 0..budget {
        if cursor == order.len() {
            break;
        }
        let target = order[cursor];
        let frame = if controller.needs_frame() {
            Some(render(scene, theta, kin, &ctx.noise, frame_seed(scene, step))?)
        } else {
            None
        };
        let before = dist(target, theta)?;
        let decision = controller.decide(&Observation {
            scene,
            target_index: target,
            theta,
            step,
            frame: frame.as_ref(),
            kin,
        });
        let reward = match (&decision.output, &frame) {
            (Some(out), Some(f)) => f.ground_truth.get(target).and_then(|v| v.bbox()).map(|gt| {
                score(
                    &out.tokens,
                    out.instruction,
                    &gt,
                    quadrant_label(&gt, &ctx.annotation),
                    &ctx.rewards,
                    kin.image_size,
                )
            }),
            _ => None,
        };
        let mut record = TraceStep {
            step,
            theta,
            target,
            distance: before,
            action: decision.action,
            output: decision.output.as_ref().map(|o| o.tokens.to_canonical()),
            reward,
            distance_after: before,
        };
        match decision.action {
            None => malformed += 1,
            Some(Action::Stop) => {
                stop = true;
                trace.push(record);
                break;
            }
            Some(a) => {
                let act = apply_action(theta, a, kin);
                clamped += act.clamped as usize;
                theta = act.state;
            }
        }
        let after = dist(target, theta)?;
        record.distance_after = after;
        final_d = after;
        min_d = min_d.min(after);
        trace.push(record);
        if after <= eps {
            visited.push(target);
            cursor += 1;
            if sequential {
                while cursor < order.len() && dist(order[cursor], theta)? <= eps {
                    visited.push(order[cursor]);
                    cursor += 1;
                }
            }
        }
    }

    Ok(EpisodeResult {
        scene_id: scene.id,
        task: scene.task,
        budget,
        steps_taken: trace.len(),
        initial_distance: initial,
        final_distance: final_d,
        min_distance: min_d,
        reached_fr: min_d <= eps,
        stop_issued: stop,
        malformed_steps: malformed,
        clamped_steps: clamped,
        visited,
        target_count: order.len(),
        trace,
    })
}

/// Rolls out every scene in parallel; results keep the scenes' order.
pub fn rollout_all(controller: &dyn Controller, scenes: &[Scene], budget: usize, ctx: &EvalContext) -> Result<Vec<EpisodeResult>> {
    scenes.par_iter().map(|s| rollout(controller, s, budget, ctx)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `PP`, `AR`, `CC` or a generalization suite name.
    pub suite: String,
    pub controller: String,
    pub trials: usize,
    pub budget: usize,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sr_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sr_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_item_sr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_sr: Option<f64>,
    pub mean_steps: f64,
    pub stop_rate: f64,
    /// Malformed outputs per decision step.
    pub malformed_rate: f64,
    /// Episodes without traces.
    pub episodes: Vec<EpisodeResult>,
}

fn fraction<T>(items: &[T], pred: impl Fn(&T) -> bool) -> f64 {
    if items.is_empty() {
        0.0
    } else {
        items.iter().filter(|x| pred(x)).count() as f64 / items.len() as f64
    }
}

fn base_report(suite: String, controller: &dyn Controller, budget: usize, ctx: &EvalContext, mut eps: Vec<EpisodeResult>) -> EvalReport {
    let steps: usize = eps.iter().map(|e| e.steps_taken).sum();
    let malformed: usize = eps.iter().map(|e| e.malformed_steps).sum();
    let n = eps.len();
    let stop_rate = fraction(&eps, |e| e.stop_issued);
    eps.iter_mut().for_each(|e| e.trace.clear());
    EvalReport {
        suite,
        controller: controller.name(),
        trials: n,
        budget,
        config_hash: ctx.config_hash.clone(),
        sr_c: None,
        sr_r: None,
        cr: None,
        sr: None,
        per_item_sr: None,
        full_sr: None,
        mean_steps: if n == 0 { 0.0 } else { steps as f64 / n as f64 },
        stop_rate,
        malformed_rate: if steps == 0 { 0.0 } else { malformed as f64 / steps as f64 },
        episodes: eps,
    }
}

/// Seed of the `i`-th evaluation scene of a suite.
fn eval_scene_seed(ctx: &EvalContext, stream: u64, i: usize) -> u64 {
    seed::derive(seed::derive(ctx.seed, 0xE7A1_5CE0 + stream), i as u64)
}

pub fn pp_ar_scenes(task: Task, n_trials: usize, ctx: &EvalContext) -> Vec<Scene> {
    let stream = if task == Task::Ar { 2 } else { 1 };
    (0..n_trials)
        .map(|i| single_target_scene(task, eval_scene_seed(ctx, stream, i), &ctx.kin))
        .collect()
}

pub fn cc_scenes(n_trials: usize, markers: usize, ctx: &EvalContext) -> Vec<Scene> {
    (0..n_trials).map(|i| cc_scene(eval_scene_seed(ctx, 3, i), markers, &ctx.kin)).collect()
}

pub fn generalization_scenes(suite: GeneralizationSuite, n_trials: usize, ctx: &EvalContext) -> Vec<Scene> {
    let stream = 4 + GeneralizationSuite::ALL.iter().position(|&s| s == suite).expect("listed") as u64;
    (0..n_trials)
        .map(|i| general_scene(suite, eval_scene_seed(ctx, stream, i), &ctx.kin))
        .collect()
}

/// PP or AR: SR_c is the fraction of trials ending closer than they began;
/// SR_r the fraction whose minimum distance reached `stop_epsilon`.
pub fn eval_pp_ar(controller: &dyn Controller, task: Task, n_trials: usize, budget: usize, ctx: &EvalContext) -> Result<EvalReport> {
    if !matches!(task, Task::Pp | Task::Ar) {
        return Err(Error::Config(format!("eval_pp_ar expects PP or AR, got {}", task.code())));
    }
    let eps = rollout_all(controller, &pp_ar_scenes(task, n_trials, ctx), budget, ctx)?;
    let mut r = base_report(task.code().to_string(), controller, budget, ctx, eps);
    r.sr_c = Some(fraction(&r.episodes, |e| e.final_distance < e.initial_distance));
    r.sr_r = Some(fraction(&r.episodes, |e| e.reached_fr));
    Ok(r)
}

/// Circular cutting: CR is the mean fraction of markers visited in order;
/// SR the fraction of trials visiting all of them.
pub fn eval_cc(controller: &dyn Controller, n_trials: usize, budget: usize, markers: usize, ctx: &EvalContext) -> Result<EvalReport> {
    if markers < 3 {
        return Err(Error::Config("circular cutting needs at least 3 markers".into()));
    }
    let eps = rollout_all(controller, &cc_scenes(n_trials, markers, ctx), budget, ctx)?;
    let mut r = base_report("CC".into(), controller, budget, ctx, eps);
    let cr = if r.episodes.is_empty() {
        0.0
    } else {
        r.episodes
            .iter()
            .map(|e| e.visited.len() as f64 / e.target_count as f64)
            .sum::<f64>()
            / r.episodes.len() as f64
    };
    r.cr = Some(cr);
    r.sr = Some(fraction(&r.episodes, |e| e.completed()));
    Ok(r)
}

/// Ordered multi-target scenes: per-item success and full-sequence success.
pub fn eval_generalization(
    controller: &dyn Controller,
    suite: GeneralizationSuite,
    n_trials: usize,
    budget: usize,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let scenes = generalization_scenes(suite, n_trials, ctx);
    let items = scenes.first().map_or(0, |s| s.targets.len());
    let eps = rollout_all(controller, &scenes, budget, ctx)?;
    let name = serde_json::to_value(suite)?.as_str().unwrap_or_default().to_string();
    let mut r = base_report(name, controller, budget, ctx, eps);
    r.per_item_sr = Some(per_item_success(&r.episodes, items));
    r.full_sr = Some(fraction(&r.episodes, |e| e.completed()));
    Ok(r)
}

/// Fraction of episodes that visited item `i`, for each `i < items`.
pub fn per_item_success(episodes: &[EpisodeResult], items: usize) -> Vec<f64> {
    (0..items)
        .map(|i| fraction(episodes, |e| e.visited.contains(&i)))
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Plain-text summary table of several reports.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:<16} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}  per-item SR (%)",
        "suite", "controller", "trials", "budget", "SR_c(%)", "SR_r(%)", "CR(%)", "SR(%)", "Full(%)"
    );
    for r in reports {
        let items = r
            .per_item_sr
            .as_ref()
            .map(|v| v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{:<18} {:<16} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}  {}",
            r.suite,
            r.controller,
            r.trials,
            r.budget,
            pct(r.sr_c),
            pct(r.sr_r),
            pct(r.cr),
            pct(r.sr),
            pct(r.full_sr),
            items
        );
    }
    out
}
