use log::{debug, warn};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, AdamW, Prompt};
use crate::error::{Error, Result};
use crate::policy::{backward, forward, sample_with, FeatureVector, Phase, PolicyParams, SampledCompletion};
use crate::rewards::{total_reward, RewardBreakdown, RewardWeights};
use crate::seed;

/// Log-ratios beyond this magnitude are clamped (and excluded from the
/// gradient) to keep the importance ratio finite.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdvantageNorm {
    /// `A_i = R_i - mean(R)`.
    Mean,
    /// `A_i = (R_i - mean(R)) / (std(R) + 1e-8)` with the population std.
    MeanStd,
}

/// Distribution the KL penalty is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReference {
    /// The snapshot that sampled the current round's completions.
    Snapshot,
    /// The starting (supervised) checkpoint, fixed for the whole run.
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub learning_rate: f64,
    /// Prompts (groups) per outer step.
    pub batch_size: usize,
    /// Completions sampled per prompt.
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    /// Per-group weights; empty means uniform. Otherwise one weight per
    /// group of a batch, summing to 1.
    pub group_weights: Vec<f64>,
    pub advantage_norm: AdvantageNorm,
    pub kl_reference: KlReference,
    /// Ascent steps on each sampled batch.
    pub inner_steps: usize,
    pub temperature: f64,
    pub weight_decay: f64,
    pub rewards: RewardWeights,
    /// Set by the caller from the run seed; not part of the file format.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            learning_rate: 1e-5,
            batch_size: 4,
            group_size: 4,
            clip_epsilon: 0.2,
            kl_coeff: 0.04,
            group_weights: Vec::new(),
            advantage_norm: AdvantageNorm::MeanStd,
            kl_reference: KlReference::Snapshot,
            inner_steps: 1,
            temperature: 1.0,
            weight_decay: 0.0,
            rewards: RewardWeights::default(),
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("grpo.{m}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return bad("kl_coeff must be >= 0");
        }
        if !self.group_weights.is_empty() {
            if self.group_weights.len() != self.batch_size {
                return bad("group_weights needs one entry per group in a batch");
            }
            if self.group_weights.iter().any(|w| !(*w >= 0.0)) {
                return bad("group_weights must be nonnegative");
            }
            if (self.group_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("group_weights must sum to 1");
            }
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        Ok(())
    }

    fn weights(&self, groups: usize) -> Vec<f64> {
        if self.group_weights.is_empty() {
            vec![1.0 / groups as f64; groups]
        } else {
            self.group_weights.clone()
        }
    }
}

/// One prompt with its sampled completions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    /// Index of the prompt in the training pool.
    pub prompt: usize,
    pub features: FeatureVector,
    /// Completions with log-probabilities frozen at sampling time.
    pub completions: Vec<SampledCompletion>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    /// `w_g`; the weights of a batch sum to 1.
    pub weight: f64,
}

/// Fills `group.advantages` from the group's total rewards.
pub fn compute_advantages(group: &mut GroupBatch, norm: AdvantageNorm) {
    let r: Vec<f64> = group.rewards.iter().map(|b| b.total).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    group.advantages = match norm {
        AdvantageNorm::Mean => r.iter().map(|x| x - mean).collect(),
        AdvantageNorm::MeanStd => {
            let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            r.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
        }
    };
}

/// `min(r·A, clip(r, 1-eps, 1+eps)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage;
    unclipped.min(clipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveDiagnostics {
    /// Weighted clipped surrogate (without the KL term).
    pub surrogate: f64,
    /// Weighted mean per-token KL from the reference to the current policy.
    pub kl: f64,
    /// Fraction of tokens where the clipped branch is active.
    pub clip_fraction: f64,
    /// Tokens whose log-ratio hit the clamp.
    pub clamped_tokens: usize,
    pub max_abs_log_ratio: f64,
}

struct CompletionTerms {
    surrogate: f64,
    kl: f64,
    clipped: usize,
    clamped: usize,
    tokens: usize,
    max_abs: f64,
}

/// Loss (the negated objective), its exact gradient and diagnostics.
///
/// For completion `i` of group `g` with `n_i` tokens:
///
/// ```text
/// J = sum_g w_g mean_i (1/n_i) sum_t [ min(r_t A_i, clip(r_t, 1-eps, 1+eps) A_i) - alpha KL_t ]
/// r_t = exp(logp_new(y_t) - logp_old(y_t)),  KL_t = KL(ref_t || new_t)
/// ```
///
/// Old log-probabilities come from the completions; `reference` supplies the
/// KL reference distributions on the same prefixes.
pub fn grpo_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[GroupBatch],
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<f64>, ObjectiveDiagnostics)> {
    let eps = cfg.clip_epsilon;
    let alpha = cfg.kl_coeff;
    let jobs: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, gb)| (0..gb.completions.len()).map(move |i| (g, i)))
        .collect();

    let parts: Vec<(CompletionTerms, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(g, i)| {
            let gb = &groups[g];
            let c = &gb.completions[i];
            let a = gb.advantages[i];
            let toks: Vec<usize> = c.tokens.tokens().iter().map(|t| t.index()).collect();
            let n = toks.len();
            let scale = gb.weight / (gb.completions.len() as f64 * n as f64);
            let new = forward(params, &gb.features.0, &toks);
            let refr = forward(reference, &gb.features.0, &toks);
            let mut terms = CompletionTerms {
                surrogate: 0.0,
                kl: 0.0,
                clipped: 0,
                clamped: 0,
                tokens: n,
                max_abs: 0.0,
            };
            let mut dlogits = Vec::with_capacity(n);
            for t in 0..n {
                let p = &new.steps[t].probs;
                let q = &refr.steps[t].probs;
                let y = toks[t];
                let raw = p[y].ln() - c.logprobs[t];
                terms.max_abs = terms.max_abs.max(raw.abs());
                let clamped = raw.abs() > LOG_RATIO_CLAMP;
                let r = raw.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp();
                let term = clipped_surrogate(r, a, eps);
                let coef = if clamped {
                    terms.clamped += 1;
                    0.0
                } else if r * a == term {
                    r * a
                } else {
                    terms.clipped += 1;
                    0.0
                };
                let kl: f64 = q
                    .iter()
                    .zip(p)
                    .filter(|(qj, _)| **qj > 0.0)
                    .map(|(qj, pj)| qj * (qj.ln() - pj.ln()))
                    .sum();
                terms.surrogate += term / n as f64;
                terms.kl += kl / n as f64;
                // d(-J)/dz_t
                let mut d: Vec<f64> = p
                    .iter()
                    .zip(q)
                    .map(|(pj, qj)| -scale * (-coef * pj - alpha * (pj - qj)))
                    .collect();
                d[y] += -scale * coef;
                dlogits.push(d);
            }
            let mut grad = vec![0.0; params.len()];
            backward(params, &gb.features.0, &new, &dlogits, &mut grad);
            (terms, grad)
        })
        .collect();

    let mut grad = vec![0.0; params.len()];
    let mut diag = ObjectiveDiagnostics::default();
    let (mut clipped, mut tokens) = (0usize, 0usize);
    for (&(g, _), (terms, gpart)) in jobs.iter().zip(parts) {
        let w = groups[g].weight / groups[g].completions.len() as f64;
        diag.surrogate += w * terms.surrogate;
        diag.kl += w * terms.kl;
        diag.clamped_tokens += terms.clamped;
        diag.max_abs_log_ratio = diag.max_abs_log_ratio.max(terms.max_abs);
        clipped += terms.clipped;
        tokens += terms.tokens;
        for (a, x) in grad.iter_mut().zip(&gpart) {
            *a += x;
        }
    }
    diag.clip_fraction = if tokens == 0 { 0.0 } else { clipped as f64 / tokens as f64 };
    if diag.clamped_tokens > 0 {
        warn!("{} token log-ratios clamped to ±{LOG_RATIO_CLAMP}", diag.clamped_tokens);
    }
    let loss = -(diag.surrogate - alpha * diag.kl);
    check_finite("grpo loss", loss)?;
    Ok((loss, grad, diag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoLogRecord {
    pub phase: String,
    pub step: u64,
    pub group_size: usize,
    pub mean_reward: f64,
    pub mean_r_iou: f64,
    pub mean_r_ma: f64,
    pub format_rate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct GrpoOutcome {
    pub params: PolicyParams,
    pub log: Vec<GrpoLogRecord>,
}

/// Samples one batch of groups from `current` and scores it.
fn collect_groups(current: &PolicyParams, prompts: &[Prompt], cfg: &GrpoConfig, step: u64, image_size: u32) -> Vec<GroupBatch> {
    let step_seed = seed::derive(cfg.seed, 0x6790_0000 + step);
    let picks: Vec<usize> = if cfg.batch_size <= prompts.len() {
        sample_indices(&mut seed::rng(step_seed), prompts.len(), cfg.batch_size).into_vec()
    } else {
        (0..cfg.batch_size).map(|i| i % prompts.len()).collect()
    };
    let weights = cfg.weights(picks.len());
    picks
        .par_iter()
        .zip(weights)
        .enumerate()
        .map(|(g, (&pi, weight))| {
            let p = &prompts[pi];
            let mut rng = seed::rng(seed::derive(step_seed, g as u64 + 1));
            let completions: Vec<SampledCompletion> = (0..cfg.group_size)
                .map(|_| sample_with(current, &p.features, cfg.temperature, &mut rng))
                .collect();
            let rewards = completions
                .iter()
                .map(|c| total_reward(&c.tokens, &p.sample, &cfg.rewards, image_size))
                .collect();
            let mut gb = GroupBatch {
                prompt: pi,
                features: p.features.clone(),
                completions,
                rewards,
                advantages: Vec::new(),
                weight,
            };
            compute_advantages(&mut gb, cfg.advantage_norm);
            gb
        })
        .collect()
}

/// Runs `steps` outer iterations of sample → score → `inner_steps` updates.
///
/// Refuses to start from an untrained (`Phase::Init`) policy unless
/// `allow_cold_start` is set.
pub fn grpo_train(
    start: &PolicyParams,
    start_phase: Phase,
    prompts: &[Prompt],
    cfg: &GrpoConfig,
    steps: u64,
    image_size: u32,
    allow_cold_start: bool,
) -> Result<GrpoOutcome> {
    cfg.validate()?;
    if start_phase == Phase::Init && !allow_cold_start {
        return Err(Error::ColdStart);
    }
    if steps > 0 && prompts.is_empty() {
        return Err(Error::Config("grpo needs at least one prompt".into()));
    }
    let mut opt = AdamW::new(start.len(), cfg.weight_decay);
    let mut current = start.clone();
    let mut log = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let groups = collect_groups(&current, prompts, cfg, step, image_size);
        let count = groups.iter().map(|g| g.rewards.len()).sum::<usize>() as f64;
        let mean = |f: &dyn Fn(&RewardBreakdown) -> f64| groups.iter().flat_map(|g| &g.rewards).map(f).sum::<f64>() / count;
        let mean_reward = mean(&|r| r.total);
        if mean_reward.is_nan() {
            return Err(Error::NonFinite(format!("mean reward at grpo step {}", step + 1)));
        }
        let snapshot = current.clone();
        let reference = match cfg.kl_reference {
            KlReference::Snapshot => &snapshot,
            KlReference::Sft => start,
        };
        let mut last = (0.0, ObjectiveDiagnostics::default());
        for _ in 0..cfg.inner_steps {
            let (loss, grad, diag) = grpo_objective(&current, reference, &groups, cfg)?;
            current = opt.step(&current, &grad, cfg.learning_rate);
            last = (loss, diag);
        }
        let rec = GrpoLogRecord {
            phase: "grpo".into(),
            step: step + 1,
            group_size: cfg.group_size,
            mean_reward,
            mean_r_iou: mean(&|r| r.r_iou),
            mean_r_ma: mean(&|r| r.r_ma),
            format_rate: mean(&|r| r.r_format),
            kl: last.1.kl,
            clip_fraction: last.1.clip_fraction,
            loss: last.0,
        };
        debug!("grpo step {}: reward {:.4} kl {:.4}", rec.step, rec.mean_reward, rec.kl);
        log.push(rec);
    }
    Ok(GrpoOutcome { params: current, log })
}
