use log::debug;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, AdamW, Prompt};
use crate::error::{Error, Result};
use crate::policy::{accumulate_logprob_grad, PolicyParams};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    /// Initial learning rate; decays linearly to zero over the run.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the training set; fractional values truncate the last pass.
    pub epochs: f64,
    pub weight_decay: f64,
    /// Set by the caller from the run seed; not part of the file format.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            learning_rate: 2e-4,
            batch_size: 2,
            epochs: 1.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("sft.learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sft.batch_size must be >= 1".into()));
        }
        if !(self.epochs >= 0.0 && self.epochs.is_finite()) {
            return Err(Error::Config("sft.epochs must be >= 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("sft.weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Optimizer steps implied by `epochs` over `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        (self.epochs * n as f64 / self.batch_size as f64).ceil() as usize
    }
}

/// Mean per-token negative log-likelihood of the batch and its gradient.
pub fn sft_loss_and_grad(params: &PolicyParams, batch: &[&Prompt]) -> (f64, Vec<f64>) {
    let b = batch.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|p| {
            let n = p.target.len() as f64;
            let mut g = vec![0.0; params.len()];
            let lp = accumulate_logprob_grad(params, &p.features, &p.target, -1.0 / (b * n), &mut g);
            (-lp / n, g)
        })
        .collect();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, x) in grad.iter_mut().zip(&g) {
            *a += x;
        }
    }
    (loss / b, grad)
}

/// One teacher-forced update. Returns the new snapshot and the batch's
/// mean per-token NLL measured before the update.
pub fn sft_step(params: &PolicyParams, batch: &[&Prompt], lr: f64, opt: &mut AdamW) -> Result<(PolicyParams, f64)> {
    if batch.is_empty() {
        return Err(Error::Config("sft_step needs a non-empty batch".into()));
    }
    let (loss, grad) = sft_loss_and_grad(params, batch);
    check_finite("sft loss", loss)?;
    Ok((opt.step(params, &grad, lr), loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftLogRecord {
    pub phase: String,
    pub step: u64,
    pub learning_rate: f64,
    pub nll: f64,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: PolicyParams,
    pub log: Vec<SftLogRecord>,
    /// Global step counter after training (`start_step` + steps taken).
    pub step: u64,
}

/// Shuffled mini-batch training with linear learning-rate decay.
///
/// `start_step` only offsets the step counter recorded in the log so a
/// resumed run continues numbering where the previous one stopped.
pub fn sft_train(params: &PolicyParams, prompts: &[Prompt], cfg: &SftConfig, start_step: u64) -> Result<SftOutcome> {
    cfg.validate()?;
    let total = if prompts.is_empty() { 0 } else { cfg.total_steps(prompts.len()) };
    let mut order = Vec::with_capacity(total * cfg.batch_size);
    let mut epoch = 0u64;
    while order.len() < total * cfg.batch_size {
        let mut idx: Vec<usize> = (0..prompts.len()).collect();
        idx.shuffle(&mut seed::rng(seed::derive(cfg.seed, 0x5F7_0000 + epoch)));
        order.extend(idx);
        epoch += 1;
    }
    let mut opt = AdamW::new(params.len(), cfg.weight_decay);
    let mut current = params.clone();
    let mut log = Vec::with_capacity(total);
    for k in 0..total {
        let lr = cfg.learning_rate * (1.0 - k as f64 / total as f64);
        let batch: Vec<&Prompt> = order[k * cfg.batch_size..(k + 1) * cfg.batch_size]
            .iter()
            .map(|&i| &prompts[i])
            .collect();
        let (next, nll) = sft_step(&current, &batch, lr, &mut opt)?;
        current = next;
        let step = start_step + k as u64 + 1;
        debug!("sft step {step}: nll {nll:.4} lr {lr:.2e}");
        log.push(SftLogRecord {
            phase: "sft".into(),
            step,
            learning_rate: lr,
            nll,
        });
    }
    Ok(SftOutcome {
        params: current,
        log,
        step: start_step + total as u64,
    })
}
