//! Forward pass and reverse-mode gradient accumulation for the token policy.
//!
//! For position `t` (predicting token `t` from the prefix `y[..t]`):
//!
//! ```text
//! a_t = W_feat x + b_hidden + pos[t] + sum_k W_ctx[k] emb[y_{t-1-k}] + W_sum s_t
//! s_t = sum_{j<t} lambda[j] emb[y_j]
//! h_t = tanh(a_t)
//! z_t = W_out h_t + b_out,   p_t = softmax(z_t)
//! ```
//!
//! Context slots before the start of the sequence read the BOS embedding row.

use super::{Layout, PolicyParams};
use crate::format::VOCAB_SIZE;

/// Embedding row used for context slots before the first token.
pub(crate) const BOS: usize = VOCAB_SIZE;

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `W_feat x + b_hidden`, shared by every position of a sequence.
pub(crate) fn feature_projection(params: &PolicyParams, x: &[f64]) -> Vec<f64> {
    let l = params.layout();
    let w = params.values();
    (0..l.hidden)
        .map(|i| {
            let row = &w[l.w_feat + i * l.feat_dim..l.w_feat + (i + 1) * l.feat_dim];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[l.b_hidden + i]
        })
        .collect()
}

fn context_tokens(prefix: &[usize], context: usize) -> Vec<usize> {
    (0..context)
        .map(|k| {
            if prefix.len() > k {
                prefix[prefix.len() - 1 - k]
            } else {
                BOS
            }
        })
        .collect()
}

/// Hidden activation and logits at position `prefix.len()`.
fn step(l: &Layout, w: &[f64], base: &[f64], prefix: &[usize], summary: &[f64], ctx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let t = prefix.len();
    let (e, h) = (l.embed, l.hidden);
    let mut a: Vec<f64> = base.to_vec();
    for i in 0..h {
        let mut acc = w[l.pos + t * h + i];
        for (k, &tok) in ctx.iter().enumerate() {
            let wrow = &w[l.w_ctx + (k * h + i) * e..l.w_ctx + (k * h + i + 1) * e];
            let emb = &w[l.emb + tok * e..l.emb + (tok + 1) * e];
            acc += wrow.iter().zip(emb).map(|(p, q)| p * q).sum::<f64>();
        }
        let srow = &w[l.w_sum + i * e..l.w_sum + (i + 1) * e];
        acc += srow.iter().zip(summary).map(|(p, q)| p * q).sum::<f64>();
        a[i] += acc;
    }
    let hid: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
    let logits: Vec<f64> = (0..l.vocab)
        .map(|j| {
            let row = &w[l.w_out + j * h..l.w_out + (j + 1) * h];
            row.iter().zip(&hid).map(|(p, q)| p * q).sum::<f64>() + w[l.b_out + j]
        })
        .collect();
    (hid, logits)
}

/// Incremental decoder state for sampling.
pub(crate) struct Decoder<'a> {
    params: &'a PolicyParams,
    base: Vec<f64>,
    summary: Vec<f64>,
    pub(crate) prefix: Vec<usize>,
}

impl<'a> Decoder<'a> {
    pub(crate) fn new(params: &'a PolicyParams, x: &[f64]) -> Self {
        Decoder {
            params,
            base: feature_projection(params, x),
            summary: vec![0.0; params.layout().embed],
            prefix: Vec::new(),
        }
    }

    pub(crate) fn logits(&self) -> Vec<f64> {
        let l = self.params.layout();
        let ctx = context_tokens(&self.prefix, l.context);
        step(l, self.params.values(), &self.base, &self.prefix, &self.summary, &ctx).1
    }

    pub(crate) fn push(&mut self, token: usize) {
        let l = self.params.layout();
        let w = self.params.values();
        let j = self.prefix.len();
        let lam = w[l.lambda + j];
        for (s, q) in self.summary.iter_mut().zip(&w[l.emb + token * l.embed..l.emb + (token + 1) * l.embed]) {
            *s += lam * q;
        }
        self.prefix.push(token);
    }
}

pub(crate) struct StepCache {
    ctx: Vec<usize>,
    summary: Vec<f64>,
    hidden: Vec<f64>,
    pub(crate) probs: Vec<f64>,
}

/// Teacher-forced activations for every position of a token sequence.
pub(crate) struct Trace {
    pub(crate) tokens: Vec<usize>,
    pub(crate) steps: Vec<StepCache>,
}

impl Trace {
    /// `log p_t(tokens[t])` for each position.
    pub(crate) fn token_logprobs(&self) -> Vec<f64> {
        self.steps
            .iter()
            .zip(&self.tokens)
            .map(|(s, &y)| s.probs[y].ln())
            .collect()
    }
}

pub(crate) fn forward(params: &PolicyParams, x: &[f64], tokens: &[usize]) -> Trace {
    let l = params.layout();
    let w = params.values();
    let base = feature_projection(params, x);
    let mut summary = vec![0.0; l.embed];
    let mut steps = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let prefix = &tokens[..t];
        let ctx = context_tokens(prefix, l.context);
        let (hidden, logits) = step(l, w, &base, prefix, &summary, &ctx);
        let mut probs = logits;
        softmax_in_place(&mut probs);
        steps.push(StepCache {
            ctx,
            summary: summary.clone(),
            hidden,
            probs,
        });
        let tok = tokens[t];
        let lam = w[l.lambda + t];
        for (s, q) in summary.iter_mut().zip(&w[l.emb + tok * l.embed..l.emb + (tok + 1) * l.embed]) {
            *s += lam * q;
        }
    }
    Trace {
        tokens: tokens.to_vec(),
        steps,
    }
}

/// Accumulates `sum_t dlogits[t] . dz_t/dparams` into `grad`.
pub(crate) fn backward(params: &PolicyParams, x: &[f64], trace: &Trace, dlogits: &[Vec<f64>], grad: &mut [f64]) {
    let l = params.layout();
    let w = params.values();
    let (e, h, v) = (l.embed, l.hidden, l.vocab);
    debug_assert_eq!(grad.len(), l.total);
    let mut da_sum = vec![0.0; h];
    let mut da = vec![0.0; h];
    let mut dsum = vec![0.0; e];

    for (t, (cache, g)) in trace.steps.iter().zip(dlogits).enumerate() {
        if g.iter().all(|&q| q == 0.0) {
            continue;
        }
        // output layer
        da.iter_mut().for_each(|q| *q = 0.0);
        for j in 0..v {
            let gj = g[j];
            if gj == 0.0 {
                continue;
            }
            grad[l.b_out + j] += gj;
            let row = l.w_out + j * h;
            for i in 0..h {
                grad[row + i] += gj * cache.hidden[i];
                da[i] += gj * w[row + i];
            }
        }
        for i in 0..h {
            da[i] *= 1.0 - cache.hidden[i] * cache.hidden[i];
            da_sum[i] += da[i];
            grad[l.pos + t * h + i] += da[i];
        }
        // context embeddings
        for (k, &tok) in cache.ctx.iter().enumerate() {
            let emb = l.emb + tok * e;
            for i in 0..h {
                let row = l.w_ctx + (k * h + i) * e;
                let di = da[i];
                for q in 0..e {
                    grad[row + q] += di * w[emb + q];
                    grad[emb + q] += di * w[row + q];
                }
            }
        }
        // prefix summary
        dsum.iter_mut().for_each(|q| *q = 0.0);
        for i in 0..h {
            let row = l.w_sum + i * e;
            let di = da[i];
            for q in 0..e {
                grad[row + q] += di * cache.summary[q];
                dsum[q] += di * w[row + q];
            }
        }
        for (j, &tok) in trace.tokens[..t].iter().enumerate() {
            let emb = l.emb + tok * e;
            let lam = w[l.lambda + j];
            let mut dl = 0.0;
            for q in 0..e {
                dl += dsum[q] * w[emb + q];
                grad[emb + q] += lam * dsum[q];
            }
            grad[l.lambda + j] += dl;
        }
    }

    for i in 0..h {
        let d = da_sum[i];
        if d == 0.0 {
            continue;
        }
        grad[l.b_hidden + i] += d;
        let row = l.w_feat + i * l.feat_dim;
        for (gq, xq) in grad[row..row + l.feat_dim].iter_mut().zip(x) {
            *gq += d * xq;
        }
    }
}
