//! Small autoregressive token policy conditioned on a downsampled frame,
//! the task and the instruction variant.
//!
//! Parameters live in one flat vector. Gradients are exact (hand-written
//! reverse accumulation in [`net`]); no external autodiff is involved.

mod checkpoint;
mod net;

pub use checkpoint::{Checkpoint, Phase, CHECKPOINT_VERSION};

pub(crate) use net::{backward, forward};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{Instruction, Token, TokenSequence, DEFAULT_MAX_LEN, VOCAB_SIZE};
use crate::seed;
use crate::sim::{Frame, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Side of the downsampled frame grid (`S`).
    pub grid: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Number of most recent tokens fed directly to the hidden layer.
    pub context: usize,
    pub max_len: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            grid: 32,
            embed_dim: 16,
            hidden: 64,
            context: 3,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl PolicyConfig {
    pub fn feature_dim(&self) -> usize {
        self.grid * self.grid + 3 + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.embed_dim == 0 || self.hidden == 0 || self.max_len < 2 {
            return Err(Error::Config("policy: grid, embed_dim, hidden must be > 0 and max_len >= 2".into()));
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat vector.
///
/// Order: token embeddings `(V+1)×E` (last row is BOS), prefix position
/// weights `L`, feature weights `H×D`, hidden bias `H`, position offsets
/// `L×H`, context weights `C×H×E`, summary weights `H×E`, output weights
/// `V×H`, output bias `V`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub vocab: usize,
    pub feat_dim: usize,
    pub embed: usize,
    pub hidden: usize,
    pub context: usize,
    pub max_len: usize,
    pub emb: usize,
    pub lambda: usize,
    pub w_feat: usize,
    pub b_hidden: usize,
    pub pos: usize,
    pub w_ctx: usize,
    pub w_sum: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let vocab = VOCAB_SIZE;
        let (e, h, c, l) = (cfg.embed_dim, cfg.hidden, cfg.context, cfg.max_len);
        let d = cfg.feature_dim();
        let emb = 0;
        let lambda = emb + (vocab + 1) * e;
        let w_feat = lambda + l;
        let b_hidden = w_feat + h * d;
        let pos = b_hidden + h;
        let w_ctx = pos + l * h;
        let w_sum = w_ctx + c * h * e;
        let w_out = w_sum + h * e;
        let b_out = w_out + vocab * h;
        let total = b_out + vocab;
        Layout {
            vocab,
            feat_dim: d,
            embed: e,
            hidden: h,
            context: c,
            max_len: l,
            emb,
            lambda,
            w_feat,
            b_hidden,
            pos,
            w_ctx,
            w_sum,
            w_out,
            b_out,
            total,
        }
    }
}

/// Immutable parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    layout: Layout,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Self {
        let layout = Layout::new(&config);
        let values = vec![0.0; layout.total];
        PolicyParams { config, layout, values }
    }

    /// Random initialization scaled by fan-in.
    pub fn init(config: PolicyConfig, init_seed: u64) -> Self {
        let mut p = PolicyParams::zeros(config);
        let l = p.layout.clone();
        let mut rng = seed::rng(init_seed);
        let mut fill = |start: usize, len: usize, std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            if len == 0 {
                return;
            }
            let n = Normal::new(0.0, std).expect("finite std");
            for v in &mut p.values[start..start + len] {
                *v = n.sample(rng);
            }
        };
        let (e, h, c) = (l.embed, l.hidden, l.context);
        fill(l.emb, (l.vocab + 1) * e, 0.5, &mut rng);
        fill(l.w_feat, h * l.feat_dim, 1.0 / (l.feat_dim as f64).sqrt(), &mut rng);
        fill(l.pos, l.max_len * h, 0.1, &mut rng);
        fill(l.w_ctx, c * h * e, 1.0 / ((c * e) as f64).sqrt(), &mut rng);
        fill(l.w_sum, h * e, 0.5 / (e as f64).sqrt(), &mut rng);
        fill(l.w_out, l.vocab * h, 1.0 / (h as f64).sqrt(), &mut rng);
        for v in &mut p.values[l.lambda..l.lambda + l.max_len] {
            *v = 1.0;
        }
        p
    }

    pub fn from_values(config: PolicyConfig, values: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&config);
        if values.len() != layout.total {
            return Err(Error::Dimension(format!(
                "expected {} parameters for {config:?}, got {}",
                layout.total,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector contains non-finite values".into()));
        }
        Ok(PolicyParams { config, layout, values })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy with `values` replaced; dimensions must match.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len(), "parameter dimension changed");
        PolicyParams {
            config: self.config,
            layout: self.layout.clone(),
            values,
        }
    }

    /// Euclidean distance between two snapshots of the same shape.
    pub fn distance(&self, other: &PolicyParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Deterministic observation encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Cell boundaries of the downsampling grid: cell `i` covers pixels
/// `[floor(i*N/S), floor((i+1)*N/S))`.
pub fn grid_bounds(image_size: usize, grid: usize) -> Vec<usize> {
    (0..=grid).map(|i| i * image_size / grid).collect()
}

fn task_slot(task: Task) -> usize {
    match task {
        Task::Pp => 0,
        Task::Ar => 1,
        Task::Cc | Task::GeneralSeq => 2,
    }
}

/// Block-mean downsample to `grid`×`grid` (row-major) followed by task and
/// instruction one-hots.
pub fn featurize(frame: &Frame, task: Task, instruction: Instruction, grid: usize) -> FeatureVector {
    let n = frame.size as usize;
    assert!(grid >= 1 && grid <= n, "grid must lie in 1..=image size");
    let bounds = grid_bounds(n, grid);
    let mut out = Vec::with_capacity(grid * grid + 5);
    for gy in 0..grid {
        let (y0, y1) = (bounds[gy], bounds[gy + 1]);
        for gx in 0..grid {
            let (x0, x1) = (bounds[gx], bounds[gx + 1]);
            let mut sum = 0.0f64;
            for y in y0..y1 {
                let row = &frame.pixels[y * n + x0..y * n + x1];
                sum += row.iter().map(|&p| p as f64).sum::<f64>();
            }
            out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    let mut task_hot = [0.0; 3];
    task_hot[task_slot(task)] = 1.0;
    out.extend(task_hot);
    out.extend(match instruction {
        Instruction::Ia => [1.0, 0.0],
        Instruction::Ib => [0.0, 1.0],
    });
    FeatureVector(out)
}

fn check_features(params: &PolicyParams, features: &FeatureVector) {
    assert_eq!(
        features.0.len(),
        params.layout.feat_dim,
        "feature dimension does not match policy"
    );
}

/// Next-token distribution after `prefix`.
pub fn token_distribution(params: &PolicyParams, features: &FeatureVector, prefix: &[Token]) -> Vec<f64> {
    check_features(params, features);
    assert!(prefix.len() < params.config.max_len, "prefix reaches max_len");
    let mut dec = net::Decoder::new(params, &features.0);
    for t in prefix {
        dec.push(t.index());
    }
    let mut z = dec.logits();
    net::softmax_in_place(&mut z);
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledCompletion {
    pub tokens: TokenSequence,
    /// Per-token log-probabilities under the untempered policy.
    pub logprobs: Vec<f64>,
    pub greedy: bool,
}

impl SampledCompletion {
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

fn decode<R: Rng>(params: &PolicyParams, features: &FeatureVector, temperature: Option<f64>, rng: &mut R) -> SampledCompletion {
    check_features(params, features);
    let mut dec = net::Decoder::new(params, &features.0);
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    while tokens.len() < params.config.max_len {
        let z = dec.logits();
        let mut p = z.clone();
        net::softmax_in_place(&mut p);
        let pick = match temperature {
            None => argmax(&p),
            Some(t) => {
                let mut q: Vec<f64> = z.iter().map(|v| v / t).collect();
                net::softmax_in_place(&mut q);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = q.len() - 1;
                for (i, qi) in q.iter().enumerate() {
                    acc += qi;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        logprobs.push(p[pick].ln());
        let tok = Token::from_index(pick).expect("vocabulary index");
        tokens.push(tok);
        if tok == Token::EOS {
            break;
        }
        dec.push(pick);
    }
    SampledCompletion {
        tokens: TokenSequence::new(tokens),
        logprobs,
        greedy: temperature.is_none(),
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Ancestral sampling at `temperature` until EOS or `max_len` tokens.
pub fn sample(params: &PolicyParams, features: &FeatureVector, temperature: f64, rng_seed: u64) -> SampledCompletion {
    sample_with(params, features, temperature, &mut seed::rng(rng_seed))
}

pub fn sample_with<R: Rng>(params: &PolicyParams, features: &FeatureVector, temperature: f64, rng: &mut R) -> SampledCompletion {
    assert!(temperature > 0.0, "temperature must be positive");
    decode(params, features, Some(temperature), rng)
}

/// Argmax decoding; ties go to the lowest token index.
pub fn greedy(params: &PolicyParams, features: &FeatureVector) -> SampledCompletion {
    decode(params, features, None, &mut seed::rng(0))
}

fn indices(tokens: &TokenSequence) -> Vec<usize> {
    tokens.tokens().iter().map(|t| t.index()).collect()
}

/// Per-token log-probabilities under teacher forcing.
pub fn token_logprobs(params: &PolicyParams, features: &FeatureVector, tokens: &TokenSequence) -> Vec<f64> {
    check_features(params, features);
    forward(params, &features.0, &indices(tokens)).token_logprobs()
}

pub fn sequence_logprob(params: &PolicyParams, features: &FeatureVector, tokens: &TokenSequence) -> f64 {
    token_logprobs(params, features, tokens).iter().sum()
}

/// Teacher-forced sequence log-probability and its exact gradient.
pub fn sequence_logprob_and_grad(params: &PolicyParams, features: &FeatureVector, tokens: &TokenSequence) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let lp = accumulate_logprob_grad(params, features, tokens, 1.0, &mut grad);
    (lp, grad)
}

/// Adds `scale * d logprob / d params` into `grad` and returns the logprob.
pub fn accumulate_logprob_grad(
    params: &PolicyParams,
    features: &FeatureVector,
    tokens: &TokenSequence,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    check_features(params, features);
    let idx = indices(tokens);
    let trace = forward(params, &features.0, &idx);
    let dlogits: Vec<Vec<f64>> = trace
        .steps
        .iter()
        .zip(&idx)
        .map(|(s, &y)| {
            let mut g: Vec<f64> = s.probs.iter().map(|p| -scale * p).collect();
            g[y] += scale;
            g
        })
        .collect();
    backward(params, &features.0, &trace, &dlogits, grad);
    trace.token_logprobs().iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Frame;

    fn small() -> PolicyConfig {
        PolicyConfig {
            grid: 4,
            embed_dim: 3,
            hidden: 5,
            context: 2,
            max_len: 8,
        }
    }

    fn feats(cfg: &PolicyConfig, seed_: u64) -> FeatureVector {
        let mut rng = seed::rng(seed_);
        let mut v: Vec<f64> = (0..cfg.grid * cfg.grid).map(|_| rng.random()).collect();
        v.extend([1.0, 0.0, 0.0, 0.0, 1.0]);
        FeatureVector(v)
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = PolicyParams::zeros(small());
        let d = token_distribution(&p, &feats(&small(), 1), &[]);
        for q in d {
            assert!((q - 1.0 / 19.0).abs() < 1e-15);
        }
        let seq = TokenSequence::new(vec![Token::EOS]);
        let lp = sequence_logprob(&p, &feats(&small(), 1), &seq);
        assert!((lp - (1.0f64 / 19.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn distribution_sums_to_one() {
        for s in 0..20 {
            let p = PolicyParams::init(small(), s);
            let prefix = [Token::OPEN, Token::digit(3), Token::COMMA];
            let d = token_distribution(&p, &feats(&small(), s), &prefix);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.iter().all(|&q| q > 0.0));
        }
    }

    #[test]
    fn raising_one_output_bias_raises_that_token_only() {
        let p = PolicyParams::init(small(), 3);
        let f = feats(&small(), 3);
        let before = token_distribution(&p, &f, &[]);
        let mut v = p.values().to_vec();
        v[p.layout().b_out + 7] += 0.5;
        let after = token_distribution(&p.with_values(v), &f, &[]);
        for (i, (a, b)) in after.iter().zip(&before).enumerate() {
            if i == 7 {
                assert!(a > b);
            } else {
                assert!(a < b);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_self_consistent() {
        let p = PolicyParams::init(small(), 4);
        let f = feats(&small(), 4);
        let a = sample(&p, &f, 1.0, 99);
        let b = sample(&p, &f, 1.0, 99);
        assert_eq!(a, b);
        let recomputed = token_logprobs(&p, &f, &a.tokens);
        for (x, y) in a.logprobs.iter().zip(&recomputed) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.logprobs.iter().all(|&l| l <= 0.0));
        assert!(a.tokens.len() <= small().max_len);
    }

    #[test]
    fn cold_sampling_matches_greedy() {
        let p = PolicyParams::init(small(), 5);
        let f = feats(&small(), 5);
        let g = greedy(&p, &f);
        let cold = sample(&p, &f, 1e-6, 1);
        assert_eq!(g.tokens, cold.tokens);
        assert!(g.greedy && !cold.greedy);
    }

    #[test]
    fn featurize_constant_frames() {
        for level in [0.0f32, 0.5] {
            let frame = Frame {
                size: 40,
                pixels: vec![level; 1600],
                ground_truth: vec![],
            };
            let f = featurize(&frame, Task::Ar, Instruction::Ib, 8);
            assert!(f.0[..64].iter().all(|&v| (v - level as f64).abs() < 1e-12));
            assert_eq!(&f.0[64..], &[0.0, 1.0, 0.0, 0.0, 1.0]);
        }
    }

    fn fd_check(cfg: PolicyConfig, seed_: u64, seq: &TokenSequence) {
        let p = PolicyParams::init(cfg, seed_);
        let f = feats(&cfg, seed_);
        let (lp, g) = sequence_logprob_and_grad(&p, &f, seq);
        assert!((lp - sequence_logprob(&p, &f, seq)).abs() < 1e-12);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..p.len() {
            let mut plus = p.values().to_vec();
            plus[i] += h;
            let mut minus = p.values().to_vec();
            minus[i] -= h;
            let num = (sequence_logprob(&p.with_values(plus), &f, seq) - sequence_logprob(&p.with_values(minus), &f, seq)) / (2.0 * h);
            let err = (num - g[i]).abs() / (1.0 + num.abs());
            worst = worst.max(err);
        }
        assert!(worst < 1e-6, "worst relative gradient error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let seq = TokenSequence::from_canonical("[12,3,40,5]a").unwrap();
        fd_check(small(), 7, &seq);
        let cfg0 = PolicyConfig { context: 0, ..small() };
        fd_check(cfg0, 8, &TokenSequence::from_canonical("s").unwrap());
        let cfg4 = PolicyConfig { context: 4, max_len: 12, ..small() };
        fd_check(cfg4, 9, &TokenSequence::from_canonical("[1,1,1,1]d").unwrap());
    }

    #[test]
    fn from_values_checks_dimension() {
        assert!(matches!(
            PolicyParams::from_values(small(), vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
        let n = Layout::new(&small()).total;
        assert!(PolicyParams::from_values(small(), vec![0.0; n]).is_ok());
    }
}
