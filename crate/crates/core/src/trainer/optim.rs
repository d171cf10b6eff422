use serde::{Deserialize, Serialize};

use crate::policy::PolicyParams;

/// Adam with decoupled weight decay. Moments persist across steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(dim: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends `grad` (the gradient of a loss) and returns the new snapshot.
    /// A zero learning rate returns the parameters unchanged.
    pub fn step(&mut self, params: &PolicyParams, grad: &[f64], lr: f64) -> PolicyParams {
        assert_eq!(grad.len(), params.len(), "gradient dimension");
        self.t += 1;
        if lr == 0.0 {
            return params.clone();
        }
        let b1t = 1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let b2t = 1.0 - self.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let mut out = params.values().to_vec();
        for i in 0..out.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            out[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * out[i]);
        }
        params.with_values(out)
    }
}
