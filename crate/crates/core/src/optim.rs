//! Parameter updates: plain gradient descent or Adam, with linear warmup.

use serde::{Deserialize, Serialize};

use crate::policy::PolicyParameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning rate at `step` (0-based): linear ramp over the first
/// `warmup_fraction · total_steps` steps, then constant.
pub fn warmup_lr(base: f64, step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).ceil();
    if warmup <= 0.0 {
        return base;
    }
    base * ((step + 1) as f64 / warmup).min(1.0)
}

/// Rescales `grad` in place so its global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut PolicyParameters, max_norm: f64) -> f64 {
    let norm = grad.dot(grad).sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grad.arrays_mut() {
            for x in t.data.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Minimizing optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Option<PolicyParameters>,
    v: Option<PolicyParameters>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: None, v: None }
    }

    /// Moves `params` against `grad`.
    pub fn step(&mut self, params: &mut PolicyParameters, grad: &PolicyParameters, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grad, -lr),
            OptimizerKind::Adam => {
                self.step += 1;
                let m = self.m.get_or_insert_with(|| grad.zeros_like());
                let v = self.v.get_or_insert_with(|| grad.zeros_like());
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                let arrays = params.arrays_mut().iter_mut().zip(grad.arrays());
                for (((p, g), m), v) in arrays.zip(m.arrays_mut()).zip(v.arrays_mut()) {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                        v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                        let mh = m.data[i] / c1;
                        let vh = v.data[i] / c2;
                        p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
