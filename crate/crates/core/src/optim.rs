//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. Parameters are addressed by slot index; moment buffers
/// are allocated the first time a slot is updated.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Advance the step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.len() <= slot {
                    self.m.resize(slot + 1, Vec::new());
                    self.v.resize(slot + 1, Vec::new());
                }
                if self.m[slot].len() != params.len() {
                    self.m[slot] = vec![0.0; params.len()];
                    self.v[slot] = vec![0.0; params.len()];
                }
                let t = self.t.max(1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    params[i] -= self.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }

    /// Forget the moments of `range` within `slot`.
    pub fn reset(&mut self, slot: usize, range: std::ops::Range<usize>) {
        if let (Some(m), Some(v)) = (self.m.get_mut(slot), self.v.get_mut(slot)) {
            if range.end <= m.len() {
                m[range.clone()].iter_mut().for_each(|x| *x = 0.0);
                v[range].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}
