use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain gradient descent, no momentum or weight decay.
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Update rule for one parameter group. The group's tensors must be passed
/// in the same order on every step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.iter()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.moments.is_empty() {
                    self.moments = params.iter().map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()])).collect();
                }
                let t = self.steps as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(&mut self.moments) {
                    for (((w, &d), m), v) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = BETA1 * *m + (1.0 - BETA1) * d;
                        *v = BETA2 * *v + (1.0 - BETA2) * d * d;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}
