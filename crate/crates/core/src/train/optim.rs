//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: match kind {
                OptimizerKind::Adam { .. } => zeros(),
                OptimizerKind::Sgd { .. } => Vec::new(),
            },
        }
    }

    /// Parameter deltas for one step; advances the optimizer state.
    pub fn update(&mut self, grads: &[Tensor<T>]) -> Vec<Tensor<T>> {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter tensor");
        self.step += 1;
        let lr = T::of(self.lr);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = T::of(momentum);
                grads
                    .iter()
                    .zip(&mut self.m)
                    .map(|(g, buf)| {
                        let d = g
                            .data()
                            .iter()
                            .zip(buf.iter_mut())
                            .map(|(&gi, b)| {
                                *b = if momentum == 0.0 { gi } else { mu * *b + gi };
                                -(lr * *b)
                            })
                            .collect();
                        Tensor::from_vec(g.shape(), d)
                    })
                    .collect()
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let c1 = T::of(1.0 - beta1.powi(self.step as i32));
                let c2 = T::of(1.0 - beta2.powi(self.step as i32));
                let (one, eps) = (T::one(), T::of(eps));
                grads
                    .iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(g, (m, v))| {
                        let d = g
                            .data()
                            .iter()
                            .zip(m.iter_mut().zip(v.iter_mut()))
                            .map(|(&gi, (mi, vi))| {
                                *mi = b1 * *mi + (one - b1) * gi;
                                *vi = b2 * *vi + (one - b2) * gi * gi;
                                let mhat = *mi / c1;
                                let vhat = *vi / c2;
                                -(lr * mhat / (vhat.sqrt() + eps))
                            })
                            .collect();
                        Tensor::from_vec(g.shape(), d)
                    })
                    .collect()
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        let deltas = self.update(grads);
        for (p, d) in params.tensors_mut().zip(&deltas) {
            p.add_assign(d);
        }
    }
}
