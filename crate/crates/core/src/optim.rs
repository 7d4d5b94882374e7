//! First-order optimizers over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Optimizer bound to one flat parameter buffer of fixed length.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    // Adam moments; empty for SGD.
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![T::zero(); num_params], vec![T::zero(); num_params]),
        };
        Self {
            kind,
            lr: T::of(lr),
            m,
            v,
            t: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.f64()
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p = *p - self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let b1 = T::of(Self::BETA1);
                let b2 = T::of(Self::BETA2);
                let c1 = T::one() - b1.powi(self.t);
                let c2 = T::one() - b2.powi(self.t);
                let eps = T::of(Self::EPS);
                for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
                    self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    *p = *p - self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}
