//! Optimizers, gradient clipping and learning-rate schedules.

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Global L2 norm over the gradients of `ids`.
pub fn global_norm(store: &ParamStore, ids: &[ParamId]) -> f64 {
    ids.iter()
        .flat_map(|&id| store.grad(id).data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Optimizer with per-parameter state. SGD keeps one velocity buffer per
/// parameter; Adam keeps first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// Zero disables clipping.
    pub clip_norm: f64,
    pub steps: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        lr: f64,
        momentum: f64,
        clip_norm: f64,
        store: &ParamStore,
    ) -> Result<Self> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        let second = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => zeros.clone(),
        };
        Ok(Optimizer {
            kind,
            lr,
            momentum,
            clip_norm,
            steps: 0,
            first: zeros,
            second,
        })
    }

    /// Clips the gradients of `ids` to the global norm limit and applies one
    /// update. Returns the norm before clipping. Leaves parameters untouched
    /// when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<f64> {
        let norm = global_norm(store, ids);
        if !norm.is_finite() {
            let bad: Vec<&str> = ids
                .iter()
                .filter(|&&id| !store.grad(id).is_finite())
                .map(|&id| store.name(id))
                .collect();
            return Err(Error::Numeric(format!(
                "non-finite gradient in {}",
                bad.join(", ")
            )));
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        for &id in ids {
            let i = id.index();
            let grad: Vec<f64> = store.grad(id).data().iter().map(|g| g * scale).collect();
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = self.first[i].data_mut();
                    let p = store.value_mut(id).data_mut();
                    for j in 0..grad.len() {
                        v[j] = self.momentum * v[j] + grad[j];
                        p[j] -= self.lr * (grad[j] + self.momentum * v[j]);
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    let p = store.value_mut(id).data_mut();
                    for j in 0..grad.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * grad[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * grad[j] * grad[j];
                        p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(norm)
    }
}

/// Multiplies the learning rate by `factor` after `patience` evaluations
/// without an improvement larger than `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: u32,
    pub threshold: f64,
    pub best: f64,
    pub bad_evals: u32,
}

impl Plateau {
    pub fn new(factor: f64, patience: u32, threshold: f64) -> Self {
        Plateau {
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            bad_evals: 0,
        }
    }

    /// Records a validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_evals = 0;
            return lr;
        }
        self.bad_evals += 1;
        if self.bad_evals >= self.patience {
            self.bad_evals = 0;
            return lr * self.factor;
        }
        lr
    }
}

/// Probability of feeding back the model's own prediction at `epoch`.
pub fn scheduled_sampling_ratio(epoch: u64) -> f64 {
    (0.05 * (1 + epoch / 5) as f64).min(0.25)
}
