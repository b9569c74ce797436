//! Parameter updates: plain SGD for oracle tests and an RMS-style adaptive
//! rule for real training runs, plus global-norm gradient clipping.

use super::{Gradients, ParamSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    /// `acc ← decay·acc + (1−decay)·g²; w ← w − lr·g / (√acc + damping)`.
    RmsProp { decay: f64, damping: f64 },
}

/// Default adaptive settings used by the training loop.
pub const RMSPROP_DECAY: f64 = 0.99;
pub const RMSPROP_DAMPING: f64 = 1e-6;
pub const DEFAULT_LR: f64 = 5e-4;

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Squared-gradient accumulator, flat, lazily sized on first step.
    acc: Vec<f64>,
    /// Steps rejected because the gradients were not finite.
    pub rejected_steps: usize,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            lr,
            acc: Vec::new(),
            rejected_steps: 0,
        }
    }

    pub fn rmsprop(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::RmsProp {
                decay: RMSPROP_DECAY,
                damping: RMSPROP_DAMPING,
            },
            lr,
            acc: Vec::new(),
            rejected_steps: 0,
        }
    }

    /// In-place parameter update. Non-finite gradients reject the step (the
    /// incident is counted and `Ok(false)` returned); accumulators still decay
    /// on zero gradients as the update rule dictates.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<bool> {
        assert!(self.lr > 0.0, "learning rate must be positive");
        let g = grads.flatten();
        if g.iter().any(|v| !v.is_finite()) {
            self.rejected_steps += 1;
            return Ok(false);
        }
        let mut w = params.flatten();
        assert_eq!(w.len(), g.len(), "gradient shape does not mirror parameters");
        match self.kind {
            OptimizerKind::Sgd => {
                for (wv, gv) in w.iter_mut().zip(&g) {
                    *wv -= self.lr * gv;
                }
            }
            OptimizerKind::RmsProp { decay, damping } => {
                if self.acc.is_empty() {
                    self.acc = vec![0.0; g.len()];
                }
                for ((wv, gv), acc) in w.iter_mut().zip(&g).zip(&mut self.acc) {
                    *acc = decay * *acc + (1.0 - decay) * gv * gv;
                    *wv -= self.lr * gv / (acc.sqrt() + damping);
                }
            }
        }
        params.assign_flat(&w);
        if !params.is_finite() {
            return Err(Error::NonFinite(
                "parameters became non-finite after optimizer step".into(),
            ));
        }
        Ok(true)
    }

    /// Exposes the accumulator for fixture tests.
    #[cfg(test)]
    pub(crate) fn accumulator(&self) -> &[f64] {
        &self.acc
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the scale factor that was applied (1.0 when no clipping occurred).
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        grads.scale(factor);
        factor
    } else {
        1.0
    }
}
