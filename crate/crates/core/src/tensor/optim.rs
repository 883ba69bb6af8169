//! SGD with momentum and the cosine learning-rate schedule.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter velocity buffers plus the SGD hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocities: Vec<Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl OptimizerState {
    /// Zero velocities matching the given parameter shapes.
    pub fn new(params: &[&Tensor], momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Precondition(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        if weight_decay < 0.0 {
            return Err(Error::Precondition(format!(
                "negative weight decay {weight_decay}"
            )));
        }
        Ok(OptimizerState {
            velocities: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            momentum,
            weight_decay,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    /// Replace velocity buffers wholesale (checkpoint restore).
    pub fn restore_velocities(&mut self, velocities: Vec<Tensor>) -> Result<()> {
        if velocities.len() != self.velocities.len() {
            return Err(Error::Precondition(format!(
                "velocity count {} != parameter count {}",
                velocities.len(),
                self.velocities.len()
            )));
        }
        for (new, old) in velocities.iter().zip(&self.velocities) {
            if new.shape() != old.shape() {
                return Err(Error::Precondition(format!(
                    "velocity shape {:?} != parameter shape {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.velocities = velocities;
        Ok(())
    }
}

/// One SGD step over a parameter list:
/// `v <- momentum * v + (grad + weight_decay * param)`,
/// `param <- param - lr * v`.
pub fn sgd_momentum_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Precondition(format!("non-positive lr {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::Precondition(format!(
            "param/grad/velocity counts differ: {}/{}/{}",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    let momentum = state.momentum;
    let wd = state.weight_decay;
    for ((param, grad), velocity) in params.iter_mut().zip(grads).zip(&mut state.velocities) {
        if param.shape() != grad.shape() || param.shape() != velocity.shape() {
            return Err(Error::Precondition(format!(
                "shape mismatch: param {:?}, grad {:?}, velocity {:?}",
                param.shape(),
                grad.shape(),
                velocity.shape()
            )));
        }
        let pv = param.values_mut();
        let gv = grad.values();
        let vv = velocity.values_mut();
        for i in 0..pv.len() {
            vv[i] = momentum * vv[i] + (gv[i] + wd * pv[i]);
            pv[i] -= lr * vv[i];
        }
    }
    Ok(())
}

/// Cosine schedule: `lr_min + 0.5 * (lr_max - lr_min) * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Precondition("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Precondition(format!(
            "step {step} > total_steps {total_steps}"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
