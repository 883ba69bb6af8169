//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! The [`Tape`] records every operation whose inputs require gradients and
//! replays them in reverse for the backward pass. All storage is row-major
//! `f64`; shapes must match exactly (the only broadcast is bias-add over
//! rows). Every forward operation checks its output for NaN/Inf and fails
//! instead of propagating poison.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{grad_check, grad_check_at, grad_check_sampled, GradCheckReport};
pub use optim::{cosine_lr, sgd_momentum_step, OptimizerState};
pub use tape::{Gradients, NodeId, Tape, GATHER_ZERO_ROW};

use crate::error::{Error, Result};

/// Dense multi-dimensional value, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor, checking that `product(shape) == values.len()`.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Precondition(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
        })
    }

    /// Zero-filled tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
        }
    }

    /// Rank-1 scalar wrapper (shape `[1]`).
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
        }
    }

    /// 2-D tensor from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Precondition("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Tensor::new(vec![n_rows, n_cols], values)
    }

    /// Mark this tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// True for any single-element tensor regardless of rank.
    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Precondition(format!(
                "item() on shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
