//! Dense 64-bit tensors, a recording tape with reverse-mode gradients, AdamW,
//! and a finite-difference gradient checker.
//!
//! Reductions always sum left to right in index order, so a given graph
//! produces bit-identical values and gradients on every run.

mod check;
mod optim;
mod tape;
mod tensor;

pub use check::{grad_check, relative_error, GradCheckReport};
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig, OptimizerState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{invalid, Result};
use alloc::vec::Vec;

/// Row-wise log-softmax of a single vector.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid!("log_softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("log_softmax input is not finite"));
    }
    let mut out = alloc::vec![0.0; v.len()];
    tape::log_softmax_row(v, &mut out);
    Ok(out)
}

/// Normalize to zero mean and unit population variance, without affine terms.
pub fn batch_norm(values: &[f64], eps: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(invalid!("batch_norm of an empty vector"));
    }
    if values.iter().any(|x| !x.is_finite()) || !(eps >= 0.0) {
        return Err(invalid!("batch_norm input is not finite"));
    }
    let mut out = alloc::vec![0.0; values.len()];
    tape::batch_norm_forward(values, eps, &mut out);
    Ok(out)
}
