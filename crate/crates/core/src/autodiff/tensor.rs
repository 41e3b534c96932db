use crate::error::{invalid, Result};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Row-major dense array of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(invalid!("tensor shape {shape:?} must be non-empty and positive"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(invalid!("tensor entry {i} is not finite"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: alloc::vec![0.0; numel],
        }
    }

    pub fn scalar(x: f64) -> Result<Self> {
        Self::new(alloc::vec![1], alloc::vec![x])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// View as a matrix: the last axis is the column count.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols, cols)
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}
