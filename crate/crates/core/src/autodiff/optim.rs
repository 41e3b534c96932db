use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{invalid, Result};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// AdamW hyperparameters. Defaults: lr 1e-4, weight decay 1e-4, standard betas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Alias kept for call sites that read better with the optimizer's name.
pub type AdamW = AdamWConfig;

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| alloc::vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| alloc::vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected AdamW update at learning rate `lr`.
    ///
    /// Parameters without an entry in `grads` are left untouched, weight
    /// decay included; that is how frozen parameter groups are expressed.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(invalid!("learning rate must be positive, got {lr}"));
        }
        if params.len() != self.m.len() {
            return Err(invalid!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            ));
        }
        for (&id, g) in &grads.by_param {
            let p = params
                .get(id)
                .ok_or_else(|| invalid!("gradient for unknown parameter {id}"))?;
            if p.numel() != g.len() || self.m[id].len() != g.len() {
                return Err(invalid!(
                    "parameter {id} has {} values, gradient has {}",
                    p.numel(),
                    g.len()
                ));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        let decay = 1.0 - lr * weight_decay;
        for (&id, g) in &grads.by_param {
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = params[id].data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient, in parameter-id order.
pub fn global_norm(grads: &Gradients) -> f64 {
    let sq = grads
        .by_param
        .values()
        .flat_map(|g| g.iter())
        .fold(0.0, |a, &x| a + x * x);
    libm::sqrt(sq)
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.by_param.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}
