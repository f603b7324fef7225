//! Bias-corrected Adam with dense and sparse (touched-entries-only) updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

/// Gradient accumulator over a large parameter vector that remembers which entries were
/// written, so clearing and sparse updates cost O(touched).
#[derive(Debug, Clone)]
pub struct SparseGradient {
    values: Vec<f64>,
    touched: Vec<usize>,
    marked: Vec<bool>,
}

impl SparseGradient {
    pub fn new(len: usize) -> Self {
        Self { values: vec![0.0; len], touched: Vec::new(), marked: vec![false; len] }
    }

    #[inline]
    pub fn add(&mut self, i: usize, g: f64) {
        if !self.marked[i] {
            self.marked[i] = true;
            self.touched.push(i);
        }
        self.values[i] += g;
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn touched(&self) -> &[usize] {
        &self.touched
    }

    pub fn clear(&mut self) {
        for &i in &self.touched {
            self.values[i] = 0.0;
            self.marked[i] = false;
        }
        self.touched.clear();
    }

    pub fn is_finite(&self) -> bool {
        self.touched.iter().all(|&i| self.values[i].is_finite())
    }
}

/// Moment estimates for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    fn update(&mut self, cfg: &AdamConfig, lr_t: f64, i: usize, p: &mut f64, g: f64) {
        self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
        self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
        if g != 0.0 {
            *p -= lr_t * self.m[i] / (self.v[i].sqrt() + cfg.eps_hat(self.step));
        }
    }

    /// Step size with both bias corrections folded in.
    fn corrected_lr(&self, cfg: &AdamConfig, lr: f64) -> f64 {
        let t = self.step as i32;
        lr * (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t))
    }

    /// Dense update. Every moment decays; entries whose gradient is exactly zero keep
    /// their value this step.
    pub fn step_dense(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &[f64], lr: f64, group: &'static str) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "parameter and gradient shapes differ");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { group, iter: self.step as usize });
        }
        self.step += 1;
        let lr_t = self.corrected_lr(cfg, lr);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(cfg, lr_t, i, p, *g);
        }
        Ok(())
    }

    /// Sparse update: only entries with a nonzero accumulated gradient touch their
    /// moments or values.
    pub fn step_sparse(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &SparseGradient, lr: f64, group: &'static str) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite { group, iter: self.step as usize });
        }
        self.step += 1;
        let lr_t = self.corrected_lr(cfg, lr);
        for &i in grads.touched() {
            let g = grads.get(i);
            if g != 0.0 {
                self.update(cfg, lr_t, i, &mut params[i], g);
            }
        }
        Ok(())
    }
}

impl AdamConfig {
    /// `eps` rescaled for the folded bias-correction form so the update equals
    /// `lr * m_hat / (sqrt(v_hat) + eps)` exactly.
    fn eps_hat(&self, step: u64) -> f64 {
        self.eps * (1.0 - self.beta2.powi(step as i32)).sqrt()
    }
}
