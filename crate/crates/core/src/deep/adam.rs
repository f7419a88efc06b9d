use serde::{Deserialize, Serialize};

use crate::error::{MevError, Result};

/// Bias-corrected Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, rate: f64) -> Self {
        Self { rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_except(params, grads, None)
    }

    /// One update that leaves the parameters flagged in `frozen` (and their
    /// moments) untouched.
    pub fn step_except(&mut self, params: &mut [f64], grads: &[f64], frozen: Option<&[bool]>) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || frozen.is_some_and(|f| f.len() != n) {
            return Err(MevError::ShapeMismatch("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..n {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
