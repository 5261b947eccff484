use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the layout of the
/// [`ParamSet`] they were created for.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// Applies one update from the gradient slots of `params` and clears
    /// them. Every tensor must carry a gradient; all must be finite.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid("optimizer/parameter layout mismatch"));
        }
        for (i, t) in params.tensors().iter().enumerate() {
            let g = t
                .grad()
                .ok_or_else(|| Error::invalid(format!("missing gradient for `{}`", params.names()[i])))?;
            if g.len() != self.m[i].len() {
                return Err(Error::invalid("gradient shape mismatch"));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adam gradient"));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = t.data_mut();
            for j in 0..data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
