//! Adaptive-moment gradient descent.

use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, like: &ModelParams<T>) -> Self {
        Self {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut())
            .zip(self.v.tensors.iter_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] - step_size * m.data[i] / denom;
            }
        }
    }
}
