//! Adam with the inverse-square-root warmup schedule and global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Multiplier on the schedule; zero freezes the parameters.
    pub lr_scale: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_scale: 1.0,
            warmup: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    /// `lr_scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)` for
    /// steps counted from 1.
    pub fn learning_rate(&self, d_model: usize, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.lr_scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: OptimizerConfig,
    d_model: usize,
    step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// What one optimizer step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub learning_rate: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl Adam {
    pub fn new(config: OptimizerConfig, store: &ParamStore<f32>, d_model: usize) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            config,
            d_model,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Clips `grads` in place and applies one update.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &mut Grads<f32>) -> Result<StepInfo> {
        if !grads.all_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let norm = grads.global_norm() as f64;
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            grads.scale((self.config.clip_norm / norm) as f32);
        }
        self.step += 1;
        let lr = self.config.learning_rate(self.d_model, self.step);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let i = id.index();
            let g = &grads.values[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g[k] as f64;
                let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + self.config.eps);
                p[k] -= update as f32;
            }
        }
        Ok(StepInfo {
            learning_rate: lr,
            grad_norm: norm,
        })
    }
}
