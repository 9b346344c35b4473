use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay. Moments are created lazily per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    m: ParamStore,
    v: ParamStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, t: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &ParamStore {
        &self.m
    }

    pub fn second_moments(&self) -> &ParamStore {
        &self.v
    }

    pub fn from_state(config: AdamWConfig, t: u64, m: ParamStore, v: ParamStore) -> Result<Self> {
        for (name, mt) in m.iter() {
            if v.get(name)?.shape() != mt.shape() {
                return Err(Error::Format(format!("optimizer moments for `{name}` disagree in shape")));
            }
        }
        if m.len() != v.len() {
            return Err(Error::Format("optimizer moment sets differ".into()));
        }
        Ok(Self { config, t, m, v })
    }

    /// One update of every parameter that has a gradient.
    ///
    /// `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step. Non-finite
    /// gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        let t = self.t + 1;
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite { step: t, detail: format!("gradient of `{name}`") });
            }
            if params.get(name)?.shape() != g.shape() {
                return Err(Error::Contract(format!("gradient shape mismatch for `{name}`")));
            }
        }
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (name, g) in grads.iter() {
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name)?.data(), self.v.get(name)?.data());
            let p = params.get_mut(name)?.data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
                *pi -= lr * weight_decay * *pi;
                *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Linear warm-up from 0 to `base_lr`, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return min_lr;
    }
    if step == warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
