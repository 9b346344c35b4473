//! Optimization: AdamW, the learning-rate schedule, the distillation loop,
//! checkpoints, linear probes and the gradient-check driver.

mod checkpoint;
mod distill_loop;
mod grad_check;
mod optim;
mod probe;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_VERSION};
pub use distill_loop::{train_distill, DistillSetup, DistillTrainer};
pub use grad_check::{run_grad_check, GradCheckConfig, GRAD_CHECK_MAX_PARAMS, GRAD_CHECK_TOLERANCE};
pub use optim::{lr_at, AdamW, AdamWConfig};
pub use probe::{
    encoder_features, select_few_shot, train_linear_classifier, train_probe, LinearClassifier, ProbeData, ProbeOutcome,
    ProbeTargets,
};

use serde::{Deserialize, Serialize};

use crate::data::FlipFlags;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[default]
    Distill,
    ProbeFrozen,
    ProbeFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default = "one")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub regime: Regime,
    /// Restricts probe training to the first `k` videos.
    #[serde(default)]
    pub few_shot_k: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub augment: FlipFlags,
}

fn default_lr() -> f64 {
    1e-4
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, base_lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            base_lr,
            min_lr: 0.0,
            warmup_epochs: 0,
            seed,
            regime: Regime::Distill,
            few_shot_k: None,
            optimizer: AdamWConfig::default(),
            augment: FlipFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("need 0 <= min_lr <= base_lr (got {}, {})", self.min_lr, self.base_lr)));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if let Some(k) = self.few_shot_k {
            if self.regime == Regime::Distill {
                return Err(Error::Config("few_shot_k only applies to probe regimes".into()));
            }
            if !(1..=5).contains(&k) {
                return Err(Error::Config(format!("few_shot_k must be between 1 and 5, got {k}")));
            }
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer needs betas in [0, 1), eps > 0, weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(n)
    }

    pub fn warmup_steps(&self, n: usize) -> u64 {
        self.warmup_epochs as u64 * self.steps_per_epoch(n)
    }

    /// Learning rate used for the update made at 0-based step `step`.
    pub fn lr_for_step(&self, step: u64, n: usize) -> f64 {
        lr_at(step + 1, self.total_steps(n), self.warmup_steps(n), self.base_lr, self.min_lr)
    }
}

/// Shuffled sample order for an epoch, derived from `(seed, epoch)` only.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::init::rng_for(seed, "epoch", epoch));
    idx
}
