//! Multi-teacher feature distillation.
//!
//! Per step, for every teacher `t` and every feature kind `f` it emits:
//!
//! 1. the teacher feature is standardized per channel with EMA statistics,
//! 2. the matching student feature is projected by a dedicated adaptor
//!    (linear → LayerNorm → GELU → linear),
//! 3. `L_{t,f} = α·(1 − cos) + β·smoothL1` compares the two.
//!
//! The vision teacher's loss averages its CLS and patch terms, the
//! vision-language teacher's loss is its pooled term, and the total is
//! `Σ_t m_t·L_t` where the mask drops the currently easier teacher with
//! probability `p_drop`.

mod adaptor;
mod loss;
mod standardize;

pub use adaptor::{adaptor_forward, adaptor_prefix, init_adaptor, init_adaptors, AdaptorDims};
pub use loss::{
    feature_loss, sample_teacher_masks, total_distill_loss, vision_teacher_loss, vl_teacher_loss, FeatureLoss,
    FeatureLossEntry, LossReport, MaskMode, TeacherLossEntry, TeacherMask, TeacherTargets,
};
pub use standardize::{FeatureStandardizer, StandardizerBank};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of the cosine term.
    pub alpha: f64,
    /// Weight of the smooth-L1 term.
    pub beta: f64,
    pub p_drop: f64,
    pub ema_momentum: f64,
    pub smooth_l1_delta: f64,
    /// Adaptor intermediate width.
    pub adaptor_hidden: usize,
    pub standardizer_eps: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.1,
            p_drop: 0.25,
            ema_momentum: 0.9,
            smooth_l1_delta: 1.0,
            adaptor_hidden: 64,
            standardizer_eps: 1e-8,
        }
    }
}

impl DistillConfig {
    /// Full-scale adaptor width.
    pub const FULL_SCALE_ADAPTOR_HIDDEN: usize = 2048;

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Config(format!(
                "need alpha, beta >= 0 and alpha + beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("p_drop must lie in [0, 1], got {}", self.p_drop)));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Config(format!("ema_momentum must lie in (0, 1), got {}", self.ema_momentum)));
        }
        if !(self.smooth_l1_delta > 0.0) {
            return Err(Error::Config("smooth_l1_delta must be positive".into()));
        }
        if self.adaptor_hidden == 0 {
            return Err(Error::Config("adaptor_hidden must be positive".into()));
        }
        if !(self.standardizer_eps > 0.0) {
            return Err(Error::Config("standardizer_eps must be positive".into()));
        }
        Ok(())
    }
}
