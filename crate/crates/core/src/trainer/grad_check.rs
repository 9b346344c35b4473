use serde::{Deserialize, Serialize};

use super::DistillSetup;
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::distill::{total_distill_loss, MaskMode, StandardizerBank, TeacherTargets};
use crate::encoders::{student_forward, teacher_forward, FeatureBundle};
use crate::error::{Error, Result};
use crate::tensor::{analytic_gradients, numeric_gradients, Bound, GradCheckReport, Graph, ParamStore, Var};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
pub const GRAD_CHECK_MAX_PARAMS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    #[serde(default = "DistillSetup::grad_check")]
    pub setup: DistillSetup,
    #[serde(default = "two")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Central-difference step.
    #[serde(default = "step")]
    pub h: f64,
    /// Multiplies the initial parameters so that gradients are of order one
    /// instead of vanishing under the small default init.
    #[serde(default = "scale")]
    pub init_scale: f64,
    /// Test hook: corrupts one analytic gradient coordinate.
    #[serde(default)]
    pub inject_fault: bool,
}

fn two() -> usize {
    2
}
fn step() -> f64 {
    1e-5
}
fn scale() -> f64 {
    10.0
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { setup: DistillSetup::grad_check(), batch_size: two(), seed: 0, h: step(), init_scale: scale(), inject_fault: false }
    }
}

/// Finite-difference check of the full distillation objective over every
/// student and adaptor parameter, with the standardizers primed by one
/// training pass and then frozen, and all teachers kept.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.setup.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let teachers = cfg.setup.build_teachers()?;
    let mut params = cfg.setup.init_params(&teachers, cfg.seed)?;
    if params.num_scalars() > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "grad-check config has {} parameters; the limit is {GRAD_CHECK_MAX_PARAMS}",
            params.num_scalars()
        )));
    }
    for (_, t) in params.iter_mut() {
        *t = t.map(|v| v * cfg.init_scale);
    }
    let s = &cfg.setup.student;
    let spec = SyntheticSpec { image_size: s.image_size, channels: s.in_channels, ..SyntheticSpec::desk(cfg.seed, 2) };
    let images = generate_synthetic(&spec, cfg.batch_size)?.images;
    let feats: Vec<Vec<FeatureBundle>> = teachers.iter().map(|t| teacher_forward(t, &images)).collect::<Result<_>>()?;
    let targets: Vec<TeacherTargets> = teachers
        .iter()
        .zip(&feats)
        .map(|(t, f)| TeacherTargets { id: t.id(), kind: t.kind(), features: f.iter().collect() })
        .collect();
    let d = &cfg.setup.distill;
    let keep = vec![true; teachers.len()];

    let mut primed = StandardizerBank::new(d.ema_momentum, d.standardizer_eps);
    {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let st = student_forward(&mut g, &b, "student", s, &images)?;
        total_distill_loss(&mut g, &st, &targets, &b, &mut primed, d, true, MaskMode::Fixed(keep.clone()), 0)?;
    }

    let objective = |g: &mut Graph, b: &Bound| -> Result<Var> {
        let st = student_forward(g, b, "student", s, &images)?;
        let mut bank = primed.clone();
        Ok(total_distill_loss(g, &st, &targets, b, &mut bank, d, false, MaskMode::Fixed(keep.clone()), 0)?.0)
    };
    let numeric = numeric_gradients(&params, cfg.h, objective)?;
    let (_, mut analytic) = analytic_gradients(&params, objective)?;
    if cfg.inject_fault {
        inject(&mut analytic)?;
    }
    GradCheckReport::compare(&analytic, &numeric)
}

fn inject(grads: &mut ParamStore) -> Result<()> {
    let name = grads.names().next().cloned().ok_or_else(|| Error::Contract("no gradients to corrupt".into()))?;
    let g = grads.get_mut(&name)?;
    g.data_mut()[0] += 1.0 + g.data()[0].abs();
    Ok(())
}
