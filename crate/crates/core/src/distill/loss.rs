use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{adaptor_forward, adaptor_prefix, DistillConfig, StandardizerBank};
use crate::encoders::{FeatureBundle, FeatureKind, TeacherKind};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Bound, Graph, Tensor, Var, COSINE_NORM_FLOOR};


#[derive(Clone, Copy, Debug)]
pub struct FeatureLoss {
    pub loss: Var,
    /// Some row of either side had a norm below the cosine floor.
    pub zero_norm: bool,
}

fn has_zero_norm_row(t: &Tensor) -> bool {
    let d = t.last_dim();
    t.data().chunks(d).any(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() < COSINE_NORM_FLOOR)
}

/// `α·mean(1 − cos) + β·mean(smoothL1)` between adapted student features and a
/// (detached) teacher target of the same shape.
pub fn feature_loss(g: &mut Graph, adapted: Var, target: &Tensor, alpha: f64, beta: f64, delta: f64) -> Result<FeatureLoss> {
    if g.value(adapted).shape() != target.shape() {
        return Err(shape_err(
            "feature_loss",
            format!("adapted {:?} vs target {:?}", g.value(adapted).shape(), target.shape()),
        ));
    }
    let zero_norm = has_zero_norm_row(g.value(adapted)) || has_zero_norm_row(target);
    let t = g.constant(target.clone());
    let cos = g.cosine_distance(adapted, t)?;
    let sl1 = g.smooth_l1(adapted, t, delta)?;
    let a = g.scale(cos, alpha);
    let b = g.scale(sl1, beta);
    Ok(FeatureLoss { loss: g.add(a, b)?, zero_norm })
}

/// Average of the CLS and patch losses.
pub fn vision_teacher_loss(g: &mut Graph, cls_loss: Var, patch_loss: Var) -> Result<Var> {
    let s = g.add(cls_loss, patch_loss)?;
    Ok(g.scale(s, 0.5))
}

fn pooled_student(g: &mut Graph, patches: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(patches.len());
    for &p in patches {
        let d = g.value(p).last_dim();
        let m = g.reduce_mean(p, 0)?;
        rows.push(g.reshape(m, &[1, d])?);
    }
    g.concat_rows(&rows)
}

/// Loss against a pooled teacher vector: the student's patch tokens are
/// averaged, adapted, and compared with `pooled_target` (`[d_t]` or `[1, d_t]`).
pub fn vl_teacher_loss(
    g: &mut Graph,
    student_patch: Var,
    adaptors: &Bound,
    prefix: &str,
    pooled_target: &Tensor,
    cfg: &DistillConfig,
) -> Result<FeatureLoss> {
    let x = pooled_student(g, &[student_patch])?;
    let y = adaptor_forward(g, adaptors, prefix, x)?;
    let target = pooled_target.reshape(&[1, pooled_target.numel()])?;
    feature_loss(g, y, &target, cfg.alpha, cfg.beta, cfg.smooth_l1_delta)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherMask {
    pub keep: Vec<bool>,
    /// Index of the dropped teacher, if any.
    pub dropped: Option<usize>,
    /// Only one teacher is configured, so nothing can be dropped.
    pub degenerate: bool,
}

/// Draws `u ~ U(0, 1)`; when `u < p_drop` the teacher with the smallest `|L_t|`
/// (lowest index on ties) is masked. One draw is consumed per call regardless.
pub fn sample_teacher_masks<R: Rng + ?Sized>(losses: &[f64], p_drop: f64, rng: &mut R) -> Result<TeacherMask> {
    if losses.is_empty() {
        return Err(Error::Contract("teacher mask needs at least one teacher".into()));
    }
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::Config(format!("p_drop must lie in [0, 1], got {p_drop}")));
    }
    let u: f64 = rng.random();
    let mut keep = vec![true; losses.len()];
    if losses.len() == 1 {
        return Ok(TeacherMask { keep, dropped: None, degenerate: true });
    }
    let mut dropped = None;
    if u < p_drop {
        let mut idx = 0;
        for (i, l) in losses.iter().enumerate().skip(1) {
            if l.abs() < losses[idx].abs() {
                idx = i;
            }
        }
        keep[idx] = false;
        dropped = Some(idx);
    }
    Ok(TeacherMask { keep, dropped, degenerate: false })
}

/// Where the step's teacher mask comes from.
pub enum MaskMode<'r> {
    Sample(&'r mut dyn RngCore),
    Fixed(Vec<bool>),
}

/// One teacher's features for every image of the batch.
#[derive(Clone, Debug)]
pub struct TeacherTargets<'a> {
    pub id: &'a str,
    pub kind: TeacherKind,
    pub features: Vec<&'a FeatureBundle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLossEntry {
    pub teacher: String,
    pub feature: FeatureKind,
    pub value: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherLossEntry {
    pub teacher: String,
    pub value: f64,
    pub mask: u8,
}

/// Per-step record of every loss term; the total is reproducible from the fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub feature_losses: Vec<FeatureLossEntry>,
    pub teacher_losses: Vec<TeacherLossEntry>,
    pub dropped: Option<String>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl LossReport {
    /// `Σ m_t·L_t` folded in teacher order, the same order the graph uses.
    pub fn reconstructed_total(&self) -> f64 {
        let mut it = self.teacher_losses.iter().map(|t| t.value * f64::from(t.mask));
        let first = it.next().unwrap_or(0.0);
        it.fold(first, |acc, v| acc + v)
    }

    /// Bit-exact reconstruction and, if a teacher was dropped, exactly one masked entry.
    pub fn is_consistent(&self) -> bool {
        let masked = self.teacher_losses.iter().filter(|t| t.mask == 0).count();
        let mask_ok = match &self.dropped {
            Some(id) => masked == 1 && self.teacher_losses.iter().any(|t| &t.teacher == id && t.mask == 0),
            None => masked == 0,
        };
        self.total.to_bits() == self.reconstructed_total().to_bits() && mask_ok
    }

    pub fn teacher_loss(&self, id: &str) -> Option<f64> {
        self.teacher_losses.iter().find(|t| t.teacher == id).map(|t| t.value)
    }

    pub fn feature_loss(&self, id: &str, kind: FeatureKind) -> Option<f64> {
        self.feature_losses.iter().find(|f| f.teacher == id && f.feature == kind).map(|f| f.value)
    }
}

fn require<'a, T>(v: Option<&'a T>, what: &str) -> Result<&'a T> {
    v.ok_or_else(|| Error::Contract(format!("feature bundle lacks {what}")))
}

fn stack_rows(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(vars.len());
    for &v in vars {
        let t = g.value(v);
        rows.push(if t.rank() == 1 { g.reshape(v, &[1, t.numel()])? } else { v });
    }
    g.concat_rows(&rows)
}

fn stack_targets(items: &[&Tensor]) -> Result<Tensor> {
    let reshaped: Vec<Tensor> =
        items.iter().map(|t| if t.rank() == 1 { t.reshape(&[1, t.numel()]) } else { Ok((*t).clone()) }).collect::<Result<_>>()?;
    Tensor::concat_rows(&reshaped.iter().collect::<Vec<_>>())
}

/// Builds the full distillation objective for one batch.
///
/// Every teacher feature is standardized (updating the EMA state when
/// `training`), every per-feature and per-teacher loss is computed, and the
/// mask is applied last. Returns the scalar graph node and its report.
#[allow(clippy::too_many_arguments)]
pub fn total_distill_loss(
    g: &mut Graph,
    student: &[FeatureBundle<Var>],
    teachers: &[TeacherTargets<'_>],
    adaptors: &Bound,
    standardizers: &mut StandardizerBank,
    cfg: &DistillConfig,
    training: bool,
    masks: MaskMode<'_>,
    step: u64,
) -> Result<(Var, LossReport)> {
    if student.is_empty() || teachers.is_empty() {
        return Err(Error::Contract("distillation needs a non-empty batch and at least one teacher".into()));
    }
    let s_cls: Vec<Var> = student.iter().map(|b| require(b.cls.as_ref(), "student cls").copied()).collect::<Result<_>>()?;
    let s_patch: Vec<Var> =
        student.iter().map(|b| require(b.patch.as_ref(), "student patch").copied()).collect::<Result<_>>()?;

    let mut feature_entries = Vec::new();
    let mut teacher_vars = Vec::with_capacity(teachers.len());
    let mut diagnostics = Vec::new();

    for t in teachers {
        if t.features.len() != student.len() {
            return Err(shape_err(
                "total_distill_loss",
                format!("teacher `{}` has {} bundles for a batch of {}", t.id, t.features.len(), student.len()),
            ));
        }
        let kinds: &[FeatureKind] = match t.kind {
            TeacherKind::Vision => &[FeatureKind::Cls, FeatureKind::Patch],
            TeacherKind::VisionLanguage => &[FeatureKind::Pooled],
        };
        let mut losses = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let prefix = adaptor_prefix(t.id, kind);
            if adaptors.get(&format!("{prefix}.fc1.weight")).is_err() {
                return Err(Error::Config(format!("no adaptor for teacher `{}` feature `{kind}`", t.id)));
            }
            let targets: Vec<&Tensor> = t
                .features
                .iter()
                .map(|b| require(b.get(kind), &format!("teacher `{}` {kind}", t.id)))
                .collect::<Result<_>>()?;
            let raw = stack_targets(&targets)?;
            let x = match kind {
                FeatureKind::Cls => stack_rows(g, &s_cls)?,
                FeatureKind::Patch => {
                    let x = stack_rows(g, &s_patch)?;
                    if g.value(x).rows() != raw.rows() {
                        return Err(shape_err(
                            "total_distill_loss",
                            format!("student has {} patch tokens, teacher `{}` has {}", g.value(x).rows(), t.id, raw.rows()),
                        ));
                    }
                    x
                }
                FeatureKind::Pooled => pooled_student(g, &s_patch)?,
            };
            let target = standardizers.entry(t.id, kind, raw.last_dim()).standardize(&raw, training)?;
            let adapted = adaptor_forward(g, adaptors, &prefix, x)?;
            let fl = feature_loss(g, adapted, &target, cfg.alpha, cfg.beta, cfg.smooth_l1_delta)?;
            if fl.zero_norm {
                diagnostics.push(format!("zero-norm vector in {}/{kind} cosine term", t.id));
            }
            feature_entries.push(FeatureLossEntry {
                teacher: t.id.to_string(),
                feature: kind,
                value: g.value(fl.loss).item()?,
                zero_norm: fl.zero_norm,
            });
            losses.push(fl.loss);
        }
        let lt = match t.kind {
            TeacherKind::Vision => vision_teacher_loss(g, losses[0], losses[1])?,
            TeacherKind::VisionLanguage => losses[0],
        };
        teacher_vars.push(lt);
    }

    let values: Vec<f64> = teacher_vars.iter().map(|&v| g.value(v).item()).collect::<Result<_>>()?;
    let mask = match masks {
        MaskMode::Sample(rng) => sample_teacher_masks(&values, cfg.p_drop, rng)?,
        MaskMode::Fixed(keep) => {
            if keep.len() != teachers.len() || !keep.iter().any(|&k| k) {
                return Err(Error::Contract(format!(
                    "fixed mask {keep:?} must cover {} teachers and keep at least one",
                    teachers.len()
                )));
            }
            let dropped = keep.iter().position(|&k| !k);
            TeacherMask { degenerate: teachers.len() == 1, keep, dropped }
        }
    };
    if mask.degenerate {
        diagnostics.push("single teacher: dropping disabled".into());
    }

    let m = |i: usize| if mask.keep[i] { 1.0 } else { 0.0 };
    let mut total = g.scale(teacher_vars[0], m(0));
    for (i, &v) in teacher_vars.iter().enumerate().skip(1) {
        let term = g.scale(v, m(i));
        total = g.add(total, term)?;
    }

    let report = LossReport {
        step,
        feature_losses: feature_entries,
        teacher_losses: teachers
            .iter()
            .zip(&values)
            .enumerate()
            .map(|(i, (t, &value))| TeacherLossEntry { teacher: t.id.to_string(), value, mask: u8::from(mask.keep[i]) })
            .collect(),
        dropped: mask.dropped.map(|i| teachers[i].id.to_string()),
        total: g.value(total).item()?,
        diagnostics,
    };
    Ok((total, report))
}
