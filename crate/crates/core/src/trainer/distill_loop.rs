use serde::{Deserialize, Serialize};

use super::{config_hash, epoch_order, AdamW, Checkpoint, Regime, TrainConfig};
use crate::data::augment;
use crate::distill::{init_adaptors, total_distill_loss, DistillConfig, LossReport, MaskMode, StandardizerBank, TeacherTargets};
use crate::encoders::{init_vit, student_forward, teacher_forward, FeatureBundle, Teacher, TeacherSpec, ViTConfig};
use crate::error::{Error, Result};
use crate::init::rng_for;
use crate::tensor::{Graph, ParamStore, Tensor};

/// Student, teachers and loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSetup {
    pub student: ViTConfig,
    pub teachers: Vec<TeacherSpec>,
    #[serde(default)]
    pub distill: DistillConfig,
}

impl DistillSetup {
    pub fn desk() -> Self {
        Self {
            student: ViTConfig::desk(),
            teachers: vec![TeacherSpec::desk_vision(), TeacherSpec::desk_vision_language()],
            distill: DistillConfig::default(),
        }
    }

    pub fn grad_check() -> Self {
        Self {
            student: ViTConfig::grad_check(),
            teachers: vec![TeacherSpec::grad_check_vision(), TeacherSpec::grad_check_vision_language()],
            distill: DistillConfig { adaptor_hidden: 16, ..DistillConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.distill.validate()?;
        if self.teachers.is_empty() {
            return Err(Error::Config("at least one teacher is required".into()));
        }
        for (i, t) in self.teachers.iter().enumerate() {
            if self.teachers[..i].iter().any(|u| u.id == t.id) {
                return Err(Error::Config(format!("duplicate teacher id `{}`", t.id)));
            }
        }
        Ok(())
    }

    pub fn build_teachers(&self) -> Result<Vec<Teacher>> {
        self.teachers
            .iter()
            .map(|s| Teacher::new(s.clone(), self.student.image_size, self.student.in_channels))
            .collect()
    }

    /// Fresh student (`student.*`) and adaptor (`adaptor.*`) parameters.
    pub fn init_params(&self, teachers: &[Teacher], seed: u64) -> Result<ParamStore> {
        let mut p = init_vit(&self.student, "student", &mut rng_for(seed, "student", 0))?;
        p.extend(init_adaptors(teachers, self.student.embed_dim, self.distill.adaptor_hidden, &mut rng_for(seed, "adaptor", 0)));
        Ok(p)
    }
}

/// Step-by-step distillation run with resumable state.
///
/// All randomness (epoch order, teacher masks, flips) is derived from the
/// seed and the step index, so resuming from a checkpoint reproduces the
/// uninterrupted run bit for bit.
pub struct DistillTrainer {
    setup: DistillSetup,
    train: TrainConfig,
    teachers: Vec<Teacher>,
    images: Vec<Tensor>,
    /// `[teacher][image]`, only when no augmentation changes the inputs.
    cached: Option<Vec<Vec<FeatureBundle>>>,
    params: ParamStore,
    standardizers: StandardizerBank,
    optim: AdamW,
    step: u64,
    hash: u64,
}

impl DistillTrainer {
    pub fn new(setup: DistillSetup, train: TrainConfig, images: Vec<Tensor>) -> Result<Self> {
        setup.validate()?;
        train.validate()?;
        if train.regime != Regime::Distill {
            return Err(Error::Config("distillation requires regime = \"distill\"".into()));
        }
        if images.is_empty() && train.epochs > 0 {
            return Err(Error::Data("distillation needs at least one image".into()));
        }
        let teachers = setup.build_teachers()?;
        let params = setup.init_params(&teachers, train.seed)?;
        let augmenting = train.augment.horizontal || train.augment.vertical;
        let cached = if augmenting {
            None
        } else {
            Some(teachers.iter().map(|t| teacher_forward(t, &images)).collect::<Result<Vec<_>>>()?)
        };
        let hash = config_hash(&(&setup, &train))?;
        Ok(Self {
            standardizers: StandardizerBank::new(setup.distill.ema_momentum, setup.distill.standardizer_eps),
            optim: AdamW::new(train.optimizer),
            setup,
            train,
            teachers,
            images,
            cached,
            params,
            step: 0,
            hash,
        })
    }

    /// Restores the full training state from a checkpoint of the same configuration.
    pub fn resume(setup: DistillSetup, train: TrainConfig, images: Vec<Tensor>, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(setup, train, images)?;
        if ckpt.config_hash != t.hash {
            return Err(Error::Config(format!(
                "checkpoint config hash {:016x} does not match {:016x}",
                ckpt.config_hash, t.hash
            )));
        }
        for (name, fresh) in t.params.iter_mut() {
            let saved = ckpt.sections.get(name).map_err(|_| Error::Format(format!("checkpoint lacks `{name}`")))?;
            if saved.shape() != fresh.shape() {
                return Err(Error::Format(format!("checkpoint tensor `{name}` has shape {:?}", saved.shape())));
            }
            *fresh = saved.clone();
        }
        let d = &t.setup.distill;
        t.standardizers = StandardizerBank::from_store(&ckpt.group("standardizer"), d.ema_momentum, d.standardizer_eps)?;
        let strip = |prefix: &str| -> ParamStore {
            ckpt.group(prefix)
                .iter()
                .map(|(k, v)| (k[prefix.len() + 1..].to_string(), v.clone()))
                .collect()
        };
        let steps = ckpt.sections.get("optim.t")?.item()? as u64;
        t.optim = AdamW::from_state(t.train.optimizer, steps, strip("optim.m"), strip("optim.v"))?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn setup(&self) -> &DistillSetup {
        &self.setup
    }

    pub fn config_hash(&self) -> u64 {
        self.hash
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn standardizers(&self) -> &StandardizerBank {
        &self.standardizers
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.train.total_steps(self.images.len())
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut s = self.params.clone();
        s.extend(self.standardizers.to_store());
        for (k, v) in self.optim.first_moments().iter() {
            s.insert(format!("optim.m.{k}"), v.clone());
        }
        for (k, v) in self.optim.second_moments().iter() {
            s.insert(format!("optim.v.{k}"), v.clone());
        }
        s.insert("optim.t", Tensor::scalar(self.optim.steps() as f64));
        Checkpoint { config_hash: self.hash, step: self.step, sections: s }
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.images.len();
        let spe = self.train.steps_per_epoch(n);
        let order = epoch_order(self.train.seed, step / spe, n);
        let b = self.train.batch_size;
        let start = (step % spe) as usize * b;
        order[start..(start + b).min(n)].to_vec()
    }

    fn teacher_features(&self, images: &[Tensor], idx: &[usize]) -> Result<Vec<Vec<FeatureBundle>>> {
        match &self.cached {
            Some(c) => Ok(c.iter().map(|per| idx.iter().map(|&i| per[i].clone()).collect()).collect()),
            None => self.teachers.iter().map(|t| teacher_forward(t, images)).collect(),
        }
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<LossReport> {
        if self.is_done() {
            return Err(Error::Contract(format!("training already finished at step {}", self.step)));
        }
        let step = self.step;
        let idx = self.batch_indices(step);
        let mut images: Vec<Tensor> = idx.iter().map(|&i| self.images[i].clone()).collect();
        if self.train.augment.horizontal || self.train.augment.vertical {
            images = augment(&images, self.train.augment, &mut rng_for(self.train.seed, "augment", step)).0;
        }
        let feats = self.teacher_features(&images, &idx)?;
        let targets: Vec<TeacherTargets> = self
            .teachers
            .iter()
            .zip(&feats)
            .map(|(t, f)| TeacherTargets { id: t.id(), kind: t.kind(), features: f.iter().collect() })
            .collect();

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let student = student_forward(&mut g, &bound, "student", &self.setup.student, &images)?;
        let mut rng = rng_for(self.train.seed, "mask", step);
        let (loss, report) = total_distill_loss(
            &mut g,
            &student,
            &targets,
            &bound,
            &mut self.standardizers,
            &self.setup.distill,
            true,
            MaskMode::Sample(&mut rng),
            step,
        )?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite { step, detail: serde_json::to_string(&report)? });
        }
        let grads = bound.gradients(&g.backward(loss)?);
        let lr = self.train.lr_for_step(step, self.images.len());
        self.optim.step(&mut self.params, &grads, lr).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
            other => other,
        })?;
        self.step += 1;
        Ok(report)
    }

    /// Runs every remaining step.
    pub fn run(&mut self) -> Result<Vec<LossReport>> {
        let mut log = Vec::with_capacity((self.total_steps() - self.step) as usize);
        while !self.is_done() {
            log.push(self.train_step()?);
        }
        Ok(log)
    }

    /// Deterministic objective for `params` over the whole dataset: eval-mode
    /// standardizers and every teacher kept. Needs at least one training step.
    pub fn evaluate(&self, params: &ParamStore) -> Result<LossReport> {
        let feats = match &self.cached {
            Some(c) => c.clone(),
            None => self.teachers.iter().map(|t| teacher_forward(t, &self.images)).collect::<Result<_>>()?,
        };
        let targets: Vec<TeacherTargets> = self
            .teachers
            .iter()
            .zip(&feats)
            .map(|(t, f)| TeacherTargets { id: t.id(), kind: t.kind(), features: f.iter().collect() })
            .collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let student = student_forward(&mut g, &bound, "student", &self.setup.student, &self.images)?;
        let mut bank = self.standardizers.clone();
        let keep = vec![true; self.teachers.len()];
        let (_, report) = total_distill_loss(
            &mut g,
            &student,
            &targets,
            &bound,
            &mut bank,
            &self.setup.distill,
            false,
            MaskMode::Fixed(keep),
            self.step,
        )?;
        Ok(report)
    }
}

/// Full run from initialization; returns the final checkpoint and the per-step log.
pub fn train_distill(setup: DistillSetup, train: TrainConfig, images: Vec<Tensor>) -> Result<(Checkpoint, Vec<LossReport>)> {
    let mut t = DistillTrainer::new(setup, train, images)?;
    let log = t.run()?;
    Ok((t.checkpoint(), log))
}
