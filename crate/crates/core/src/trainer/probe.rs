use super::{config_hash, epoch_order, AdamW, Checkpoint, Regime, TrainConfig};
use crate::data::FrameManifest;
use crate::encoders::{student_forward, ViTConfig};
use crate::error::{shape_err, Error, Result};
use crate::init::{rng_for, trunc_normal};
use crate::metrics::{multilabel_map_f1, phase_metrics, MetricReport, MultiLabelScores, PhaseSequences, VideoPhases};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

const CLASSIFIER_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub enum ProbeTargets {
    /// One class index per image.
    SingleLabel { labels: Vec<usize>, classes: usize },
    /// `[n × classes]` matrix of 0/1 targets.
    MultiLabel(Tensor),
}

impl ProbeTargets {
    pub fn len(&self) -> usize {
        match self {
            Self::SingleLabel { labels, .. } => labels.len(),
            Self::MultiLabel(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::SingleLabel { classes, .. } => *classes,
            Self::MultiLabel(t) => t.last_dim(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::SingleLabel { labels, classes } => {
                if *classes == 0 {
                    return Err(Error::Config("need at least one class".into()));
                }
                if let Some(l) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::Data(format!("label {l} outside [0, {classes})")));
                }
            }
            Self::MultiLabel(t) => {
                if t.rank() != 2 || t.last_dim() == 0 {
                    return Err(shape_err("probe", format!("multi-label targets must be [n, C], got {:?}", t.shape())));
                }
                if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Data("multi-label targets must be 0 or 1".into()));
                }
            }
        }
        Ok(())
    }

    fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(match self {
            Self::SingleLabel { labels, classes } => {
                Self::SingleLabel { labels: idx.iter().map(|&i| labels[i]).collect(), classes: *classes }
            }
            Self::MultiLabel(t) => {
                let c = t.last_dim();
                Self::MultiLabel(Tensor::matrix(idx.len(), c, idx.iter().flat_map(|&i| t.row(i).to_vec()).collect())?)
            }
        })
    }
}

/// Labelled images, optionally with a frame manifest aligned record-for-record.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub images: Vec<Tensor>,
    pub targets: ProbeTargets,
    pub manifest: Option<FrameManifest>,
}

impl ProbeData {
    pub fn new(images: Vec<Tensor>, targets: ProbeTargets, manifest: Option<FrameManifest>) -> Result<Self> {
        if images.len() != targets.len() {
            return Err(shape_err("probe", format!("{} images but {} targets", images.len(), targets.len())));
        }
        if let Some(m) = &manifest {
            if m.len() != images.len() {
                return Err(shape_err("probe", format!("{} images but {} manifest records", images.len(), m.len())));
            }
        }
        targets.validate()?;
        Ok(Self { images, targets, manifest })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Result<Self> {
        let manifest = match &self.manifest {
            Some(m) => Some(FrameManifest::new(idx.iter().map(|&i| m.records()[i].clone()).collect())?),
            None => None,
        };
        Ok(Self { images: idx.iter().map(|&i| self.images[i].clone()).collect(), targets: self.targets.select(idx)?, manifest })
    }
}

/// Restricts the data to the frames of the first `k` videos of the manifest.
pub fn select_few_shot(data: &ProbeData, k: usize) -> Result<ProbeData> {
    let m = data.manifest.as_ref().ok_or_else(|| Error::Data("few-shot selection needs a frame manifest".into()))?;
    let keep = m.first_k_videos(k)?;
    let videos = keep.videos();
    let idx: Vec<usize> = (0..m.len()).filter(|&i| videos.contains(&m.records()[i].video_id.as_str())).collect();
    data.subset(&idx)
}

/// Single linear layer on encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `[d × C]`.
    pub weight: Tensor,
    /// `[C]`.
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn init(dim: usize, classes: usize, seed: u64) -> Self {
        let weight = trunc_normal(&mut rng_for(seed, "probe", 0), &[dim, classes], CLASSIFIER_INIT_STD);
        Self { weight, bias: Tensor::zeros(&[classes]) }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("probe.weight", self.weight.clone());
        s.insert("probe.bias", self.bias.clone());
        s
    }

    pub fn from_store(s: &ParamStore) -> Result<Self> {
        Ok(Self { weight: s.get("probe.weight")?.clone(), bias: s.get("probe.bias")?.clone() })
    }

    /// `[n × C]` logits for `[n × d]` features.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.to_store().bind(&mut g, false);
        let x = g.constant(features.clone());
        let out = classifier_forward(&mut g, &b, x)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(features)?;
        Ok((0..l.rows())
            .map(|i| {
                let row = l.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }
}

fn classifier_forward(g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
    let z = g.matmul(x, b.get("probe.weight")?)?;
    g.add_row(z, b.get("probe.bias")?)
}

fn stack_cls(g: &mut Graph, b: &Bound, cfg: &ViTConfig, images: &[Tensor]) -> Result<Var> {
    let feats = student_forward(g, b, "student", cfg, images)?;
    let rows = feats
        .into_iter()
        .map(|f| {
            let cls = f.cls.ok_or_else(|| Error::Contract("encoder emitted no cls feature".into()))?;
            g.reshape(cls, &[1, cfg.embed_dim])
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&rows)
}

/// `[n × d]` CLS features of the encoder (no gradient tracking).
pub fn encoder_features(cfg: &ViTConfig, encoder: &ParamStore, images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Ok(Tensor::zeros(&[0, cfg.embed_dim]));
    }
    let mut g = Graph::new();
    let b = encoder.bind(&mut g, false);
    let x = stack_cls(&mut g, &b, cfg, images)?;
    Ok(g.value(x).clone())
}

fn probe_loss(g: &mut Graph, logits: Var, targets: &ProbeTargets, idx: &[usize]) -> Result<Var> {
    match targets.select(idx)? {
        ProbeTargets::SingleLabel { labels, .. } => g.cross_entropy(logits, &labels),
        ProbeTargets::MultiLabel(t) => g.bce_with_logits(logits, &t),
    }
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = t.last_dim();
    Tensor::matrix(idx.len(), d, idx.iter().flat_map(|&i| t.row(i).to_vec()).collect())
}

/// Trains a linear classifier on fixed features; returns it with the
/// per-step training losses.
pub fn train_linear_classifier(features: &Tensor, targets: &ProbeTargets, train: &TrainConfig) -> Result<(LinearClassifier, Vec<f64>)> {
    train.validate()?;
    targets.validate()?;
    if features.rank() != 2 || features.rows() != targets.len() {
        return Err(shape_err("probe", format!("features {:?} for {} targets", features.shape(), targets.len())));
    }
    let n = features.rows();
    let mut params = LinearClassifier::init(features.last_dim(), targets.classes(), train.seed).to_store();
    let mut optim = AdamW::new(train.optimizer);
    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..train.epochs as u64 {
        let order = epoch_order(train.seed, epoch, n);
        for batch in order.chunks(train.batch_size) {
            let mut g = Graph::new();
            let b = params.bind(&mut g, true);
            let x = g.constant(rows_of(features, batch)?);
            let logits = classifier_forward(&mut g, &b, x)?;
            let loss = probe_loss(&mut g, logits, targets, batch)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite { step, detail: format!("probe loss {value}") });
            }
            let grads = b.gradients(&g.backward(loss)?);
            optim.step(&mut params, &grads, train.lr_for_step(step, n))?;
            losses.push(value);
            step += 1;
        }
    }
    Ok((LinearClassifier::from_store(&params)?, losses))
}

/// Result of a probe run.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub classifier: LinearClassifier,
    /// The encoder after training: the input checkpoint itself when frozen.
    pub encoder: Checkpoint,
    pub report: MetricReport,
    pub losses: Vec<f64>,
}

/// Linear probe on top of the `student.*` encoder of `encoder`.
///
/// `probe-frozen` trains only the classifier on precomputed features;
/// `probe-finetune` updates encoder and classifier jointly. With
/// `few_shot_k`, training uses the frames of the first `k` videos only.
/// Metrics are computed on `eval` when given, otherwise on the training data.
pub fn train_probe(
    train: &TrainConfig,
    student: &ViTConfig,
    encoder: &Checkpoint,
    data: &ProbeData,
    eval: Option<&ProbeData>,
) -> Result<ProbeOutcome> {
    train.validate()?;
    student.validate()?;
    if train.regime == Regime::Distill {
        return Err(Error::Config("probe training requires regime probe-frozen or probe-finetune".into()));
    }
    let selected;
    let data = match train.few_shot_k {
        Some(k) => {
            selected = select_few_shot(data, k)?;
            &selected
        }
        None => data,
    };
    if data.is_empty() {
        return Err(Error::Data("probe training needs at least one example".into()));
    }
    let enc_params = encoder.group("student");
    if enc_params.is_empty() {
        return Err(Error::Data("checkpoint has no student.* sections".into()));
    }

    let (classifier, losses, enc_out, final_params) = match train.regime {
        Regime::ProbeFrozen => {
            let feats = encoder_features(student, &enc_params, &data.images)?;
            let (clf, losses) = train_linear_classifier(&feats, &data.targets, train)?;
            (clf, losses, encoder.clone(), enc_params)
        }
        _ => {
            let (clf, losses, tuned, steps) = finetune(train, student, enc_params, data)?;
            let mut sections = encoder.sections.clone();
            for (name, t) in tuned.iter() {
                *sections.get_mut(name)? = t.clone();
            }
            let ckpt = Checkpoint { config_hash: config_hash(&(student, train))?, step: steps, sections };
            (clf, losses, ckpt, tuned)
        }
    };

    let eval_data = eval.unwrap_or(data);
    let feats = encoder_features(student, &final_params, &eval_data.images)?;
    let report = probe_report(&classifier, &feats, eval_data)?;
    Ok(ProbeOutcome { classifier, encoder: enc_out, report, losses })
}

fn finetune(
    train: &TrainConfig,
    student: &ViTConfig,
    mut enc: ParamStore,
    data: &ProbeData,
) -> Result<(LinearClassifier, Vec<f64>, ParamStore, u64)> {
    let n = data.len();
    let clf = LinearClassifier::init(student.embed_dim, data.targets.classes(), train.seed);
    let mut params = enc.clone();
    params.extend(clf.to_store());
    let mut optim = AdamW::new(train.optimizer);
    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..train.epochs as u64 {
        let order = epoch_order(train.seed, epoch, n);
        for batch in order.chunks(train.batch_size) {
            let images: Vec<Tensor> = batch.iter().map(|&i| data.images[i].clone()).collect();
            let mut g = Graph::new();
            let b = params.bind(&mut g, true);
            let x = stack_cls(&mut g, &b, student, &images)?;
            let logits = classifier_forward(&mut g, &b, x)?;
            let loss = probe_loss(&mut g, logits, &data.targets, batch)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite { step, detail: format!("probe loss {value}") });
            }
            let grads = b.gradients(&g.backward(loss)?);
            optim.step(&mut params, &grads, train.lr_for_step(step, n))?;
            losses.push(value);
            step += 1;
        }
    }
    for (name, t) in enc.iter_mut() {
        *t = params.get(name)?.clone();
    }
    Ok((LinearClassifier::from_store(&params)?, losses, enc, step))
}

fn probe_report(clf: &LinearClassifier, feats: &Tensor, data: &ProbeData) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluation("no evaluation examples".into()));
    }
    match &data.targets {
        ProbeTargets::SingleLabel { labels, classes } => {
            let pred = clf.predict(feats)?;
            // Group frames by video when a manifest is present.
            let groups: Vec<(String, Vec<usize>)> = match &data.manifest {
                Some(m) => m
                    .videos()
                    .into_iter()
                    .map(|v| (v.to_string(), (0..m.len()).filter(|&i| m.records()[i].video_id == v).collect()))
                    .collect(),
                None => vec![("all".to_string(), (0..labels.len()).collect())],
            };
            let videos = groups
                .into_iter()
                .map(|(video_id, idx)| VideoPhases {
                    video_id,
                    pred: idx.iter().map(|&i| pred[i]).collect(),
                    gt: idx.iter().map(|&i| labels[i]).collect(),
                })
                .collect();
            let (m, notes) = phase_metrics(&PhaseSequences::new(*classes, videos)?)?;
            let mut r = m.into_report(notes);
            let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
            r.insert("accuracy", correct as f64 / labels.len() as f64);
            Ok(r)
        }
        ProbeTargets::MultiLabel(t) => {
            let logits = clf.logits(feats)?;
            let scores: Vec<f64> = logits.data().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
            let labels: Vec<bool> = t.data().iter().map(|&v| v == 1.0).collect();
            let s = MultiLabelScores::new(t.rows(), t.last_dim(), scores, labels)?;
            Ok(multilabel_map_f1(&s, 0.5))
        }
    }
}
