//! `eval`: JSON-lines predictions and ground truth joined by `id`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use multidistill_core::metrics::{
    depth_metrics, dice_hd95, instance_map, multilabel_map_f1, phase_metrics, recall_at_k, text_gen_metrics, tokenize,
    triplet_map, DepthPair, GtInstance, ImageInstances, MaskPair, MultiLabelScores, PhaseSequences, PredInstance,
    RetrievalMatrix, TripletComponents, VideoPhases,
};
use multidistill_core::trainer::config_hash;
use multidistill_core::MetricReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::output::{to_json, Stamp};

/// Score threshold for multi-label F1.
const F1_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Phase,
    Multilabel,
    Triplet,
    Segmentation,
    Instance,
    Depth,
    Text,
    Retrieval,
}

struct Source<'a> {
    path: &'a Path,
    /// Non-blank lines with their 1-based numbers.
    lines: Vec<(usize, &'a str)>,
}

impl<'a> Source<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        let lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l)).collect();
        Self { path, lines }
    }

    fn at(&self, line: usize) -> String {
        format!("{}:{line}", self.path.display())
    }

    fn parse<T: DeserializeOwned>(&self, (no, text): (usize, &str)) -> Result<T> {
        serde_json::from_str(text).with_context(|| self.at(no))
    }

    fn header<H: DeserializeOwned>(&mut self) -> Result<H> {
        if self.lines.is_empty() {
            bail!("{}: missing header line", self.path.display());
        }
        let first = self.lines.remove(0);
        self.parse(first)
    }

    fn rows<T: DeserializeOwned + Keyed>(&self) -> Result<Vec<(usize, T)>> {
        if self.lines.is_empty() {
            bail!("{}: no records", self.path.display());
        }
        self.lines.iter().map(|&l| Ok((l.0, self.parse(l)?))).collect()
    }
}

trait Keyed {
    fn id(&self) -> &str;
}

macro_rules! keyed {
    ($($t:ty),*) => {$(impl Keyed for $t { fn id(&self) -> &str { &self.id } })*};
}

/// One prediction and its ground truth; `at` names both source lines.
struct Pair<P, G> {
    id: String,
    at: String,
    pred: P,
    gt: G,
}

/// Pairs records by id in ground-truth order; every id must appear exactly once on each side.
fn join<P: Keyed, G: Keyed>(ps: &Source, preds: Vec<(usize, P)>, gs: &Source, gts: Vec<(usize, G)>) -> Result<Vec<Pair<P, G>>> {
    let mut by_id: BTreeMap<String, (usize, P)> = BTreeMap::new();
    for (no, p) in preds {
        let id = p.id().to_string();
        if let Some((first, _)) = by_id.insert(id.clone(), (no, p)) {
            bail!("{}: duplicate id `{id}` (first on line {first})", ps.at(no));
        }
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(gts.len());
    for (no, g) in gts {
        let id = g.id().to_string();
        if let Some(first) = seen.insert(id.clone(), no) {
            bail!("{}: duplicate id `{id}` (first on line {first})", gs.at(no));
        }
        let Some((pno, p)) = by_id.remove(&id) else {
            bail!("{}: id `{id}` has no prediction in {}", gs.at(no), ps.path.display());
        };
        out.push(Pair { at: format!("{} / {}", ps.at(pno), gs.at(no)), id, pred: p, gt: g });
    }
    if let Some((id, (no, _))) = by_id.into_iter().min_by_key(|(_, (no, _))| *no) {
        bail!("{}: id `{id}` is not in the ground truth {}", ps.at(no), gs.path.display());
    }
    Ok(out)
}

fn binary(v: &[u8], field: &str, at: &str) -> Result<Vec<bool>> {
    v.iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => bail!("{at}: field `{field}` must hold 0 or 1, found {other}"),
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PhaseRow {
    id: String,
    phases: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRow {
    id: String,
    scores: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRow {
    id: String,
    labels: Vec<u8>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TripletHeader {
    /// `[instrument, verb, target]` per triplet class.
    components: Vec<(usize, usize, usize)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SegRow {
    id: String,
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRow<I> {
    id: String,
    height: usize,
    width: usize,
    instances: Vec<I>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GtObject {
    class: usize,
    bbox: [f64; 4],
    mask: Vec<u8>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredObject {
    class: usize,
    score: f64,
    bbox: [f64; 4],
    mask: Vec<u8>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DepthPred {
    id: String,
    depth: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DepthGt {
    id: String,
    depth: Vec<f64>,
    #[serde(default)]
    valid: Option<Vec<u8>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRow {
    id: String,
    text: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrievalHeader {
    ks: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchRow {
    id: String,
    /// Gallery index of the correct item.
    #[serde(rename = "match")]
    target: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimilarityRow {
    id: String,
    similarity: Vec<f64>,
}

keyed!(PhaseRow, ScoreRow, LabelRow, SegRow, InstanceRow<GtObject>, InstanceRow<PredObject>, DepthPred, DepthGt, TextRow, MatchRow, SimilarityRow);

fn eval_phase(ps: &Source, gs: &Source) -> Result<MetricReport> {
    let pairs = join(ps, ps.rows::<PhaseRow>()?, gs, gs.rows::<PhaseRow>()?)?;
    let num_classes = 1 + pairs.iter().flat_map(|p| p.pred.phases.iter().chain(&p.gt.phases)).copied().max().unwrap_or(0);
    for p in &pairs {
        if p.pred.phases.len() != p.gt.phases.len() {
            bail!("{}: {} predicted frames for {} ground-truth frames", p.at, p.pred.phases.len(), p.gt.phases.len());
        }
    }
    let videos = pairs.into_iter().map(|p| VideoPhases { video_id: p.id, pred: p.pred.phases, gt: p.gt.phases }).collect();
    let (m, notes) = phase_metrics(&PhaseSequences::new(num_classes, videos)?)?;
    Ok(m.into_report(notes))
}

fn multilabel_scores(ps: &Source, gs: &Source) -> Result<MultiLabelScores> {
    let pairs = join(ps, ps.rows::<ScoreRow>()?, gs, gs.rows::<LabelRow>()?)?;
    let mut scores = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.pred.scores.len() != p.gt.labels.len() {
            bail!("{}: {} scores for {} labels", p.at, p.pred.scores.len(), p.gt.labels.len());
        }
        labels.push(binary(&p.gt.labels, "labels", &p.at)?);
        scores.push(p.pred.scores);
    }
    MultiLabelScores::from_rows(&scores, &labels).context("multi-label records")
}

fn eval_multilabel(ps: &Source, gs: &Source) -> Result<MetricReport> {
    Ok(multilabel_map_f1(&multilabel_scores(ps, gs)?, F1_THRESHOLD))
}

fn eval_triplet(ps: &Source, gs: &mut Source) -> Result<MetricReport> {
    let header: TripletHeader = gs.header()?;
    let s = multilabel_scores(ps, gs)?;
    Ok(triplet_map(&s, &TripletComponents { map: header.components })?.to_report())
}

fn eval_segmentation(ps: &Source, gs: &Source) -> Result<MetricReport> {
    let pairs = join(ps, ps.rows::<SegRow>()?, gs, gs.rows::<SegRow>()?)?;
    let num_classes = 1 + pairs.iter().flat_map(|p| p.pred.labels.iter().chain(&p.gt.labels)).copied().max().unwrap_or(0);
    let mut per_class: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); num_classes];
    let (mut dice, mut hd95) = (Vec::new(), Vec::new());
    for p in pairs {
        if (p.pred.height, p.pred.width) != (p.gt.height, p.gt.width) {
            bail!("{}: image sizes differ", p.at);
        }
        let m = MaskPair::new(p.gt.height, p.gt.width, num_classes, p.pred.labels, p.gt.labels).with_context(|| p.at.clone())?;
        let r = dice_hd95(&m)?;
        for (c, slot) in per_class.iter_mut().enumerate() {
            if let (Some(d), Some(h)) = (r.dice[c], r.hd95[c]) {
                slot.0.push(d);
                slot.1.push(h);
            }
        }
        dice.push(r.mean_dice);
        hd95.push(r.mean_hd95);
    }
    let mut report = MetricReport::default();
    for (c, (d, h)) in per_class.iter().enumerate() {
        if d.is_empty() {
            report.note(format!("class {c} absent from every image; skipped"));
        } else {
            report.insert(format!("dice_{c}"), mean(d));
            report.insert(format!("hd95_{c}"), mean(h));
        }
    }
    report.insert("dice", mean(&dice));
    report.insert("hd95", mean(&hd95));
    Ok(report)
}

fn eval_instance(ps: &Source, gs: &Source) -> Result<MetricReport> {
    let pairs = join(ps, ps.rows::<InstanceRow<PredObject>>()?, gs, gs.rows::<InstanceRow<GtObject>>()?)?;
    let mut images = Vec::with_capacity(pairs.len());
    for p in pairs {
        if (p.pred.height, p.pred.width) != (p.gt.height, p.gt.width) {
            bail!("{}: image sizes differ", p.at);
        }
        let preds = p
            .pred
            .instances
            .iter()
            .map(|o| Ok(PredInstance { class: o.class, score: o.score, bbox: o.bbox, mask: binary(&o.mask, "mask", &p.at)? }))
            .collect::<Result<_>>()?;
        let gts = p
            .gt
            .instances
            .iter()
            .map(|o| Ok(GtInstance { class: o.class, bbox: o.bbox, mask: binary(&o.mask, "mask", &p.at)? }))
            .collect::<Result<_>>()?;
        let img = ImageInstances { height: p.gt.height, width: p.gt.width, preds, gts };
        img.validate().with_context(|| p.at.clone())?;
        images.push(img);
    }
    Ok(instance_map(&images)?.to_report())
}

fn eval_depth(ps: &Source, gs: &Source) -> Result<MetricReport> {
    let pairs = join(ps, ps.rows::<DepthPred>()?, gs, gs.rows::<DepthGt>()?)?;
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut excluded = 0;
    let n = pairs.len();
    for p in pairs {
        let valid = p.gt.valid.as_deref().map(|v| binary(v, "valid", &p.at)).transpose()?;
        let m = depth_metrics(&DepthPair::new(p.pred.depth, p.gt.depth, valid)).with_context(|| p.at.clone())?;
        excluded += m.excluded;
        for (k, v) in m.to_report().metrics {
            sums.entry(k).or_default().push(v);
        }
    }
    let mut report = MetricReport::default();
    for (k, v) in sums {
        report.insert(k, mean(&v));
    }
    if excluded > 0 {
        report.note(format!("{excluded} pixels with nonpositive prediction excluded across {n} images"));
    }
    Ok(report)
}

fn eval_text(ps: &Source, gs: &Source) -> Result<MetricReport> {
    let pairs = join(ps, ps.rows::<TextRow>()?, gs, gs.rows::<TextRow>()?)?;
    let (cands, refs): (Vec<_>, Vec<_>) = pairs.iter().map(|p| (tokenize(&p.pred.text), tokenize(&p.gt.text))).unzip();
    let m = text_gen_metrics(&cands, &refs)?;
    let mut report = m.to_report();
    if m.empty_candidates > 0 && report.diagnostics.is_empty() {
        report.note(format!("{} empty candidates", m.empty_candidates));
    }
    Ok(report)
}

fn eval_retrieval(ps: &Source, gs: &mut Source) -> Result<MetricReport> {
    let header: RetrievalHeader = gs.header()?;
    let pairs = join(ps, ps.rows::<SimilarityRow>()?, gs, gs.rows::<MatchRow>()?)?;
    let (sims, matches) = pairs.into_iter().map(|p| (p.pred.similarity, p.gt.target)).unzip();
    let r = RetrievalMatrix::new(sims, matches).context("retrieval records")?;
    Ok(recall_at_k(&r, &header.ks)?.to_report())
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    stamp: Stamp,
    task: Task,
    #[serde(flatten)]
    report: MetricReport,
}

pub fn evaluate(task: Task, pred: &Path, gt: &Path) -> Result<String> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let (pred_text, gt_text) = (read(pred)?, read(gt)?);
    let ps = Source::new(pred, &pred_text);
    let mut gs = Source::new(gt, &gt_text);
    let report = match task {
        Task::Phase => eval_phase(&ps, &gs),
        Task::Multilabel => eval_multilabel(&ps, &gs),
        Task::Triplet => eval_triplet(&ps, &mut gs),
        Task::Segmentation => eval_segmentation(&ps, &gs),
        Task::Instance => eval_instance(&ps, &gs),
        Task::Depth => eval_depth(&ps, &gs),
        Task::Text => eval_text(&ps, &gs),
        Task::Retrieval => eval_retrieval(&ps, &mut gs),
    }?;
    let hash = config_hash(&(task, &pred_text, &gt_text))?;
    to_json(&EvalOutput { stamp: Stamp::new(hash), task, report })
}

pub fn cmd_eval(task: Task, pred: &Path, gt: &Path) -> Result<ExitCode> {
    print!("{}", evaluate(task, pred, gt)?);
    Ok(ExitCode::SUCCESS)
}
