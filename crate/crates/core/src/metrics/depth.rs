use serde::{Deserialize, Serialize};

use super::MetricReport;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Weight of the squared-mean term in the scale-invariant log loss.
pub const SILOG_LAMBDA: f64 = 0.85;

/// Threshold of the δ accuracy.
pub const DELTA_THRESHOLD: f64 = 1.25;

/// Flattened predicted and ground-truth depth maps with an optional
/// validity mask (all pixels valid when absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPair {
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
    #[serde(default)]
    pub valid: Option<Vec<bool>>,
}

impl DepthPair {
    pub fn new(pred: Vec<f64>, gt: Vec<f64>, valid: Option<Vec<bool>>) -> Self {
        Self { pred, gt, valid }
    }

    fn is_valid(&self, i: usize) -> bool {
        self.valid.as_ref().is_none_or(|v| v[i])
    }

    fn check(&self) -> Result<()> {
        if self.pred.len() != self.gt.len() || self.valid.as_ref().is_some_and(|v| v.len() != self.gt.len()) {
            return Err(shape_err("depth_metrics", "prediction, ground truth and mask differ in size"));
        }
        if let Some(i) = (0..self.gt.len()).find(|&i| self.is_valid(i) && !(self.gt[i] > 0.0 && self.gt[i].is_finite())) {
            return Err(Error::Data(format!("ground truth {} at valid pixel {i} is not positive", self.gt[i])));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta: f64,
    /// Median-scaling factor applied to the prediction.
    pub scale: f64,
    /// Valid pixels dropped for a nonpositive or non-finite prediction.
    pub excluded: usize,
}

impl DepthMetrics {
    pub fn to_report(&self) -> MetricReport {
        let mut r = MetricReport::default();
        r.insert("abs_rel", self.abs_rel);
        r.insert("sq_rel", self.sq_rel);
        r.insert("rmse", self.rmse);
        r.insert("rmse_log", self.rmse_log);
        r.insert("delta", self.delta);
        if self.excluded > 0 {
            r.note(format!("{} pixels with nonpositive prediction excluded", self.excluded));
        }
        r
    }
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Rescales the prediction by `median(gt) / median(pred)` over the valid
/// pixels, then reports the standard depth errors.
pub fn depth_metrics(d: &DepthPair) -> Result<DepthMetrics> {
    d.check()?;
    let valid: Vec<usize> = (0..d.gt.len()).filter(|&i| d.is_valid(i)).collect();
    let kept: Vec<usize> = valid.iter().copied().filter(|&i| d.pred[i] > 0.0 && d.pred[i].is_finite()).collect();
    if kept.is_empty() {
        return Err(Error::EmptyEvaluation("no valid pixel with a positive prediction".into()));
    }
    let g: Vec<f64> = kept.iter().map(|&i| d.gt[i]).collect();
    let p: Vec<f64> = kept.iter().map(|&i| d.pred[i]).collect();
    let scale = median(&g).unwrap() / median(&p).unwrap();
    let n = kept.len() as f64;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log, mut hits) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (&gi, &pi) in g.iter().zip(&p) {
        let ps = pi * scale;
        let diff = ps - gi;
        abs_rel += diff.abs() / gi;
        sq_rel += diff * diff / gi;
        se += diff * diff;
        se_log += (ps.ln() - gi.ln()).powi(2);
        hits += usize::from((ps / gi).max(gi / ps) < DELTA_THRESHOLD);
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (se / n).sqrt(),
        rmse_log: (se_log / n).sqrt(),
        delta: hits as f64 / n,
        scale,
        excluded: valid.len() - kept.len(),
    })
}

fn silog_inputs(n: usize, gt: &[f64], mask: &[bool]) -> Result<usize> {
    if gt.len() != n || mask.len() != n {
        return Err(shape_err("silog_loss", format!("{n} predictions, {} targets, {} mask entries", gt.len(), mask.len())));
    }
    if let Some(i) = (0..n).find(|&i| mask[i] && !(gt[i] > 0.0)) {
        return Err(Error::Data(format!("ground truth {} at masked pixel {i} is not positive", gt[i])));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::EmptyEvaluation("silog mask selects no pixel".into())),
        k => Ok(k),
    }
}

/// `mean(d²) − λ·mean(d)²` with `d = pred_log − ln(gt)` over masked pixels.
pub fn silog_loss(pred_log_depth: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let k = silog_inputs(pred_log_depth.len(), gt, mask)? as f64;
    let d: Vec<f64> = (0..gt.len()).filter(|&i| mask[i]).map(|i| pred_log_depth[i] - gt[i].ln()).collect();
    let m = d.iter().sum::<f64>() / k;
    Ok(d.iter().map(|x| x * x).sum::<f64>() / k - SILOG_LAMBDA * m * m)
}

/// Differentiable form of [`silog_loss`]; `pred_log_depth` may have any shape
/// whose element count matches `gt`.
pub fn silog_loss_graph(g: &mut Graph, pred_log_depth: Var, gt: &Tensor, mask: &[bool]) -> Result<Var> {
    let shape = g.value(pred_log_depth).shape().to_vec();
    let k = silog_inputs(g.value(pred_log_depth).numel(), gt.data(), mask)? as f64;
    let log_gt: Vec<f64> = gt.data().iter().zip(mask).map(|(&v, &m)| if m { v.ln() } else { 0.0 }).collect();
    let weights: Vec<f64> = mask.iter().map(|&m| f64::from(u8::from(m))).collect();
    let log_gt = g.constant(Tensor::new(shape.clone(), log_gt)?);
    let weights = g.constant(Tensor::new(shape, weights)?);
    let diff = g.sub(pred_log_depth, log_gt)?;
    let d = g.mul(diff, weights)?;
    let sq = g.mul(d, d)?;
    let sum_sq = g.sum(sq);
    let first = g.scale(sum_sq, 1.0 / k);
    let sum_d = g.sum(d);
    let mean_d = g.scale(sum_d, 1.0 / k);
    let mean_sq = g.mul(mean_d, mean_d)?;
    let second = g.scale(mean_sq, SILOG_LAMBDA);
    g.sub(first, second)
}
