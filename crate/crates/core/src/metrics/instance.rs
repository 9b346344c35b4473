use serde::{Deserialize, Serialize};

use super::{mean, MetricReport};
use crate::error::{shape_err, Error, Result};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// `[x0, y0, x1, y1]` in pixel coordinates.
pub type BoxXyxy = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub class: usize,
    pub bbox: BoxXyxy,
    /// Row-major `[height × width]`.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredInstance {
    pub class: usize,
    pub score: f64,
    pub bbox: BoxXyxy,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInstances {
    pub height: usize,
    pub width: usize,
    pub preds: Vec<PredInstance>,
    pub gts: Vec<GtInstance>,
}

impl ImageInstances {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height as f64, self.width as f64);
        let check_box = |b: &BoxXyxy| {
            if !(b.iter().all(|v| v.is_finite()) && 0.0 <= b[0] && b[0] <= b[2] && b[2] <= w && 0.0 <= b[1] && b[1] <= b[3] && b[3] <= h) {
                return Err(Error::Data(format!("box {b:?} outside {}×{} image", self.height, self.width)));
            }
            Ok(())
        };
        let n = self.height * self.width;
        for g in &self.gts {
            check_box(&g.bbox)?;
            if area(&g.bbox) <= 0.0 {
                return Err(Error::Data(format!("ground-truth box {:?} has zero area", g.bbox)));
            }
            if g.mask.len() != n {
                return Err(shape_err("instance_map", format!("mask of {} pixels in {n}-pixel image", g.mask.len())));
            }
        }
        for p in &self.preds {
            check_box(&p.bbox)?;
            if p.mask.len() != n {
                return Err(shape_err("instance_map", format!("mask of {} pixels in {n}-pixel image", p.mask.len())));
            }
            if !p.score.is_finite() {
                return Err(Error::Data("non-finite prediction score".into()));
            }
        }
        Ok(())
    }
}

fn area(b: &BoxXyxy) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

pub fn box_iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMap {
    pub bbox_map: f64,
    pub mask_map: f64,
}

impl InstanceMap {
    pub fn to_report(&self) -> MetricReport {
        let mut r = MetricReport::default();
        r.insert("bbox_mAP", self.bbox_map);
        r.insert("mask_mAP", self.mask_map);
        r
    }
}

/// 101-point interpolated AP from detections already sorted by score.
fn ap_101(is_tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (i, &t) in is_tp.iter().enumerate() {
        tp += usize::from(t);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let thr = f64::from(r) / 100.0;
        let j = recall.partition_point(|&x| x < thr);
        if j < precision.len() {
            total += precision[j];
        }
    }
    total / 101.0
}

/// COCO-style AP of one class under one IoU matrix family.
fn class_ap<F>(images: &[ImageInstances], class: usize, threshold: f64, iou: &F) -> Option<f64>
where
    F: Fn(&PredInstance, &GtInstance) -> f64,
{
    let num_gt: usize = images.iter().map(|im| im.gts.iter().filter(|g| g.class == class).count()).sum();
    if num_gt == 0 {
        return None;
    }
    // (score, image, pred index), sorted by descending score; stable in input order.
    let mut dets: Vec<(f64, usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.preds.iter().enumerate().filter(|(_, p)| p.class == class).map(move |(j, p)| (p.score, i, j)))
        .collect();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut is_tp = Vec::with_capacity(dets.len());
    for &(_, i, j) in &dets {
        let im = &images[i];
        let p = &im.preds[j];
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in im.gts.iter().enumerate() {
            if g.class != class || taken[i][k] {
                continue;
            }
            let v = iou(p, g);
            if v >= threshold && best.is_none_or(|b| v > b.1) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            taken[i][k] = true;
        }
        is_tp.push(best.is_some());
    }
    Some(ap_101(&is_tp, num_gt))
}

fn map_over<F>(images: &[ImageInstances], iou: F) -> f64
where
    F: Fn(&PredInstance, &GtInstance) -> f64,
{
    let max_class = images.iter().flat_map(|im| im.gts.iter().map(|g| g.class)).max();
    let Some(max_class) = max_class else { return 0.0 };
    let per_class: Vec<f64> = (0..=max_class)
        .filter_map(|c| {
            let aps: Option<Vec<f64>> = IOU_THRESHOLDS.iter().map(|&t| class_ap(images, c, t, &iou)).collect();
            aps.map(|a| mean(&a))
        })
        .collect();
    mean(&per_class)
}

/// Box and mask mAP averaged over IoU thresholds 0.50:0.05:0.95 and over
/// classes that have ground truth.
pub fn instance_map(images: &[ImageInstances]) -> Result<InstanceMap> {
    for im in images {
        im.validate()?;
    }
    if images.iter().all(|im| im.gts.is_empty()) {
        return Err(Error::EmptyEvaluation("no ground-truth instances".into()));
    }
    Ok(InstanceMap {
        bbox_map: map_over(images, |p, g| box_iou(&p.bbox, &g.bbox)),
        mask_map: map_over(images, |p, g| mask_iou(&p.mask, &g.mask)),
    })
}
