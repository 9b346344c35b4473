//! Downstream evaluation metrics.

mod ap;
mod depth;
mod instance;
mod phase;
mod retrieval;
mod segmentation;
mod text;

pub use ap::{average_precision, multilabel_map_f1, triplet_map, MultiLabelScores, TripletComponents, TripletMap};
pub use depth::{depth_metrics, median, silog_loss, silog_loss_graph, DepthMetrics, DepthPair, SILOG_LAMBDA};
pub use instance::{box_iou, instance_map, mask_iou, GtInstance, ImageInstances, InstanceMap, PredInstance, IOU_THRESHOLDS};
pub use phase::{phase_metrics, PhaseMetrics, PhaseSequences, VideoPhases};
pub use retrieval::{mean_recall, recall_at_k, zero_shot_classify, RecallAtK, RetrievalMatrix};
pub use segmentation::{boundary, dice_hd95, distance_transform, percentile, MaskPair, SegmentationMetrics};
pub use text::{text_gen_metrics, tokenize, TextMetrics};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Metric name → value, plus notes about anything skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl MetricReport {
    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn note(&mut self, msg: impl Into<String>) {
        self.diagnostics.push(msg.into());
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
