use serde::{Deserialize, Serialize};

use super::{mean, MetricReport};
use crate::error::{shape_err, Error, Result};

/// Frame-aligned predicted and ground-truth phase ids of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPhases {
    pub video_id: String,
    pub pred: Vec<usize>,
    pub gt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSequences {
    pub num_classes: usize,
    pub videos: Vec<VideoPhases>,
}

impl PhaseSequences {
    pub fn new(num_classes: usize, videos: Vec<VideoPhases>) -> Result<Self> {
        let s = Self { num_classes, videos };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.videos {
            if v.pred.len() != v.gt.len() {
                return Err(shape_err(
                    "phase_metrics",
                    format!("video {}: {} predictions for {} frames", v.video_id, v.pred.len(), v.gt.len()),
                ));
            }
            if let Some(bad) = v.pred.iter().chain(&v.gt).find(|&&c| c >= self.num_classes) {
                return Err(Error::Data(format!(
                    "video {}: phase id {bad} outside [0, {})",
                    v.video_id, self.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub video_macro_f1: f64,
    pub video_accuracy: f64,
    pub phase_precision: f64,
    pub phase_recall: f64,
    pub phase_jaccard: f64,
}

impl PhaseMetrics {
    pub fn into_report(self, diagnostics: Vec<String>) -> MetricReport {
        let mut r = MetricReport { diagnostics, ..Default::default() };
        r.insert("video_macro_f1", self.video_macro_f1);
        r.insert("video_accuracy", self.video_accuracy);
        r.insert("phase_precision", self.phase_precision);
        r.insert("phase_recall", self.phase_recall);
        r.insert("phase_jaccard", self.phase_jaccard);
        r
    }
}

/// Per-class (tp, fp, fn) counts.
fn confusion(pred: &[usize], gt: &[usize], c: usize) -> Vec<[usize; 3]> {
    let mut counts = vec![[0usize; 3]; c];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            counts[p][0] += 1;
        } else {
            counts[p][1] += 1;
            counts[g][2] += 1;
        }
    }
    counts
}

/// Video-level F1 and accuracy are computed per video and averaged; the
/// per-video F1 is a macro average over phases occurring in that video's
/// labels or predictions. Phase-level precision, recall and Jaccard pool all
/// frames and are averaged over phases present in the ground truth.
/// Empty videos are skipped with a diagnostic.
pub fn phase_metrics(seqs: &PhaseSequences) -> Result<(PhaseMetrics, Vec<String>)> {
    seqs.validate()?;
    let c = seqs.num_classes;
    let mut notes = Vec::new();
    let mut f1s = Vec::new();
    let mut accs = Vec::new();
    let mut pooled = vec![[0usize; 3]; c];
    for v in &seqs.videos {
        if v.gt.is_empty() {
            notes.push(format!("video {} has no frames; excluded", v.video_id));
            continue;
        }
        let counts = confusion(&v.pred, &v.gt, c);
        let per_class: Vec<f64> = counts
            .iter()
            .filter(|k| k[0] + k[1] + k[2] > 0)
            .map(|k| 2.0 * k[0] as f64 / (2 * k[0] + k[1] + k[2]) as f64)
            .collect();
        f1s.push(mean(&per_class));
        let correct: usize = counts.iter().map(|k| k[0]).sum();
        accs.push(correct as f64 / v.gt.len() as f64);
        for (acc, k) in pooled.iter_mut().zip(&counts) {
            for j in 0..3 {
                acc[j] += k[j];
            }
        }
    }
    if f1s.is_empty() {
        return Err(Error::EmptyEvaluation("no video with frames".into()));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let present: Vec<&[usize; 3]> = pooled.iter().filter(|k| k[0] + k[2] > 0).collect();
    let precision: Vec<f64> = present.iter().map(|k| ratio(k[0], k[0] + k[1])).collect();
    let recall: Vec<f64> = present.iter().map(|k| ratio(k[0], k[0] + k[2])).collect();
    let jaccard: Vec<f64> = present.iter().map(|k| ratio(k[0], k[0] + k[1] + k[2])).collect();
    Ok((
        PhaseMetrics {
            video_macro_f1: mean(&f1s),
            video_accuracy: mean(&accs),
            phase_precision: mean(&precision),
            phase_recall: mean(&recall),
            phase_jaccard: mean(&jaccard),
        },
        notes,
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seqs(c: usize, vids: Vec<(Vec<usize>, Vec<usize>)>) -> PhaseSequences {
        let videos = vids
            .into_iter()
            .enumerate()
            .map(|(i, (pred, gt))| VideoPhases { video_id: format!("v{i}"), pred, gt })
            .collect();
        PhaseSequences::new(c, videos).unwrap()
    }

    /// Straight from set definitions: for each class, count frames with
    /// predicate membership instead of a confusion matrix.
    pub(crate) fn phase_oracle(s: &PhaseSequences) -> PhaseMetrics {
        let vids: Vec<&VideoPhases> = s.videos.iter().filter(|v| !v.gt.is_empty()).collect();
        let mut f1 = 0.0;
        let mut acc = 0.0;
        for v in &vids {
            let n = v.gt.len();
            acc += (0..n).filter(|&i| v.pred[i] == v.gt[i]).count() as f64 / n as f64;
            let classes: Vec<usize> = (0..s.num_classes).filter(|c| v.gt.contains(c) || v.pred.contains(c)).collect();
            let mut sum = 0.0;
            for &c in &classes {
                let p: Vec<usize> = (0..n).filter(|&i| v.pred[i] == c).collect();
                let g: Vec<usize> = (0..n).filter(|&i| v.gt[i] == c).collect();
                let inter = p.iter().filter(|i| g.contains(i)).count();
                sum += 2.0 * inter as f64 / (p.len() + g.len()) as f64;
            }
            f1 += sum / classes.len() as f64;
        }
        let frames: Vec<(usize, usize)> = vids.iter().flat_map(|v| v.pred.iter().copied().zip(v.gt.iter().copied())).collect();
        let (mut pr, mut rc, mut ja, mut k) = (0.0, 0.0, 0.0, 0usize);
        for c in 0..s.num_classes {
            let g = frames.iter().filter(|f| f.1 == c).count();
            if g == 0 {
                continue;
            }
            let p = frames.iter().filter(|f| f.0 == c).count();
            let both = frames.iter().filter(|f| f.0 == c && f.1 == c).count();
            let either = frames.iter().filter(|f| f.0 == c || f.1 == c).count();
            pr += if p == 0 { 0.0 } else { both as f64 / p as f64 };
            rc += both as f64 / g as f64;
            ja += both as f64 / either as f64;
            k += 1;
        }
        let nv = vids.len() as f64;
        let kf = k as f64;
        PhaseMetrics { video_macro_f1: f1 / nv, video_accuracy: acc / nv, phase_precision: pr / kf, phase_recall: rc / kf, phase_jaccard: ja / kf }
    }

    pub(crate) fn random_phase_fixture(rng: &mut ChaCha8Rng) -> PhaseSequences {
        let c = rng.random_range(1..=5);
        let nv = rng.random_range(1..=4);
        let vids = (0..nv)
            .map(|_| {
                let n = rng.random_range(1..=20 / nv);
                let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
                let pred = gt.iter().map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..c) }).collect();
                (pred, gt)
            })
            .collect();
        seqs(c, vids)
    }

    #[test]
    fn perfect_predictions() {
        let s = seqs(3, vec![(vec![0, 1, 2, 2], vec![0, 1, 2, 2]), (vec![1], vec![1])]);
        let (m, _) = phase_metrics(&s).unwrap();
        assert_eq!(m, PhaseMetrics { video_macro_f1: 1.0, video_accuracy: 1.0, phase_precision: 1.0, phase_recall: 1.0, phase_jaccard: 1.0 });
    }

    #[test]
    fn constant_predictor_on_balanced_video() {
        let s = seqs(2, vec![(vec![0, 0, 0, 0], vec![0, 0, 1, 1])]);
        let (m, _) = phase_metrics(&s).unwrap();
        assert_eq!(m.video_accuracy, 0.5);
        assert!((m.video_macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_frame_videos() {
        let s = seqs(4, vec![(vec![0], vec![0]), (vec![3], vec![3]), (vec![3], vec![3])]);
        assert_eq!(phase_metrics(&s).unwrap().0.video_accuracy, 1.0);
    }

    #[test]
    fn empty_videos_are_skipped_with_a_note() {
        let s = seqs(2, vec![(vec![], vec![]), (vec![1], vec![1])]);
        let (m, notes) = phase_metrics(&s).unwrap();
        assert_eq!(m.video_accuracy, 1.0);
        assert_eq!(notes.len(), 1);
        assert!(phase_metrics(&seqs(2, vec![(vec![], vec![])])).is_err());
    }

    #[test]
    fn invalid_inputs() {
        let bad = vec![VideoPhases { video_id: "a".into(), pred: vec![0], gt: vec![0, 1] }];
        assert!(PhaseSequences::new(2, bad).is_err());
        let bad = vec![VideoPhases { video_id: "a".into(), pred: vec![2], gt: vec![0] }];
        assert!(PhaseSequences::new(2, bad).is_err());
    }

    #[test]
    fn matches_oracle_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = random_phase_fixture(&mut rng);
            let (m, _) = phase_metrics(&s).unwrap();
            let o = phase_oracle(&s);
            for (a, b) in [
                (m.video_macro_f1, o.video_macro_f1),
                (m.video_accuracy, o.video_accuracy),
                (m.phase_precision, o.phase_precision),
                (m.phase_recall, o.phase_recall),
                (m.phase_jaccard, o.phase_jaccard),
            ] {
                assert!((a - b).abs() < 1e-12, "{m:?} vs {o:?}");
            }
        }
    }

    #[test]
    fn video_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let s = random_phase_fixture(&mut rng);
            let mut r = s.clone();
            r.videos.reverse();
            let (a, b) = (phase_metrics(&s).unwrap().0, phase_metrics(&r).unwrap().0);
            assert!((a.video_macro_f1 - b.video_macro_f1).abs() < 1e-12);
            assert_eq!(a.phase_jaccard, b.phase_jaccard);
        }
    }
}
