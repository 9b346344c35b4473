use std::collections::BTreeMap;

use serde::Serialize;

use super::{mean, MetricReport};
use crate::error::{shape_err, Error, Result};

/// All-points interpolated average precision.
///
/// Items are ranked by descending score; tied scores form one operating
/// point. Precision is replaced by its running maximum from the right and
/// integrated over recall. Returns `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // (recall, precision) at the end of every tie group.
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

/// Scores in `[0, 1]` and binary labels, both `[instances × classes]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelScores {
    pub instances: usize,
    pub classes: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl MultiLabelScores {
    pub fn new(instances: usize, classes: usize, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != instances * classes || labels.len() != scores.len() {
            return Err(shape_err(
                "multilabel",
                format!("{} scores / {} labels for {instances}×{classes}", scores.len(), labels.len()),
            ));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("scores must be finite".into()));
        }
        Ok(Self { instances, classes, scores, labels })
    }

    pub fn from_rows(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<Self> {
        let classes = scores.first().map_or(0, Vec::len);
        if scores.iter().any(|r| r.len() != classes) || labels.iter().any(|r| r.len() != classes) {
            return Err(shape_err("multilabel", "ragged rows".to_string()));
        }
        Self::new(scores.len(), classes, scores.concat(), labels.concat())
    }

    fn column(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        (0..self.instances)
            .map(|i| (self.scores[i * self.classes + c], self.labels[i * self.classes + c]))
            .unzip()
    }

    /// Per-class AP (None for classes without positives) and their mean.
    fn map(&self) -> (Vec<Option<f64>>, f64, usize) {
        let aps: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let (s, l) = self.column(c);
                average_precision(&s, &l)
            })
            .collect();
        let present: Vec<f64> = aps.iter().flatten().copied().collect();
        let skipped = self.classes - present.len();
        (aps, mean(&present), skipped)
    }
}

/// `{mAP, macro_f1}` for multi-label scores; F1 at `score ≥ threshold`,
/// averaged over classes that are positive in the labels or the predictions.
pub fn multilabel_map_f1(s: &MultiLabelScores, threshold: f64) -> MetricReport {
    let mut report = MetricReport::default();
    let (_, map, skipped) = s.map();
    if skipped > 0 {
        report.note(format!("{skipped} classes without positives excluded from mAP"));
    }
    let mut f1s = Vec::new();
    for c in 0..s.classes {
        let (sc, lb) = s.column(c);
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for (score, &label) in sc.iter().zip(&lb) {
            match (*score >= threshold, label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fnn > 0 {
            f1s.push(2.0 * tp as f64 / (2 * tp + fp + fnn) as f64);
        }
    }
    if f1s.is_empty() {
        report.note("no class has labels or predictions; macro F1 set to 0");
    }
    report.insert("mAP", map);
    report.insert("macro_f1", mean(&f1s));
    report
}

/// Maps every triplet class to its (instrument, verb, target) ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletComponents {
    pub map: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TripletMap {
    pub ap_i: f64,
    pub ap_v: f64,
    pub ap_t: f64,
    pub ap_iv: f64,
    pub ap_it: f64,
    pub ap_ivt: f64,
    /// Classes without positives per component, in I, V, T, IV, IT, IVT order.
    pub skipped: [usize; 6],
}

impl TripletMap {
    pub fn to_report(&self) -> MetricReport {
        let mut r = MetricReport::default();
        for (k, v) in [
            ("AP_I", self.ap_i),
            ("AP_V", self.ap_v),
            ("AP_T", self.ap_t),
            ("AP_IV", self.ap_iv),
            ("AP_IT", self.ap_it),
            ("AP_IVT", self.ap_ivt),
        ] {
            r.insert(k, v);
        }
        let names = ["I", "V", "T", "IV", "IT", "IVT"];
        for (n, &s) in names.iter().zip(&self.skipped) {
            if s > 0 {
                r.note(format!("{n}: {s} classes without positives excluded"));
            }
        }
        r
    }
}

/// Collapses triplet columns into component columns keyed by `key`:
/// per instance, the max score and the OR of labels over mapped triplets.
fn collapse<K: Ord + Copy>(s: &MultiLabelScores, keys: &[K]) -> MultiLabelScores {
    let mut index: BTreeMap<K, usize> = BTreeMap::new();
    for &k in keys {
        let n = index.len();
        index.entry(k).or_insert(n);
    }
    // Re-number in key order so output columns are sorted.
    let ordered: BTreeMap<K, usize> = index.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    let m = ordered.len();
    let mut scores = vec![f64::NEG_INFINITY; s.instances * m];
    let mut labels = vec![false; s.instances * m];
    for i in 0..s.instances {
        for (t, k) in keys.iter().enumerate() {
            let c = ordered[k];
            let src = i * s.classes + t;
            let dst = i * m + c;
            scores[dst] = scores[dst].max(s.scores[src]);
            labels[dst] |= s.labels[src];
        }
    }
    MultiLabelScores { instances: s.instances, classes: m, scores, labels }
}

/// Component, pair and full-triplet mAP from triplet scores.
pub fn triplet_map(s: &MultiLabelScores, comps: &TripletComponents) -> Result<TripletMap> {
    if comps.map.len() != s.classes {
        return Err(shape_err(
            "triplet_map",
            format!("{} component entries for {} triplet classes", comps.map.len(), s.classes),
        ));
    }
    let m = &comps.map;
    let run = |keys: Vec<(usize, usize)>| {
        let c = collapse(s, &keys);
        let (_, map, skipped) = c.map();
        (map, skipped)
    };
    let (ap_i, si) = run(m.iter().map(|t| (t.0, 0)).collect());
    let (ap_v, sv) = run(m.iter().map(|t| (t.1, 0)).collect());
    let (ap_t, st) = run(m.iter().map(|t| (t.2, 0)).collect());
    let (ap_iv, siv) = run(m.iter().map(|t| (t.0, t.1)).collect());
    let (ap_it, sit) = run(m.iter().map(|t| (t.0, t.2)).collect());
    let (_, ap_ivt, sivt) = s.map();
    Ok(TripletMap { ap_i, ap_v, ap_t, ap_iv, ap_it, ap_ivt, skipped: [si, sv, st, siv, sit, sivt] })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use num::rational::Ratio;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exact all-points AP by enumerating every distinct threshold τ:
    /// P(τ), R(τ) count the items with score ≥ τ.
    pub(crate) fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let pos = labels.iter().filter(|&&l| l).count() as i64;
        if pos == 0 {
            return None;
        }
        let mut taus: Vec<f64> = scores.to_vec();
        taus.sort_by(|a, b| b.total_cmp(a));
        taus.dedup();
        let pr: Vec<(Ratio<i64>, Ratio<i64>)> = taus
            .iter()
            .map(|&t| {
                let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
                let tp = sel.iter().filter(|&&i| labels[i]).count() as i64;
                (Ratio::new(tp, pos), Ratio::new(tp, sel.len() as i64))
            })
            .collect();
        let mut total = Ratio::from_integer(0);
        let mut prev = Ratio::from_integer(0);
        for (j, (r, _)) in pr.iter().enumerate() {
            let best = pr[j..].iter().map(|x| x.1).max().unwrap();
            total += (r - prev) * best;
            prev = *r;
        }
        Some(*total.numer() as f64 / *total.denom() as f64)
    }

    #[test]
    fn hand_fixture() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_inverted_rankings() {
        let labels = [true, true, false, false, true, false];
        let perfect: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        assert_eq!(average_precision(&perfect, &labels), Some(1.0));
        let inverted: Vec<f64> = perfect.iter().map(|s| 1.0 - s).collect();
        let ap = average_precision(&inverted, &labels).unwrap();
        assert!((ap - 0.5).abs() < 1e-15, "{ap}");
        assert_eq!(average_precision(&[0.3, 0.2], &[false, false]), None);
    }

    #[test]
    fn matches_enumeration_oracle_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..=20);
            // Coarse scores so ties are common.
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            match (average_precision(&scores, &labels), ap_oracle(&scores, &labels)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((0u8..5, any::<bool>()), 1..20), seed in any::<u64>()) {
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l2: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(average_precision(&scores, &labels), average_precision(&s2, &l2));
        }

        #[test]
        fn raising_a_true_positive_never_hurts(pairs in prop::collection::vec((0u8..5, any::<bool>()), 1..20), pick in any::<prop::sample::Index>()) {
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
            prop_assume!(!pos.is_empty());
            let i = pos[pick.index(pos.len())];
            let mut raised = scores.clone();
            raised[i] += 1.5;
            prop_assert!(average_precision(&raised, &labels).unwrap() >= average_precision(&scores, &labels).unwrap() - 1e-15);
        }
    }

    fn comps() -> TripletComponents {
        TripletComponents { map: vec![(0, 0, 0), (0, 1, 1), (1, 1, 0), (1, 0, 1)] }
    }

    #[test]
    fn perfect_triplet_scores_give_unit_aps() {
        let labels = vec![
            vec![true, false, false, false],
            vec![false, true, true, false],
            vec![false, false, false, true],
            vec![true, false, false, false],
        ];
        let scores: Vec<Vec<f64>> = labels.iter().map(|r| r.iter().map(|&l| f64::from(u8::from(l))).collect()).collect();
        let m = triplet_map(&MultiLabelScores::from_rows(&scores, &labels).unwrap(), &comps()).unwrap();
        for v in [m.ap_i, m.ap_v, m.ap_t, m.ap_iv, m.ap_it, m.ap_ivt] {
            assert_eq!(v, 1.0);
        }
    }

    /// Component AP by direct enumeration: per component class, per instance,
    /// max over mapped triplets and OR of their labels, then the AP oracle.
    pub(crate) fn component_oracle(s: &MultiLabelScores, map: &[(usize, usize, usize)], key: impl Fn(&(usize, usize, usize)) -> (usize, usize)) -> (f64, usize) {
        let mut classes: Vec<(usize, usize)> = map.iter().map(&key).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut aps = Vec::new();
        for c in &classes {
            let mut sc = Vec::new();
            let mut lb = Vec::new();
            for i in 0..s.instances {
                let ts: Vec<usize> = (0..map.len()).filter(|&t| key(&map[t]) == *c).collect();
                sc.push(ts.iter().map(|&t| s.scores[i * s.classes + t]).fold(f64::NEG_INFINITY, f64::max));
                lb.push(ts.iter().any(|&t| s.labels[i * s.classes + t]));
            }
            if let Some(a) = ap_oracle(&sc, &lb) {
                aps.push(a);
            }
        }
        let skipped = classes.len() - aps.len();
        (if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 }, skipped)
    }

    pub(crate) fn random_triplet_fixture(rng: &mut ChaCha8Rng) -> (MultiLabelScores, TripletComponents) {
        let t = rng.random_range(1..=6);
        let n = rng.random_range(1..=20usize);
        let map: Vec<(usize, usize, usize)> =
            (0..t).map(|_| (rng.random_range(0..3), rng.random_range(0..3), rng.random_range(0..3))).collect();
        let scores: Vec<f64> = (0..n * t).map(|_| rng.random_range(0..8) as f64 / 7.0).collect();
        let labels: Vec<bool> = (0..n * t).map(|_| rng.random_bool(0.3)).collect();
        (MultiLabelScores::new(n, t, scores, labels).unwrap(), TripletComponents { map })
    }

    #[test]
    fn triplet_map_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let (s, c) = random_triplet_fixture(&mut rng);
            let m = triplet_map(&s, &c).unwrap();
            let checks = [
                (m.ap_i, component_oracle(&s, &c.map, |x| (x.0, 0))),
                (m.ap_v, component_oracle(&s, &c.map, |x| (x.1, 0))),
                (m.ap_t, component_oracle(&s, &c.map, |x| (x.2, 0))),
                (m.ap_iv, component_oracle(&s, &c.map, |x| (x.0, x.1))),
                (m.ap_it, component_oracle(&s, &c.map, |x| (x.0, x.2))),
            ];
            for (got, (want, _)) in checks {
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn classes_without_positives_are_counted() {
        let s = MultiLabelScores::new(2, 2, vec![0.4, 0.9, 0.2, 0.1], vec![true, false, false, false]).unwrap();
        let r = multilabel_map_f1(&s, 0.5);
        assert_eq!(r.get("mAP"), Some(1.0));
        assert!(r.diagnostics.iter().any(|d| d.starts_with("1 classes")));
    }

    #[test]
    fn multilabel_f1_cases() {
        let s = MultiLabelScores::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![true, false, false, true]).unwrap();
        let r = multilabel_map_f1(&s, 0.5);
        assert_eq!((r.get("mAP"), r.get("macro_f1")), (Some(1.0), Some(1.0)));

        let s = MultiLabelScores::new(2, 2, vec![0.9, 0.2, 0.3, 0.99], vec![true, false, false, true]).unwrap();
        let r = multilabel_map_f1(&s, 1.0);
        assert_eq!(r.get("macro_f1"), Some(0.0));
    }

    #[test]
    fn shape_errors() {
        assert!(MultiLabelScores::new(2, 2, vec![0.0; 3], vec![false; 4]).is_err());
        let s = MultiLabelScores::new(1, 2, vec![0.0; 2], vec![false; 2]).unwrap();
        assert!(triplet_map(&s, &TripletComponents { map: vec![(0, 0, 0)] }).is_err());
    }
}
