use serde::{Deserialize, Serialize};

use super::MetricReport;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Similarities `[queries × gallery]` and the true gallery index per query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMatrix {
    pub similarity: Vec<Vec<f64>>,
    pub matches: Vec<usize>,
}

impl RetrievalMatrix {
    pub fn new(similarity: Vec<Vec<f64>>, matches: Vec<usize>) -> Result<Self> {
        let r = Self { similarity, matches };
        r.validate()?;
        Ok(r)
    }

    pub fn gallery_size(&self) -> usize {
        self.similarity.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.gallery_size();
        if self.similarity.len() != self.matches.len() {
            return Err(shape_err(
                "recall_at_k",
                format!("{} queries but {} match indices", self.similarity.len(), self.matches.len()),
            ));
        }
        if self.similarity.iter().any(|r| r.len() != g) {
            return Err(shape_err("recall_at_k", "ragged similarity rows"));
        }
        if let Some(&m) = self.matches.iter().find(|&&m| m >= g) {
            return Err(Error::Data(format!("match index {m} outside gallery of {g}")));
        }
        if self.similarity.iter().flatten().any(|s| s.is_nan()) {
            return Err(Error::Data("NaN similarity".into()));
        }
        Ok(())
    }

    /// 0-based rank of the true match: the number of gallery items ranked
    /// ahead of it (higher similarity, or equal similarity at a lower index).
    fn rank_of_match(&self, q: usize) -> usize {
        let row = &self.similarity[q];
        let m = self.matches[q];
        row.iter().enumerate().filter(|&(j, &s)| s > row[m] || (s == row[m] && j < m)).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub mean_recall: f64,
}

impl RecallAtK {
    pub fn to_report(&self) -> MetricReport {
        let mut r = MetricReport::default();
        for (k, v) in self.ks.iter().zip(&self.recalls) {
            r.insert(format!("recall@{k}"), *v);
        }
        r.insert("mean_recall", self.mean_recall);
        r
    }
}

pub fn mean_recall(recalls: &[f64]) -> f64 {
    super::mean(recalls)
}

/// Fraction of queries whose match ranks in the top `k`, for each `k`.
pub fn recall_at_k(r: &RetrievalMatrix, ks: &[usize]) -> Result<RecallAtK> {
    r.validate()?;
    if r.matches.is_empty() {
        return Err(Error::EmptyEvaluation("no queries".into()));
    }
    let g = r.gallery_size();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > g) {
        return Err(Error::Contract(format!("k = {k} needs 1 <= k <= gallery size {g}")));
    }
    let ranks: Vec<usize> = (0..r.matches.len()).map(|q| r.rank_of_match(q)).collect();
    let recalls: Vec<f64> =
        ks.iter().map(|&k| ranks.iter().filter(|&&rk| rk < k).count() as f64 / ranks.len() as f64).collect();
    Ok(RecallAtK { ks: ks.to_vec(), mean_recall: mean_recall(&recalls), recalls })
}

/// Argmax of image · class-text dot products; ties go to the lower class.
pub fn zero_shot_classify(image_embs: &Tensor, class_text_embs: &Tensor) -> Result<Vec<usize>> {
    if image_embs.rank() != 2 || class_text_embs.rank() != 2 || image_embs.last_dim() != class_text_embs.last_dim() {
        return Err(shape_err(
            "zero_shot_classify",
            format!("{:?} images vs {:?} class embeddings", image_embs.shape(), class_text_embs.shape()),
        ));
    }
    if class_text_embs.rows() == 0 {
        return Err(Error::Data("no classes".into()));
    }
    Ok((0..image_embs.rows())
        .map(|i| {
            let x = image_embs.row(i);
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..class_text_embs.rows() {
                let s: f64 = x.iter().zip(class_text_embs.row(c)).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (c, s);
                }
            }
            best.0
        })
        .collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sorts the whole gallery with an explicit (−similarity, index) key and
    /// checks membership of the match in the first k.
    pub(crate) fn recall_oracle(r: &RetrievalMatrix, k: usize) -> f64 {
        let mut hits = 0;
        for (q, row) in r.similarity.iter().enumerate() {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            hits += usize::from(idx[..k].contains(&r.matches[q]));
        }
        hits as f64 / r.matches.len() as f64
    }

    pub(crate) fn random_retrieval_fixture(rng: &mut ChaCha8Rng) -> RetrievalMatrix {
        let q = rng.random_range(1..=20);
        let g = rng.random_range(10..=20);
        let sim = (0..q).map(|_| (0..g).map(|_| rng.random_range(0..5) as f64).collect()).collect();
        let m = (0..q).map(|_| rng.random_range(0..g)).collect();
        RetrievalMatrix::new(sim, m).unwrap()
    }

    #[test]
    fn identity_similarity() {
        let n = 12;
        let sim = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let r = recall_at_k(&RetrievalMatrix::new(sim, (0..n).collect()).unwrap(), &[1, 5, 10]).unwrap();
        assert_eq!(r.recalls, vec![1.0; 3]);
        assert_eq!(r.mean_recall, 1.0);
    }

    #[test]
    fn reported_mean_recalls() {
        assert!((mean_recall(&[0.0703, 0.2793, 0.4723]) - 0.2740).abs() <= 0.00005);
        assert!((mean_recall(&[0.0814, 0.3116, 0.5176]) - 0.3035).abs() <= 0.00005);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let r = RetrievalMatrix::new(vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]], vec![0, 1]).unwrap();
        assert_eq!(recall_at_k(&r, &[1]).unwrap().recalls, vec![0.5]);
    }

    #[test]
    fn k_beyond_gallery_is_a_contract_error() {
        let r = RetrievalMatrix::new(vec![vec![0.0; 4]], vec![0]).unwrap();
        assert!(matches!(recall_at_k(&r, &[5]), Err(Error::Contract(_))));
        assert!(RetrievalMatrix::new(vec![vec![0.0; 4]], vec![4]).is_err());
    }

    #[test]
    fn matches_oracle_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let r = random_retrieval_fixture(&mut rng);
            let got = recall_at_k(&r, &[1, 5, 10]).unwrap();
            for (k, v) in got.ks.iter().zip(&got.recalls) {
                assert_eq!(*v, recall_oracle(&r, *k));
            }
        }
    }

    #[test]
    fn zero_shot_cases() {
        let text = Tensor::eye(3);
        let imgs = Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(zero_shot_classify(&imgs, &text).unwrap(), vec![2, 1, 0]);
        let scaled = imgs.map(|v| v * 3.7);
        assert_eq!(zero_shot_classify(&scaled, &text).unwrap(), vec![2, 1, 0]);
        assert!(zero_shot_classify(&imgs, &Tensor::eye(2)).is_err());
    }

    #[test]
    fn zero_shot_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..25 {
            let imgs = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let text = Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let got = zero_shot_classify(&imgs, &text).unwrap();
            for i in 0..3 {
                let s: Vec<f64> = (0..2).map(|c| (0..4).map(|d| imgs.row(i)[d] * text.row(c)[d]).sum()).collect();
                assert_eq!(got[i], usize::from(s[1] > s[0]));
            }
        }
    }
}
