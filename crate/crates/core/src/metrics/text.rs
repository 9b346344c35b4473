use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{mean, MetricReport};
use crate::error::{shape_err, Result};

/// METEOR recall weight: `Fmean = P·R / (α·P + (1 − α)·R)`.
const METEOR_ALPHA: f64 = 0.9;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_BETA: i32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    /// Cumulative corpus BLEU-1 … BLEU-4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    pub empty_candidates: usize,
}

impl TextMetrics {
    pub fn to_report(&self) -> MetricReport {
        let mut r = MetricReport::default();
        for (n, b) in self.bleu.iter().enumerate() {
            r.insert(format!("bleu{}", n + 1), *b);
        }
        r.insert("rouge_l", self.rouge_l);
        r.insert("meteor", self.meteor);
        if self.empty_candidates > 0 {
            r.note(format!("{} empty candidates scored 0", self.empty_candidates));
        }
        r
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn corpus_bleu(cands: &[Vec<String>], refs: &[Vec<String>]) -> [f64; 4] {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (c, r) in cands.iter().zip(refs) {
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    if c_len == 0 {
        return [0.0; 4];
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0 {
            break;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        out[n] = bp * (log_sum / (n + 1) as f64).exp();
    }
    out
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

fn rouge_l(c: &[String], r: &[String]) -> f64 {
    let l = lcs(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rc = l as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Exact-match METEOR: greedy left-to-right unigram alignment, harmonic
/// mean weighted toward recall, fragmentation penalty on chunk count.
fn meteor(c: &[String], r: &[String]) -> f64 {
    let mut used = vec![false; r.len()];
    let mut pairs = Vec::new();
    for (i, tok) in c.iter().enumerate() {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *tok) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let fmean = p * rc / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rc);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powi(METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// Corpus BLEU-1..4 plus ROUGE-L and METEOR averaged over pairs; one
/// reference per candidate.
pub fn text_gen_metrics(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<TextMetrics> {
    if candidates.len() != references.len() {
        return Err(shape_err(
            "text_gen_metrics",
            format!("{} candidates for {} references", candidates.len(), references.len()),
        ));
    }
    let empty = candidates.iter().filter(|c| c.is_empty()).count();
    let score = |f: fn(&[String], &[String]) -> f64| -> f64 {
        let v: Vec<f64> = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| if c.is_empty() || r.is_empty() { 0.0 } else { f(c, r) })
            .collect();
        mean(&v)
    };
    Ok(TextMetrics {
        bleu: corpus_bleu(candidates, references),
        rouge_l: score(rouge_l),
        meteor: score(meteor),
        empty_candidates: empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identical_sentences() {
        let c = vec![toks("the grasper retracts the gallbladder")];
        let m = text_gen_metrics(&c, &c).unwrap();
        assert_eq!(m.bleu, [1.0; 4]);
        assert_eq!(m.rouge_l, 1.0);
        // One chunk of five matches leaves a small fragmentation penalty.
        assert!((m.meteor - (1.0 - 0.5 / 125.0)).abs() < 1e-15);
    }

    #[test]
    fn no_overlap() {
        let m = text_gen_metrics(&[toks("a b c d")], &[toks("e f g h")]).unwrap();
        assert_eq!((m.bleu, m.rouge_l, m.meteor), ([0.0; 4], 0.0, 0.0));
    }

    #[test]
    fn short_candidate_hand_count() {
        let m = text_gen_metrics(&[toks("The cat sat")], &[toks("the cat sat down")]).unwrap();
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        assert!((m.bleu[0] - bp).abs() < 1e-15);
        assert!((m.bleu[1] - bp).abs() < 1e-15);
        assert!((m.bleu[2] - bp).abs() < 1e-15);
        assert_eq!(m.bleu[3], 0.0);
        assert!((m.rouge_l - 2.0 * 0.75 / 1.75).abs() < 1e-15);
        let fmean = 0.75 / (0.9 + 0.1 * 0.75);
        assert!((m.meteor - fmean * (1.0 - 0.5 / 27.0)).abs() < 1e-15);
    }

    #[test]
    fn clipping_and_chunks() {
        // "the the the" against "the cat": clipped unigram precision 1/3.
        let m = text_gen_metrics(&[toks("the the the")], &[toks("the cat")]).unwrap();
        assert!((m.bleu[0] - 1.0 / 3.0).abs() < 1e-15);
        // Swapped halves form two chunks.
        let m = text_gen_metrics(&[toks("c d a b")], &[toks("a b c d")]).unwrap();
        assert!((m.meteor - (1.0 - 0.5 * (0.5f64).powi(3))).abs() < 1e-15);
    }

    #[test]
    fn empty_candidates() {
        let m = text_gen_metrics(&[vec![], toks("a b")], &[toks("a"), toks("a b")]).unwrap();
        assert_eq!(m.empty_candidates, 1);
        assert_eq!(m.rouge_l, 0.5);
        assert!(m.to_report().diagnostics[0].contains("empty"));
        assert!(text_gen_metrics(&[vec![]], &[]).is_err());
    }

    #[test]
    fn lcs_small_cases() {
        assert_eq!(lcs(&toks("a b c b d"), &toks("b d c a b")), 3);
        assert_eq!(lcs(&[], &toks("a")), 0);
    }
}
