use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::rank::average_ranks;
use crate::error::{shape_err, Error, Result};

/// Largest number of nonzero differences for which the Wilcoxon p-value
/// is computed exactly.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    /// Exact up to [`WILCOXON_EXACT_MAX`] nonzero differences, normal beyond.
    #[default]
    Auto,
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Set when the statistic is undefined and the p-value is a convention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<String>,
    /// How the p-value was obtained (`student-t`, `exact`, `normal`).
    pub method: String,
    /// Zero differences dropped before ranking (Wilcoxon only).
    #[serde(default)]
    pub dropped_zeros: usize,
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(shape_err("paired test", format!("{} vs {} runs", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Data("paired test inputs must be finite".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let d = differences(a, b)?;
    let n = d.len();
    if n < 2 {
        return Err(Error::InsufficientRuns { needed: 2, got: n });
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let method = "student-t".to_string();
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TestResult { statistic: 0.0, p_value: 1.0, degenerate: Some("all differences are zero".into()), method, dropped_zeros: 0 }
        } else {
            TestResult {
                statistic: mean.signum() * f64::INFINITY,
                p_value: 0.0,
                degenerate: Some("differences have zero variance and nonzero mean".into()),
                method,
                dropped_zeros: 0,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Contract(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TestResult { statistic: t, p_value: p, degenerate: None, method, dropped_zeros: 0 })
}

/// Two-sided Wilcoxon signed-rank test with the default method.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<TestResult> {
    wilcoxon_with(a, b, WilcoxonMethod::Auto)
}

/// Wilcoxon signed-rank test on `a − b`: zero differences are dropped,
/// tied magnitudes share their average rank, and the statistic is the sum
/// of ranks of positive differences.
pub fn wilcoxon_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<TestResult> {
    let all = differences(a, b)?;
    let d: Vec<f64> = all.iter().copied().filter(|&x| x != 0.0).collect();
    let dropped = all.len() - d.len();
    let m = d.len();
    if m == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            degenerate: Some("all differences are zero".into()),
            method: "exact".into(),
            dropped_zeros: dropped,
        });
    }
    let ranks = average_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    // Average ranks are multiples of 1/2; doubling keeps everything integral.
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let t2: u64 = doubled.iter().zip(&d).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();
    let statistic = t2 as f64 / 2.0;
    let exact = match method {
        WilcoxonMethod::Auto => m <= WILCOXON_EXACT_MAX,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p = if exact { exact_p(&doubled, t2)? } else { normal_p(&ranks, statistic)? };
    Ok(TestResult {
        statistic,
        p_value: p,
        degenerate: None,
        method: if exact { "exact" } else { "normal" }.into(),
        dropped_zeros: dropped,
    })
}

/// P(|T − μ| ≥ |t − μ|) over all 2^m equally likely sign assignments, by a
/// subset-sum count over the doubled ranks.
fn exact_p(doubled: &[u64], t2: u64) -> Result<f64> {
    let m = doubled.len();
    if m > 62 {
        return Err(Error::Config(format!("exact Wilcoxon is limited to 62 differences, got {m}")));
    }
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in doubled {
        for s in (r as usize..=total as usize).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    // Compare 2·T2 − S to avoid fractions.
    let dev = (2 * t2 as i128 - total as i128).abs();
    let hits: u64 = (0..=total).filter(|&s| (2 * s as i128 - total as i128).abs() >= dev).map(|s| counts[s as usize]).sum();
    Ok(hits as f64 / (1u64 << m) as f64)
}

fn normal_p(ranks: &[f64], statistic: f64) -> Result<f64> {
    let m = ranks.len() as f64;
    let mean = m * (m + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        tie_term += (j * j * j - j) as f64;
        i += j;
    }
    let var = m * (m + 1.0) * (2.0 * m + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (statistic - mean) / var.sqrt();
    let n = Normal::new(0.0, 1.0).map_err(|e| Error::Contract(e.to_string()))?;
    Ok((2.0 * n.sf(z.abs())).min(1.0))
}
