use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CI95_Z: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
    pub se: f64,
    /// Half-width of the 95% interval: 1.96 · se.
    pub ci95: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientRuns { needed: 2, got: n });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("run values must be finite".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let se = std / (n as f64).sqrt();
    Ok(Summary { n, mean, std, se, ci95: CI95_Z * se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert!((s.std - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((s.se - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((s.ci95 - 1.3859).abs() < 5e-5);
    }

    #[test]
    fn identical_values() {
        let s = summarize(&[0.7; 5]).unwrap();
        assert_eq!((s.std, s.ci95), (0.0, 0.0));
    }

    #[test]
    fn needs_two_runs() {
        assert!(matches!(summarize(&[1.0]), Err(Error::InsufficientRuns { needed: 2, got: 1 })));
    }

    proptest! {
        #[test]
        fn ci_is_exactly_scaled_se(v in prop::collection::vec(-1e3f64..1e3, 2..12)) {
            let s = summarize(&v).unwrap();
            prop_assert_eq!(s.ci95, CI95_Z * s.se);
        }

        #[test]
        fn translation_moves_only_the_mean(v in prop::collection::vec(-10f64..10.0, 2..12), c in -10f64..10.0) {
            let a = summarize(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = summarize(&shifted).unwrap();
            prop_assert!((b.mean - a.mean - c).abs() < 1e-9);
            prop_assert!((b.std - a.std).abs() < 1e-9);
        }
    }
}
