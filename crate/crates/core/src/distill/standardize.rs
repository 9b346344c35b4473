use std::collections::BTreeMap;

use crate::encoders::FeatureKind;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Per-channel standardization with exponential moving averages.
///
/// The first update copies the batch statistics; later updates blend
/// `run ← m·run + (1 − m)·batch`. Output is `(x − run_mean) / sqrt(run_var + eps)`
/// using the statistics after the update, so a single batch maps to zero mean
/// and (almost) unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStandardizer {
    mean: Vec<f64>,
    var: Vec<f64>,
    momentum: f64,
    eps: f64,
    updates: u64,
}

impl FeatureStandardizer {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], momentum, eps, updates: 0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.var
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.last_dim() != self.dim() {
            return Err(shape_err("standardize", format!("features {:?} for {} channels", x.shape(), self.dim())));
        }
        Ok(())
    }

    /// Population mean and variance per channel over every leading axis.
    pub fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let d = x.last_dim();
        let rows = x.numel() / d;
        let mut mean = vec![0.0; d];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(&x.data()[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; d];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(&x.data()[r * d..(r + 1) * d]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        (mean, var)
    }

    pub fn update(&mut self, x: &Tensor) -> Result<()> {
        self.check(x)?;
        let (bm, bv) = Self::batch_stats(x);
        if self.updates == 0 {
            self.mean = bm;
            self.var = bv;
        } else {
            let m = self.momentum;
            for (r, b) in self.mean.iter_mut().zip(&bm) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.var.iter_mut().zip(&bv) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
        // Constant channels would otherwise leave a zero variance behind.
        for v in &mut self.var {
            *v = v.max(self.eps);
        }
        self.updates += 1;
        Ok(())
    }

    /// Standardizes with the current statistics; fails before the first update.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        if self.updates == 0 {
            return Err(Error::Uninitialized("standardizer has seen no training batch".into()));
        }
        let d = self.dim();
        let scale: Vec<f64> = self.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let data = x.data().iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) * scale[i % d]).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Training mode updates first, then standardizes; eval mode only standardizes.
    pub fn standardize(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        if training {
            self.update(x)?;
        }
        self.apply(x)
    }
}

/// One standardizer per (teacher, feature kind).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StandardizerBank {
    momentum: f64,
    eps: f64,
    items: BTreeMap<(String, FeatureKind), FeatureStandardizer>,
}

impl StandardizerBank {
    pub fn new(momentum: f64, eps: f64) -> Self {
        Self { momentum, eps, items: BTreeMap::new() }
    }

    pub fn get(&self, teacher: &str, kind: FeatureKind) -> Option<&FeatureStandardizer> {
        self.items.get(&(teacher.to_string(), kind))
    }

    pub fn entry(&mut self, teacher: &str, kind: FeatureKind, dim: usize) -> &mut FeatureStandardizer {
        let (m, e) = (self.momentum, self.eps);
        self.items
            .entry((teacher.to_string(), kind))
            .or_insert_with(|| FeatureStandardizer::new(dim, m, e))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, FeatureKind), &FeatureStandardizer)> {
        self.items.iter()
    }

    /// Flattens into `standardizer.<teacher>.<kind>.{mean,var,count}` tensors.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for ((t, k), st) in &self.items {
            let p = format!("standardizer.{t}.{k}");
            s.insert(format!("{p}.mean"), Tensor::vector(st.mean.clone()).expect("non-empty"));
            s.insert(format!("{p}.var"), Tensor::vector(st.var.clone()).expect("non-empty"));
            s.insert(format!("{p}.count"), Tensor::scalar(st.updates as f64));
        }
        s
    }

    pub fn from_store(store: &ParamStore, momentum: f64, eps: f64) -> Result<Self> {
        let mut bank = Self::new(momentum, eps);
        for name in store.names() {
            let Some(rest) = name.strip_prefix("standardizer.").and_then(|r| r.strip_suffix(".mean")) else {
                continue;
            };
            let (t, k) = rest
                .rsplit_once('.')
                .ok_or_else(|| Error::Format(format!("malformed standardizer entry `{name}`")))?;
            let kind = match k {
                "cls" => FeatureKind::Cls,
                "patch" => FeatureKind::Patch,
                "pooled" => FeatureKind::Pooled,
                other => return Err(Error::Format(format!("unknown feature kind `{other}`"))),
            };
            let p = format!("standardizer.{rest}");
            let mean = store.get(&format!("{p}.mean"))?.data().to_vec();
            let var = store.get(&format!("{p}.var"))?.data().to_vec();
            let count = store.get(&format!("{p}.count"))?.item()?;
            if mean.len() != var.len() || !(count >= 0.0) || count.fract() != 0.0 {
                return Err(Error::Format(format!("inconsistent standardizer `{p}`")));
            }
            bank.items.insert(
                (t.to_string(), kind),
                FeatureStandardizer { mean, var, momentum, eps, updates: count as u64 },
            );
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch() -> Tensor {
        Tensor::from_rows(&[vec![1.0, 10.0, 5.0], vec![3.0, 20.0, 5.0], vec![8.0, -30.0, 5.0], vec![0.0, 0.0, 5.0]])
            .unwrap()
    }

    #[test]
    fn eval_before_update_is_an_error() {
        let s = FeatureStandardizer::new(3, 0.9, 1e-8);
        assert!(matches!(s.apply(&batch()), Err(Error::Uninitialized(_))));
        let mut s = s;
        assert!(s.standardize(&batch(), false).is_err());
    }

    #[test]
    fn first_batch_is_whitened() {
        let mut s = FeatureStandardizer::new(3, 0.9, 1e-8);
        let y = s.standardize(&batch(), true).unwrap();
        let (m, v) = FeatureStandardizer::batch_stats(&y);
        for c in 0..2 {
            assert!(m[c].abs() < 1e-12);
            assert!((v[c] - 1.0).abs() < 1e-6, "{v:?}");
        }
        // Constant channel maps to zero rather than NaN.
        assert!(y.data().iter().skip(2).step_by(3).all(|&x| x == 0.0));
        assert!(s.running_var().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn ema_blends_later_batches() {
        let mut s = FeatureStandardizer::new(1, 0.9, 1e-8);
        s.update(&Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap()).unwrap();
        assert_eq!((s.running_mean()[0], s.running_var()[0]), (1.0, 1.0));
        s.update(&Tensor::matrix(2, 1, vec![10.0, 14.0]).unwrap()).unwrap();
        assert!((s.running_mean()[0] - (0.9 * 1.0 + 0.1 * 12.0)).abs() < 1e-15);
        assert!((s.running_var()[0] - (0.9 * 1.0 + 0.1 * 4.0)).abs() < 1e-15);
        assert_eq!(s.updates(), 2);
    }

    #[test]
    fn stats_span_all_leading_axes() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (m, v) = FeatureStandardizer::batch_stats(&x);
        assert_eq!(m, vec![2.5]);
        assert_eq!(v, vec![1.25]);
    }

    #[test]
    fn eval_mode_leaves_statistics_untouched() {
        let mut s = FeatureStandardizer::new(3, 0.9, 1e-8);
        s.update(&batch()).unwrap();
        let before = s.clone();
        s.standardize(&batch().map(|v| v * 7.0), false).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn bank_round_trips_through_store() {
        let mut bank = StandardizerBank::new(0.9, 1e-8);
        bank.entry("vision", FeatureKind::Cls, 3).update(&batch()).unwrap();
        bank.entry("vision-language", FeatureKind::Pooled, 3).update(&batch()).unwrap();
        bank.entry("vision-language", FeatureKind::Pooled, 3).update(&batch().map(|v| v + 1.0)).unwrap();
        let back = StandardizerBank::from_store(&bank.to_store(), 0.9, 1e-8).unwrap();
        assert_eq!(back, bank);
    }

    proptest! {
        #[test]
        fn running_var_stays_positive(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2), 1..6), steps in 1usize..4) {
            let x = Tensor::from_rows(&rows).unwrap();
            let mut s = FeatureStandardizer::new(2, 0.9, 1e-8);
            for _ in 0..steps {
                s.update(&x).unwrap();
                prop_assert!(s.running_var().iter().all(|&v| v > 0.0));
            }
            let y = s.apply(&x).unwrap();
            prop_assert!(y.is_finite());
        }
    }
}
