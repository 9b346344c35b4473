use serde::{Deserialize, Serialize};

use super::{mean, MetricReport};
use crate::error::{shape_err, Error, Result};

/// Predicted and ground-truth label rasters, row-major `[height × width]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pred: Vec<usize>,
    pub gt: Vec<usize>,
}

impl MaskPair {
    pub fn new(height: usize, width: usize, num_classes: usize, pred: Vec<usize>, gt: Vec<usize>) -> Result<Self> {
        let m = Self { height, width, num_classes, pred, gt };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.pred.len() != n || self.gt.len() != n {
            return Err(shape_err(
                "dice_hd95",
                format!("{}×{} raster vs {} / {} labels", self.height, self.width, self.pred.len(), self.gt.len()),
            ));
        }
        if let Some(l) = self.pred.iter().chain(&self.gt).find(|&&l| l >= self.num_classes) {
            return Err(Error::Data(format!("label {l} outside [0, {})", self.num_classes)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    /// Per class; `None` when the class is absent from both masks.
    pub dice: Vec<Option<f64>>,
    pub hd95: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub mean_hd95: f64,
}

impl SegmentationMetrics {
    pub fn to_report(&self) -> MetricReport {
        let mut r = MetricReport::default();
        for (c, (d, h)) in self.dice.iter().zip(&self.hd95).enumerate() {
            match (d, h) {
                (Some(d), Some(h)) => {
                    r.insert(format!("dice_{c}"), *d);
                    r.insert(format!("hd95_{c}"), *h);
                }
                _ => r.note(format!("class {c} absent from both masks; skipped")),
            }
        }
        r.insert("dice", self.mean_dice);
        r.insert("hd95", self.mean_hd95);
        r
    }
}

/// Foreground pixels with at least one 4-neighbour outside the mask; the
/// image border counts as outside.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: usize, x: usize| mask[y * w + x];
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            out[y * w + x] = edge || !at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1);
        }
    }
    out
}

/// Exact squared Euclidean distance transform of one row (lower envelope
/// of parabolas rooted at the sites `f`).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![f64::INFINITY; n];
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return d;
    }
    let mut v = vec![sites[0]];
    let mut z = vec![f64::NEG_INFINITY, f64::INFINITY];
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for &q in &sites[1..] {
        let mut s = inter(q, *v.last().unwrap());
        while s <= z[v.len() - 1] {
            v.pop();
            z.pop();
            s = inter(q, *v.last().unwrap());
        }
        v.push(q);
        *z.last_mut().unwrap() = s;
        z.push(f64::INFINITY);
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
    d
}

/// Euclidean distance from every pixel to the nearest `true` site
/// (infinite if there are none).
pub fn distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| grid[y * w + x]).collect();
        for (y, v) in edt_1d(&col).into_iter().enumerate() {
            grid[y * w + x] = v;
        }
    }
    for y in 0..h {
        let row = edt_1d(&grid[y * w..(y + 1) * w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid.into_iter().map(f64::sqrt).collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

fn hd95_binary(p: &[bool], g: &[bool], h: usize, w: usize) -> f64 {
    let bp = boundary(p, h, w);
    let bg = boundary(g, h, w);
    let dp = distance_transform(&bp, h, w);
    let dg = distance_transform(&bg, h, w);
    let mut d: Vec<f64> = (0..h * w).filter(|&i| bp[i]).map(|i| dg[i]).collect();
    d.extend((0..h * w).filter(|&i| bg[i]).map(|i| dp[i]));
    percentile(&d, 95.0).unwrap_or(0.0)
}

/// Per-class Dice and HD95 (95th percentile of the pooled boundary-to-boundary
/// distances in both directions). A class present in only one mask scores
/// Dice 0 and HD95 equal to the image diagonal.
pub fn dice_hd95(m: &MaskPair) -> Result<SegmentationMetrics> {
    m.validate()?;
    let (h, w) = (m.height, m.width);
    let diagonal = ((h * h + w * w) as f64).sqrt();
    let mut dice = Vec::with_capacity(m.num_classes);
    let mut hd = Vec::with_capacity(m.num_classes);
    for c in 0..m.num_classes {
        let p: Vec<bool> = m.pred.iter().map(|&l| l == c).collect();
        let g: Vec<bool> = m.gt.iter().map(|&l| l == c).collect();
        let np = p.iter().filter(|&&b| b).count();
        let ng = g.iter().filter(|&&b| b).count();
        match (np, ng) {
            (0, 0) => {
                dice.push(None);
                hd.push(None);
            }
            (0, _) | (_, 0) => {
                dice.push(Some(0.0));
                hd.push(Some(diagonal));
            }
            _ => {
                let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
                dice.push(Some(2.0 * inter as f64 / (np + ng) as f64));
                hd.push(Some(hd95_binary(&p, &g, h, w)));
            }
        }
    }
    let present = |v: &[Option<f64>]| mean(&v.iter().flatten().copied().collect::<Vec<_>>());
    Ok(SegmentationMetrics { mean_dice: present(&dice), mean_hd95: present(&hd), dice, hd95: hd })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(h: usize, w: usize, y0: usize, x0: usize, s: usize) -> Vec<usize> {
        (0..h * w).map(|i| usize::from((y0..y0 + s).contains(&(i / w)) && (x0..x0 + s).contains(&(i % w)))).collect()
    }

    /// Every boundary pixel against every boundary pixel of the other mask.
    pub(crate) fn hd95_oracle(p: &[bool], g: &[bool], h: usize, w: usize) -> f64 {
        let pts = |m: &[bool]| -> Vec<(f64, f64)> {
            boundary(m, h, w).iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| ((i / w) as f64, (i % w) as f64)).collect()
        };
        let (a, b) = (pts(p), pts(g));
        let nearest = |x: &(f64, f64), set: &[(f64, f64)]| {
            set.iter().map(|y| ((x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
        };
        let mut d: Vec<f64> = a.iter().map(|x| nearest(x, &b)).collect();
        d.extend(b.iter().map(|x| nearest(x, &a)));
        d.sort_by(f64::total_cmp);
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        d[lo] + (d[pos.ceil() as usize] - d[lo]) * (pos - lo as f64)
    }

    pub(crate) fn random_mask_fixture(rng: &mut ChaCha8Rng) -> MaskPair {
        let h = rng.random_range(1..=5);
        let w = rng.random_range(1..=20 / h);
        let c = rng.random_range(1..=3);
        let gt: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..c)).collect();
        let pred = gt.iter().map(|&l| if rng.random_bool(0.7) { l } else { rng.random_range(0..c) }).collect();
        MaskPair::new(h, w, c, pred, gt).unwrap()
    }

    #[test]
    fn identical_masks() {
        let g = square(12, 12, 1, 1, 10);
        let m = dice_hd95(&MaskPair::new(12, 12, 2, g.clone(), g).unwrap()).unwrap();
        assert_eq!((m.dice[1], m.hd95[1]), (Some(1.0), Some(0.0)));
    }

    #[test]
    fn disjoint_masks() {
        let a = square(10, 10, 0, 0, 3);
        let b = square(10, 10, 5, 5, 3);
        let m = dice_hd95(&MaskPair::new(10, 10, 2, a, b).unwrap()).unwrap();
        assert_eq!(m.dice[1], Some(0.0));
    }

    #[test]
    fn shifted_square() {
        let a = square(14, 14, 2, 2, 10);
        let b = square(14, 14, 2, 3, 10);
        let m = dice_hd95(&MaskPair::new(14, 14, 2, a, b).unwrap()).unwrap();
        assert!((m.dice[1].unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(m.hd95[1], Some(1.0));
    }

    #[test]
    fn class_missing_from_one_mask() {
        let a = square(6, 8, 0, 0, 2);
        let m = dice_hd95(&MaskPair::new(6, 8, 3, a, vec![0; 48]).unwrap()).unwrap();
        assert_eq!(m.dice[1], Some(0.0));
        assert_eq!(m.hd95[1], Some(10.0));
        assert_eq!(m.dice[2], None);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(MaskPair::new(2, 2, 2, vec![0; 4], vec![0; 3]), Err(Error::Shape { .. })));
        assert!(MaskPair::new(2, 2, 2, vec![0; 4], vec![2; 4]).is_err());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
            let sites: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.15)).collect();
            let d = distance_transform(&sites, h, w);
            for i in 0..h * w {
                let want = (0..h * w)
                    .filter(|&j| sites[j])
                    .map(|j| (((i / w) as f64 - (j / w) as f64).powi(2) + ((i % w) as f64 - (j % w) as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d[i], want);
            }
        }
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), Some(2.5));
        assert_eq!(percentile(&[0.0, 10.0], 95.0), Some(9.5));
        assert_eq!(percentile(&[], 95.0), None);
    }

    #[test]
    fn matches_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let m = random_mask_fixture(&mut rng);
            let got = dice_hd95(&m).unwrap();
            let swapped = dice_hd95(&MaskPair { pred: m.gt.clone(), gt: m.pred.clone(), ..m.clone() }).unwrap();
            assert_eq!(got, swapped);
            for c in 0..m.num_classes {
                let p: Vec<bool> = m.pred.iter().map(|&l| l == c).collect();
                let g: Vec<bool> = m.gt.iter().map(|&l| l == c).collect();
                if p.contains(&true) && g.contains(&true) {
                    assert_eq!(got.hd95[c].unwrap(), hd95_oracle(&p, &g, m.height, m.width));
                    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as f64;
                    let total = (p.iter().filter(|&&x| x).count() + g.iter().filter(|&&x| x).count()) as f64;
                    assert_eq!(got.dice[c].unwrap(), 2.0 * inter / total);
                }
            }
        }
    }
}
