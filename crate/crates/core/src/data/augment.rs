use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipFlags {
    pub horizontal: bool,
    pub vertical: bool,
}

/// Which flips were applied to one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub horizontal: bool,
    pub vertical: bool,
}

/// Mirrors the last axis (width).
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let w = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Mirrors the second-to-last axis (height). Rank-1 tensors are returned unchanged.
pub fn flip_vertical(t: &Tensor) -> Tensor {
    if t.rank() < 2 {
        return t.clone();
    }
    let w = t.last_dim();
    let h = t.shape()[t.rank() - 2];
    let mut out = t.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
    out
}

pub fn apply_flips(t: &Tensor, rec: FlipRecord) -> Tensor {
    let t = if rec.horizontal { flip_horizontal(t) } else { t.clone() };
    if rec.vertical {
        flip_vertical(&t)
    } else {
        t
    }
}

/// Applies each enabled flip independently with probability 0.5.
///
/// Per image, one uniform draw is consumed per enabled flag (horizontal
/// first). The returned records let masks and other targets follow the same
/// flips via [`apply_flips`].
pub fn augment<R: Rng + ?Sized>(images: &[Tensor], flags: FlipFlags, rng: &mut R) -> (Vec<Tensor>, Vec<FlipRecord>) {
    let mut out = Vec::with_capacity(images.len());
    let mut recs = Vec::with_capacity(images.len());
    for img in images {
        let horizontal = flags.horizontal && rng.random::<f64>() < 0.5;
        let vertical = flags.vertical && rng.random::<f64>() < 0.5;
        let rec = FlipRecord { horizontal, vertical };
        out.push(apply_flips(img, rec));
        recs.push(rec);
    }
    (out, recs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Tensor {
        Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn flips_move_pixels() {
        let t = ramp();
        let h = flip_horizontal(&t);
        assert_eq!(&h.data()[..4], &[3.0, 2.0, 1.0, 0.0]);
        let v = flip_vertical(&t);
        assert_eq!(&v.data()[..4], &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(&v.data()[12..16], &[20.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn flips_are_involutions() {
        let t = ramp();
        assert_eq!(flip_horizontal(&flip_horizontal(&t)), t);
        assert_eq!(flip_vertical(&flip_vertical(&t)), t);
    }

    #[test]
    fn no_flags_is_identity_and_draws_nothing() {
        let imgs = vec![ramp(); 5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, recs) = augment(&imgs, FlipFlags::default(), &mut rng);
        assert_eq!(out, imgs);
        assert!(recs.iter().all(|r| *r == FlipRecord::default()));
        let mut fresh = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(rng.random::<u64>(), fresh.random::<u64>());
    }

    #[test]
    fn recorded_flips_replay_the_rng() {
        let imgs = vec![ramp(); 100];
        let flags = FlipFlags { horizontal: true, vertical: true };
        let (out, recs) = augment(&imgs, flags, &mut ChaCha8Rng::seed_from_u64(42));
        let mut replay = ChaCha8Rng::seed_from_u64(42);
        let mut flipped = 0;
        for (img, rec) in out.iter().zip(&recs) {
            let h = replay.random::<f64>() < 0.5;
            let v = replay.random::<f64>() < 0.5;
            assert_eq!((h, v), (rec.horizontal, rec.vertical));
            assert_eq!(*img, apply_flips(&ramp(), *rec));
            flipped += usize::from(h || v);
        }
        assert!(flipped > 50 && flipped < 100, "{flipped}");
    }

    #[test]
    fn masks_follow_image_flips() {
        let img = ramp();
        let mask = Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap();
        let rec = FlipRecord { horizontal: true, vertical: true };
        let fi = apply_flips(&img, rec);
        let fm = apply_flips(&mask, rec);
        // Channel 0 of the ramp equals the mask, so they must stay aligned.
        assert_eq!(&fi.data()[..12], fm.data());
        assert_eq!(fi.shape(), img.shape());
    }
}
