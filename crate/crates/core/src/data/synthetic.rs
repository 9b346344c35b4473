use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FrameManifest, FrameRecord};
use crate::error::{Error, Result};
use crate::init::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub image_size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    pub num_classes: usize,
    /// Only `"blobs"` is known.
    #[serde(default = "blobs")]
    pub recipe: String,
    #[serde(default = "noise")]
    pub noise_std: f64,
    /// Frames grouped into one pseudo-video.
    #[serde(default = "frames_per_video")]
    pub frames_per_video: usize,
}

fn three() -> usize {
    3
}
fn blobs() -> String {
    "blobs".into()
}
fn noise() -> f64 {
    0.1
}
fn frames_per_video() -> usize {
    8
}

impl SyntheticSpec {
    pub fn desk(seed: u64, num_classes: usize) -> Self {
        Self {
            seed,
            image_size: 32,
            channels: 3,
            num_classes,
            recipe: blobs(),
            noise_std: noise(),
            frames_per_video: frames_per_video(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recipe != "blobs" {
            return Err(Error::Config(format!("unknown synthetic recipe `{}`", self.recipe)));
        }
        if self.image_size < 4 || self.channels == 0 || self.num_classes == 0 || self.frames_per_video == 0 {
            return Err(Error::Config("synthetic spec needs image_size >= 4 and positive counts".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Blob colour of a class, one value per channel in [0.05, 0.95].
    pub fn class_color(&self, class: usize) -> Vec<f64> {
        let phase = class as f64 / self.num_classes as f64;
        (0..self.channels)
            .map(|ch| 0.5 + 0.45 * (std::f64::consts::TAU * (phase + ch as f64 / self.channels as f64)).cos())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub manifest: FrameManifest,
}

/// Class-conditioned coloured blobs on a grey, noisy background.
///
/// Image `i` belongs to class `i mod C`; its colour identifies the class, the
/// blob centre and radius are random. Frames are grouped into pseudo-videos of
/// `frames_per_video` consecutive images, one second apart.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<SyntheticDataset> {
    spec.validate()?;
    let s = spec.image_size;
    let normal = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_for(spec.seed, "synthetic", i as u64);
        let class = i % spec.num_classes;
        let color = spec.class_color(class);
        let radius = rng.random_range(s as f64 * 0.2..s as f64 * 0.35);
        let cy = rng.random_range(radius..s as f64 - radius);
        let cx = rng.random_range(radius..s as f64 - radius);
        let mut data = vec![0.0; spec.channels * s * s];
        for (ch, &c) in color.iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let inside = dy * dy + dx * dx <= radius * radius;
                    let base = if inside { c } else { 0.5 };
                    let eps = if spec.noise_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    data[(ch * s + y) * s + x] = (base + eps).clamp(0.0, 1.0);
                }
            }
        }
        images.push(Tensor::new(vec![spec.channels, s, s], data)?);
        labels.push(class);
        let video = i / spec.frames_per_video;
        let mut rec = FrameRecord::new(
            format!("video{video:03}"),
            (i % spec.frames_per_video) as f64,
            format!("frames/{i:05}.bin"),
        );
        rec.phase = Some(class);
        records.push(rec);
    }
    Ok(SyntheticDataset { images, labels, manifest: FrameManifest::new(records)? })
}

impl SyntheticDataset {
    /// Writes `manifest.csv` plus one tensor file per frame under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("frames"))?;
        for (img, rec) in self.images.iter().zip(self.manifest.records()) {
            std::fs::write(dir.join(&rec.frame_path), img.to_bytes())?;
        }
        self.manifest.save(&dir.join("manifest.csv"))
    }

    /// Reads a dataset written by [`SyntheticDataset::write`]; labels come from the phase column.
    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = FrameManifest::load(&dir.join("manifest.csv"))?;
        let mut images = Vec::with_capacity(manifest.len());
        let mut labels = Vec::with_capacity(manifest.len());
        for rec in manifest.records() {
            images.push(Tensor::from_bytes(&std::fs::read(dir.join(&rec.frame_path))?)?);
            labels.push(rec.phase.ok_or_else(|| Error::Data(format!("frame `{}` has no phase label", rec.frame_path)))?);
        }
        Ok(Self { images, labels, manifest })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
