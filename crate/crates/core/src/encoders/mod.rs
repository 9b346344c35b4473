//! Student ViT and frozen teacher encoders.
//!
//! Every encoder emits a [`FeatureBundle`] per image: the student and the
//! vision teacher produce CLS and patch features, the vision-language teacher
//! produces a globally pooled vector.

mod teacher;
mod vit;

pub use teacher::{teacher_forward, teacher_forward_in, vl_feature_map, Teacher, TeacherKind, TeacherSpec};
pub use vit::{init_vit, student_forward, vit_forward};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_channels() -> usize {
    3
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ViTConfig {
    /// Desk-scale preset used throughout the tests.
    pub fn desk() -> Self {
        Self { image_size: 32, patch_size: 8, in_channels: 3, embed_dim: 32, depth: 2, heads: 4, mlp_ratio: 4.0, ln_eps: 1e-5 }
    }

    /// Smallest useful preset; keeps full gradient checks under 10⁴ parameters.
    pub fn grad_check() -> Self {
        Self { image_size: 8, patch_size: 4, in_channels: 3, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2.0, ln_eps: 1e-5 }
    }

    /// ViT-Base, 224 px, 16 px patches, 12 blocks.
    pub fn vit_base() -> Self {
        Self { image_size: 224, patch_size: 16, in_channels: 3, embed_dim: 768, depth: 12, heads: 12, mlp_ratio: 4.0, ln_eps: 1e-5 }
    }

    /// ViT-Base variant with 13 blocks.
    pub fn vit_base_13() -> Self {
        Self { depth: 13, ..Self::vit_base() }
    }

    /// ViT-Large, 1024-d embeddings, 24 blocks, 14 px patches.
    pub fn vit_large() -> Self {
        Self { image_size: 224, patch_size: 14, in_channels: 3, embed_dim: 1024, depth: 24, heads: 16, mlp_ratio: 4.0, ln_eps: 1e-5 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "grad-check" => Ok(Self::grad_check()),
            "vit-base" => Ok(Self::vit_base()),
            "vit-base-13" => Ok(Self::vit_base_13()),
            "vit-large" => Ok(Self::vit_large()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads)));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn num_params(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
        self.patch_dim() * d + d + d + (self.num_patches() + 1) * d + self.depth * block + 2 * d
    }
}

/// Output features of one encoder for one image.
///
/// `cls` and `pooled` are `[d]`; `patch` is `[n_patches, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T = Tensor> {
    pub cls: Option<T>,
    pub patch: Option<T>,
    pub pooled: Option<T>,
}

impl<T> FeatureBundle<T> {
    pub fn cls_patch(cls: T, patch: T) -> Self {
        Self { cls: Some(cls), patch: Some(patch), pooled: None }
    }

    pub fn pooled(pooled: T) -> Self {
        Self { cls: None, patch: None, pooled: Some(pooled) }
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_none() && self.patch.is_none() && self.pooled.is_none()
    }

    pub fn get(&self, kind: FeatureKind) -> Option<&T> {
        match kind {
            FeatureKind::Cls => self.cls.as_ref(),
            FeatureKind::Patch => self.patch.as_ref(),
            FeatureKind::Pooled => self.pooled.as_ref(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Cls,
    Patch,
    Pooled,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Cls => "cls",
            FeatureKind::Patch => "patch",
            FeatureKind::Pooled => "pooled",
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Splits a `[c, H, W]` image into non-overlapping `p×p` patches, row-major
/// over the patch grid, each flattened channel-first to `c·p²` values.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let [c, h, w] = image.shape() else {
        return Err(shape_err("patchify", format!("expected [c, H, W], got {:?}", image.shape())));
    };
    let (c, h, w, p) = (*c, *h, *w, patch_size);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err("patchify", format!("{h}x{w} image not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + py * p + dy) * w + px * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::matrix(gh * gw, c * p * p, out)
}
