//! Frozen teachers, initialized deterministically from a seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vit::{init_vit, linear, vit_forward};
use super::{patchify, FeatureBundle, ViTConfig};
use crate::error::{Error, Result};
use crate::init::{trunc_normal, INIT_STD};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TeacherKind {
    /// Emits CLS and patch features.
    Vision,
    /// Emits one globally average-pooled vector.
    VisionLanguage,
}

impl TeacherKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(Self::Vision),
            "vision-language" => Ok(Self::VisionLanguage),
            other => Err(Error::Config(format!("unknown teacher kind `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vision => "vision",
            Self::VisionLanguage => "vision-language",
        }
    }
}

impl TryFrom<String> for TeacherKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<TeacherKind> for String {
    fn from(k: TeacherKind) -> String {
        k.as_str().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub id: String,
    pub kind: TeacherKind,
    pub output_dim: usize,
    pub seed: u64,
    pub patch_size: usize,
    /// Transformer blocks (vision teachers).
    #[serde(default)]
    pub depth: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default = "four")]
    pub mlp_ratio: f64,
    /// Width of the convolutional stem (vision-language teachers).
    #[serde(default)]
    pub hidden_dim: usize,
}

fn one() -> usize {
    1
}

fn four() -> f64 {
    4.0
}

impl TeacherSpec {
    pub fn desk_vision() -> Self {
        Self { id: "vision".into(), kind: TeacherKind::Vision, output_dim: 48, seed: 11, patch_size: 8, depth: 2, heads: 4, mlp_ratio: 4.0, hidden_dim: 0 }
    }

    pub fn desk_vision_language() -> Self {
        Self { id: "vision-language".into(), kind: TeacherKind::VisionLanguage, output_dim: 24, seed: 12, patch_size: 8, depth: 0, heads: 1, mlp_ratio: 4.0, hidden_dim: 64 }
    }

    pub fn grad_check_vision() -> Self {
        Self { output_dim: 12, patch_size: 4, depth: 1, heads: 2, mlp_ratio: 2.0, ..Self::desk_vision() }
    }

    pub fn grad_check_vision_language() -> Self {
        Self { output_dim: 6, patch_size: 4, hidden_dim: 8, ..Self::desk_vision_language() }
    }

    /// ViT-Large vision teacher at full scale.
    pub fn vision_large() -> Self {
        Self { output_dim: 1024, patch_size: 14, depth: 24, heads: 16, ..Self::desk_vision() }
    }

    /// Vision-language teacher with a ResNet50-width pooled output.
    pub fn vision_language_full() -> Self {
        Self { output_dim: 2048, patch_size: 32, hidden_dim: 1024, ..Self::desk_vision_language() }
    }

    fn vit_config(&self, image_size: usize, in_channels: usize) -> ViTConfig {
        ViTConfig {
            image_size,
            patch_size: self.patch_size,
            in_channels,
            embed_dim: self.output_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            ln_eps: 1e-5,
        }
    }
}

/// A teacher with its frozen parameters.
#[derive(Clone, Debug)]
pub struct Teacher {
    spec: TeacherSpec,
    image_size: usize,
    in_channels: usize,
    params: ParamStore,
}

impl Teacher {
    pub fn new(spec: TeacherSpec, image_size: usize, in_channels: usize) -> Result<Self> {
        // Ids become parameter-name segments.
        if spec.id.is_empty() || spec.id.contains(|c: char| c == '.' || c == '/' || c.is_whitespace()) {
            return Err(Error::Config(format!("teacher id `{}` must be non-empty without '.', '/' or spaces", spec.id)));
        }
        if spec.output_dim == 0 {
            return Err(Error::Config(format!("teacher `{}` output_dim must be positive", spec.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = match spec.kind {
            TeacherKind::Vision => init_vit(&spec.vit_config(image_size, in_channels), "teacher", &mut rng)?,
            TeacherKind::VisionLanguage => {
                if spec.hidden_dim == 0 || spec.patch_size == 0 || !image_size.is_multiple_of(spec.patch_size) {
                    return Err(Error::Config(format!(
                        "teacher `{}` needs a positive hidden_dim and a patch size dividing {image_size}",
                        spec.id
                    )));
                }
                let patch_dim = in_channels * spec.patch_size * spec.patch_size;
                let mut s = ParamStore::new();
                s.insert("teacher.stem.weight", trunc_normal(&mut rng, &[patch_dim, spec.hidden_dim], INIT_STD));
                s.insert("teacher.stem.bias", Tensor::zeros(&[spec.hidden_dim]));
                s.insert("teacher.head.weight", trunc_normal(&mut rng, &[spec.hidden_dim, spec.output_dim], INIT_STD));
                s.insert("teacher.head.bias", Tensor::zeros(&[spec.output_dim]));
                s
            }
        };
        Ok(Self { spec, image_size, in_channels, params })
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn kind(&self) -> TeacherKind {
        self.spec.kind
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Feature kinds this teacher produces.
    pub fn feature_kinds(&self) -> &'static [super::FeatureKind] {
        use super::FeatureKind::*;
        match self.spec.kind {
            TeacherKind::Vision => &[Cls, Patch],
            TeacherKind::VisionLanguage => &[Pooled],
        }
    }
}

fn vl_map_in(g: &mut Graph, p: &Bound, teacher: &Teacher, image: &Tensor) -> Result<Var> {
    let patches = g.constant(patchify(image, teacher.spec.patch_size)?);
    let h = linear(g, p, "teacher.stem", patches)?;
    let h = g.gelu(h);
    linear(g, p, "teacher.head", h)
}

/// Teacher features recorded on an existing graph with untracked parameters.
pub fn teacher_forward_in(g: &mut Graph, teacher: &Teacher, images: &[Tensor]) -> Result<Vec<FeatureBundle<Var>>> {
    let p = teacher.params.bind(g, false);
    images
        .iter()
        .map(|img| match teacher.spec.kind {
            TeacherKind::Vision => {
                let cfg = teacher.spec.vit_config(teacher.image_size, teacher.in_channels);
                let tokens = vit_forward(g, &p, "teacher", &cfg, img)?;
                let cls = g.slice_rows(tokens, 0, 1)?;
                let cls = g.reshape(cls, &[cfg.embed_dim])?;
                let patch = g.slice_rows(tokens, 1, cfg.num_patches() + 1)?;
                Ok(FeatureBundle::cls_patch(cls, patch))
            }
            TeacherKind::VisionLanguage => {
                let map = vl_map_in(g, &p, teacher, img)?;
                Ok(FeatureBundle::pooled(g.reduce_mean(map, 0)?))
            }
        })
        .collect()
}

/// Frozen teacher features as plain tensors.
pub fn teacher_forward(teacher: &Teacher, images: &[Tensor]) -> Result<Vec<FeatureBundle>> {
    let mut g = Graph::new();
    let out = teacher_forward_in(&mut g, teacher, images)?;
    Ok(out
        .into_iter()
        .map(|b| FeatureBundle {
            cls: b.cls.map(|v| g.value(v).clone()),
            patch: b.patch.map(|v| g.value(v).clone()),
            pooled: b.pooled.map(|v| g.value(v).clone()),
        })
        .collect())
}

/// Pre-pool spatial feature map `[n_patches, d]` of a vision-language teacher.
pub fn vl_feature_map(teacher: &Teacher, image: &Tensor) -> Result<Tensor> {
    if teacher.kind() != TeacherKind::VisionLanguage {
        return Err(Error::Config(format!("teacher `{}` has no pooled feature map", teacher.id())));
    }
    let mut g = Graph::new();
    let p = teacher.params.bind(&mut g, false);
    let map = vl_map_in(&mut g, &p, teacher, image)?;
    Ok(g.value(map).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::FeatureKind;
    use rand::SeedableRng;

    fn imgs(n: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        (0..n).map(|_| trunc_normal(&mut rng, &[3, 32, 32], 0.5)).collect()
    }

    #[test]
    fn frozen_teachers_are_deterministic() {
        for spec in [TeacherSpec::desk_vision(), TeacherSpec::desk_vision_language()] {
            let a = Teacher::new(spec.clone(), 32, 3).unwrap();
            let b = Teacher::new(spec, 32, 3).unwrap();
            let x = imgs(2);
            assert_eq!(teacher_forward(&a, &x).unwrap(), teacher_forward(&b, &x).unwrap());
            assert_eq!(teacher_forward(&a, &x).unwrap(), teacher_forward(&a, &x).unwrap());
        }
    }

    #[test]
    fn bundle_shapes_follow_kind() {
        let v = Teacher::new(TeacherSpec::desk_vision(), 32, 3).unwrap();
        let out = teacher_forward(&v, &imgs(1)).unwrap();
        assert_eq!(out[0].cls.as_ref().unwrap().shape(), &[48]);
        assert_eq!(out[0].patch.as_ref().unwrap().shape(), &[16, 48]);
        assert!(out[0].pooled.is_none());
        assert_eq!(v.feature_kinds(), &[FeatureKind::Cls, FeatureKind::Patch]);

        let vl = Teacher::new(TeacherSpec::desk_vision_language(), 32, 3).unwrap();
        let out = teacher_forward(&vl, &imgs(1)).unwrap();
        assert_eq!(out[0].pooled.as_ref().unwrap().shape(), &[24]);
        assert!(out[0].cls.is_none() && out[0].patch.is_none());
    }

    #[test]
    fn pooled_output_is_spatial_mean_of_feature_map() {
        let vl = Teacher::new(TeacherSpec::desk_vision_language(), 32, 3).unwrap();
        let x = imgs(1);
        let pooled = teacher_forward(&vl, &x).unwrap()[0].pooled.clone().unwrap();
        let map = vl_feature_map(&vl, &x[0]).unwrap();
        for j in 0..map.last_dim() {
            let mean = (0..map.rows()).map(|r| map.row(r)[j]).sum::<f64>() / map.rows() as f64;
            assert!((pooled.data()[j] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn teacher_parameters_get_no_gradient() {
        let v = Teacher::new(TeacherSpec::desk_vision(), 32, 3).unwrap();
        let mut g = Graph::new();
        let student = g.param(Tensor::ones(&[48]));
        let out = teacher_forward_in(&mut g, &v, &imgs(1)).unwrap();
        let prod = g.mul(student, out[0].cls.unwrap()).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(out[0].cls.unwrap()).is_none());
        assert!(grads.wrt(student).is_some());
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        assert!(matches!(TeacherKind::parse("audio"), Err(Error::Config(_))));
        let json = serde_json::json!({"id": "x", "kind": "audio", "output_dim": 4, "seed": 1, "patch_size": 4});
        assert!(serde_json::from_value::<TeacherSpec>(json).is_err());
    }
}
