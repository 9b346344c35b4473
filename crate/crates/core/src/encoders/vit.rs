//! Pre-norm vision transformer on the autodiff graph.

use rand::Rng;

use super::{patchify, FeatureBundle, ViTConfig};
use crate::error::{shape_err, Result};
use crate::init::{trunc_normal, INIT_STD};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

/// Fresh parameters for a ViT under `prefix`.
pub fn init_vit<R: Rng + ?Sized>(cfg: &ViTConfig, prefix: &str, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let mut s = ParamStore::new();
    let linear = |s: &mut ParamStore, name: String, fan_in: usize, fan_out: usize, rng: &mut R| {
        s.insert(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], INIT_STD));
        s.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    };
    let norm = |s: &mut ParamStore, name: String| {
        s.insert(format!("{name}.gain"), Tensor::ones(&[d]));
        s.insert(format!("{name}.bias"), Tensor::zeros(&[d]));
    };
    linear(&mut s, format!("{prefix}.patch_embed"), cfg.patch_dim(), d, rng);
    s.insert(format!("{prefix}.cls_token"), trunc_normal(rng, &[1, d], INIT_STD));
    s.insert(format!("{prefix}.pos_embed"), trunc_normal(rng, &[cfg.num_patches() + 1, d], INIT_STD));
    for b in 0..cfg.depth {
        let p = format!("{prefix}.blocks.{b}");
        norm(&mut s, format!("{p}.norm1"));
        linear(&mut s, format!("{p}.attn.qkv"), d, 3 * d, rng);
        linear(&mut s, format!("{p}.attn.proj"), d, d, rng);
        norm(&mut s, format!("{p}.norm2"));
        linear(&mut s, format!("{p}.mlp.fc1"), d, h, rng);
        linear(&mut s, format!("{p}.mlp.fc2"), h, d, rng);
    }
    norm(&mut s, format!("{prefix}.norm"));
    Ok(s)
}

pub(crate) fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn norm(g: &mut Graph, p: &Bound, name: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = p.get(&format!("{name}.gain"))?;
    let bias = p.get(&format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias, eps)
}

fn attention(g: &mut Graph, p: &Bound, name: &str, x: Var, cfg: &ViTConfig) -> Result<Var> {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let qkv = linear(g, p, &format!("{name}.qkv"), x)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.slice_cols(qkv, h * dh, (h + 1) * dh)?;
        let k = g.slice_cols(qkv, d + h * dh, d + (h + 1) * dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        heads.push(g.matmul(attn, v)?);
    }
    let merged = g.concat_cols(&heads)?;
    linear(g, p, &format!("{name}.proj"), merged)
}

/// Token features `[n_patches + 1, d]` (CLS first) after the final norm.
pub fn vit_forward(g: &mut Graph, p: &Bound, prefix: &str, cfg: &ViTConfig, image: &Tensor) -> Result<Var> {
    let expected = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if image.shape() != expected {
        return Err(shape_err("vit_forward", format!("image {:?} for config {:?}", image.shape(), expected)));
    }
    let patches = g.constant(patchify(image, cfg.patch_size)?);
    let emb = linear(g, p, &format!("{prefix}.patch_embed"), patches)?;
    let tokens = g.concat_rows(&[p.get(&format!("{prefix}.cls_token"))?, emb])?;
    let mut x = g.add(tokens, p.get(&format!("{prefix}.pos_embed"))?)?;
    for b in 0..cfg.depth {
        let name = format!("{prefix}.blocks.{b}");
        let h = norm(g, p, &format!("{name}.norm1"), x, cfg.ln_eps)?;
        let a = attention(g, p, &format!("{name}.attn"), h, cfg)?;
        x = g.add(x, a)?;
        let h = norm(g, p, &format!("{name}.norm2"), x, cfg.ln_eps)?;
        let h = linear(g, p, &format!("{name}.mlp.fc1"), h)?;
        let h = g.gelu(h);
        let h = linear(g, p, &format!("{name}.mlp.fc2"), h)?;
        x = g.add(x, h)?;
    }
    norm(g, p, &format!("{prefix}.norm"), x, cfg.ln_eps)
}

/// Runs the student on each image independently; returns CLS `[d]` and patch `[n, d]` features.
pub fn student_forward(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    cfg: &ViTConfig,
    images: &[Tensor],
) -> Result<Vec<FeatureBundle<Var>>> {
    cfg.validate()?;
    let n = cfg.num_patches();
    images
        .iter()
        .map(|img| {
            let tokens = vit_forward(g, p, prefix, cfg, img)?;
            let cls = g.slice_rows(tokens, 0, 1)?;
            let cls = g.reshape(cls, &[cfg.embed_dim])?;
            let patch = g.slice_rows(tokens, 1, n + 1)?;
            Ok(FeatureBundle::cls_patch(cls, patch))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(seed: u64, cfg: &ViTConfig, n: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| trunc_normal(&mut rng, &[cfg.in_channels, cfg.image_size, cfg.image_size], 0.5)).collect()
    }

    #[test]
    fn output_shapes_follow_config() {
        let cfg = ViTConfig::desk();
        let params = init_vit(&cfg, "student", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(params.num_scalars(), cfg.num_params());
        let mut g = Graph::new();
        let b = params.bind(&mut g, true);
        let out = student_forward(&mut g, &b, "student", &cfg, &images(1, &cfg, 2)).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(g.value(out[0].cls.unwrap()).shape(), &[32]);
        assert_eq!(g.value(out[0].patch.unwrap()).shape(), &[16, 32]);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = ViTConfig::desk();
        let params = init_vit(&cfg, "s", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let imgs = images(2, &cfg, 3);
        let run = |imgs: &[Tensor]| {
            let mut g = Graph::new();
            let b = params.bind(&mut g, false);
            let out = student_forward(&mut g, &b, "s", &cfg, imgs).unwrap();
            out.iter().map(|f| g.value(f.patch.unwrap()).clone()).collect::<Vec<_>>()
        };
        let fwd = run(&imgs);
        let rev = run(&[imgs[2].clone(), imgs[0].clone(), imgs[1].clone()]);
        assert_eq!(fwd[2], rev[0]);
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[2]);
    }

    #[test]
    fn depth_zero_is_normalized_embedding() {
        let cfg = ViTConfig { depth: 0, ..ViTConfig::desk() };
        let params = init_vit(&cfg, "s", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let img = images(4, &cfg, 1).pop().unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let out = student_forward(&mut g, &b, "s", &cfg, std::slice::from_ref(&img)).unwrap();
        let patch = g.value(out[0].patch.unwrap()).clone();

        // Independent recomputation with plain loops.
        let patches = patchify(&img, cfg.patch_size).unwrap();
        let w = params.get("s.patch_embed.weight").unwrap();
        let pos = params.get("s.pos_embed").unwrap();
        let d = cfg.embed_dim;
        for r in 0..cfg.num_patches() {
            let mut row = vec![0.0; d];
            for (j, out) in row.iter_mut().enumerate() {
                for k in 0..cfg.patch_dim() {
                    *out += patches.row(r)[k] * w.data()[k * d + j];
                }
                *out += pos.row(r + 1)[j];
            }
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                let expected = (row[j] - mean) / (var + cfg.ln_eps).sqrt();
                assert!((patch.row(r)[j] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vit_gradients_match_finite_differences() {
        let cfg = ViTConfig::grad_check();
        let params = init_vit(&cfg, "s", &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let imgs = images(9, &cfg, 1);
        let report = finite_diff_check(&params, 1e-5, |g, p| {
            let out = student_forward(g, p, "s", &cfg, &imgs)?;
            let t = g.constant(Tensor::full(&[cfg.num_patches(), cfg.embed_dim], 0.3));
            let l1 = g.smooth_l1(out[0].patch.unwrap(), t, 1.0)?;
            let c = g.sum(out[0].cls.unwrap());
            let c = g.mul(c, c)?;
            g.add(l1, c)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
