use rand::Rng;

use crate::encoders::{FeatureKind, Teacher};
use crate::error::{shape_err, Result};
use crate::init::{trunc_normal, INIT_STD};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptorDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Parameter prefix of the adaptor that maps student features onto `teacher`'s `kind` feature.
pub fn adaptor_prefix(teacher: &str, kind: FeatureKind) -> String {
    format!("adaptor.{teacher}.{kind}")
}

pub fn init_adaptor<R: Rng + ?Sized>(prefix: &str, dims: AdaptorDims, rng: &mut R) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(format!("{prefix}.fc1.weight"), trunc_normal(rng, &[dims.input, dims.hidden], INIT_STD));
    s.insert(format!("{prefix}.fc1.bias"), Tensor::zeros(&[dims.hidden]));
    s.insert(format!("{prefix}.norm.gain"), Tensor::ones(&[dims.hidden]));
    s.insert(format!("{prefix}.norm.bias"), Tensor::zeros(&[dims.hidden]));
    s.insert(format!("{prefix}.fc2.weight"), trunc_normal(rng, &[dims.hidden, dims.output], INIT_STD));
    s.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(&[dims.output]));
    s
}

/// One adaptor per (teacher, feature kind) the teachers emit.
pub fn init_adaptors<R: Rng + ?Sized>(
    teachers: &[Teacher],
    student_dim: usize,
    hidden: usize,
    rng: &mut R,
) -> ParamStore {
    let mut s = ParamStore::new();
    for t in teachers {
        for &kind in t.feature_kinds() {
            let dims = AdaptorDims { input: student_dim, hidden, output: t.output_dim() };
            s.extend(init_adaptor(&adaptor_prefix(t.id(), kind), dims, rng));
        }
    }
    s
}

/// linear → LayerNorm → GELU → linear over the last axis of a `[rows, d_student]` input.
pub fn adaptor_forward(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w1 = p.get(&format!("{prefix}.fc1.weight"))?;
    let d_in = g.value(w1).shape()[0];
    if g.value(x).rank() != 2 || g.value(x).last_dim() != d_in {
        return Err(shape_err(
            "adaptor_forward",
            format!("input {:?} for adaptor `{prefix}` expecting last axis {d_in}", g.value(x).shape()),
        ));
    }
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, p.get(&format!("{prefix}.fc1.bias"))?)?;
    let h = g.layer_norm(h, p.get(&format!("{prefix}.norm.gain"))?, p.get(&format!("{prefix}.norm.bias"))?, 1e-5)?;
    let h = g.gelu(h);
    let y = g.matmul(h, p.get(&format!("{prefix}.fc2.weight"))?)?;
    g.add_row(y, p.get(&format!("{prefix}.fc2.bias"))?)
}
