use libm::erf;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Norm floor used by the cosine term so zero vectors do not divide by zero.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    Mean { x: Var, axis: usize },
    Sum(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Cosine { a: Var, b: Var },
    SmoothL1 { a: Var, b: Var, delta: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the node
/// list itself is the record that [`Graph::backward`] replays in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    contributions: Vec<u32>,
    leaf_tracked: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`. Tracked leaves the loss does not depend on
    /// get zeros; untracked nodes get `None`.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        match &self.grads[v.0] {
            Some(g) => Some(g.clone()),
            None if self.leaf_tracked[v.0] => Some(Tensor::zeros(&self.shapes[v.0])),
            None => None,
        }
    }

    /// Number of additive contributions accumulated into `v`.
    pub fn contributions(&self, v: Var) -> u32 {
        self.contributions[v.0]
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * phi(x)
}

fn gelu_grad(x: f64) -> f64 {
    phi(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn smooth_l1(x: f64, delta: f64) -> (f64, f64) {
    if x.abs() < delta {
        (0.5 * x * x / delta, x / delta)
    } else {
        (x.abs() - 0.5 * delta, x.signum())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. `tracked` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a `[d]` vector to every row of `x[…, d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(row).shape() != [d] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(row).shape()),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(d) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(x))?;
        let t = Tensor::matrix(n, m, transpose_raw(self.value(x).data(), m, n))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Per-row standardization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(Error::EmptyAxis("layer_norm"));
        }
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.value(p).shape() != [d] {
                return Err(shape_err(
                    "layer_norm",
                    format!("{name} {:?} for last axis {d}", self.value(p).shape()),
                ));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_scalar);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / s));
        }
        debug_assert_eq!(out.len() % d, 0);
        let t = Tensor::new(xv.shape().to_vec(), out).expect("softmax preserves shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Arithmetic mean along `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Axis { axis, rank: xv.rank() });
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let data = xv.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut shape: Vec<usize> = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Mean { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        if refs.iter().any(|t| t.rank() != 2) {
            return Err(shape_err("concat_rows", "inputs must be matrices"));
        }
        let t = Tensor::concat_rows(&refs)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice_rows", self.value(x))?;
        if start >= end || end > m {
            return Err(shape_err("slice_rows", format!("rows {start}..{end} of {m}")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let t = Tensor::matrix(end - start, n, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let mut dims = Vec::with_capacity(xs.len());
        for &v in xs {
            dims.push(matrix_dims("concat_cols", self.value(v))?);
        }
        let m = dims.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?.0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(shape_err("concat_cols", "mismatched row counts"));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&v, &(_, n)) in xs.iter().zip(&dims) {
                out.extend_from_slice(&self.value(v).data()[i * n..(i + 1) * n]);
            }
        }
        let t = Tensor::matrix(m, total, out)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice_cols", self.value(x))?;
        if start >= end || end > n {
            return Err(shape_err("slice_cols", format!("cols {start}..{end} of {n}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let t = Tensor::matrix(m, w, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Mean over rows of `1 − cos(a_i, b_i)`, norms floored at [`COSINE_NORM_FLOOR`].
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("cosine_distance", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.rows();
        let mut total = 0.0;
        for r in 0..rows {
            let (x, y) = (av.row(r), bv.row(r));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_NORM_FLOOR);
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_NORM_FLOOR);
            total += 1.0 - (dot / (nx * ny)).clamp(-1.0, 1.0);
        }
        let t = Tensor::scalar(total / rows as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Cosine { a, b }, rg))
    }

    /// Mean over elements of the smooth-L1 (Huber form) loss with transition `delta`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(Error::Contract(format!("smooth-L1 delta must be positive, got {delta}")));
        }
        same_shape("smooth_l1", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let total: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| smooth_l1(x - y, delta).0).sum();
        let t = Tensor::scalar(total / av.numel() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::SmoothL1 { a, b, delta }, rg))
    }

    /// Mean softmax cross-entropy of `logits[n, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = matrix_dims("cross_entropy", self.value(logits))?;
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(shape_err("cross_entropy", format!("{} labels for [{n}, {c}] logits", labels.len())));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let t = Tensor::scalar(total / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec() }, rg))
    }

    /// Mean binary cross-entropy with logits over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        same_shape("bce_with_logits", self.value(logits), targets)?;
        let lv = self.value(logits);
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let t = Tensor::scalar(total / lv.numel() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(t, Op::BceWithLogits { logits, targets: targets.data().to_vec() }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut contributions = vec![0u32; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, g: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                contributions[v.0] += 1;
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                            *e += x;
                        }
                    }
                    slot => *slot = Some(g),
                }
            };
            let dyd = dy.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let nn = bv.shape()[1];
                    if self.requires_grad(*a) {
                        let bt = transpose_raw(bv.data(), k, nn);
                        acc(*a, Tensor::matrix(m, k, matmul_raw(dyd, &bt, m, nn, k))?, &mut grads);
                    }
                    if self.requires_grad(*b) {
                        let at = transpose_raw(av.data(), m, k);
                        acc(*b, Tensor::matrix(k, nn, matmul_raw(&at, dyd, k, m, nn))?, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone(), &mut grads);
                    acc(*b, dy.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, dy.clone(), &mut grads);
                    acc(*b, dy.map(|v| -v), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = dyd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = dyd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    acc(*a, Tensor::new(av.shape().to_vec(), ga)?, &mut grads);
                    acc(*b, Tensor::new(bv.shape().to_vec(), gb)?, &mut grads);
                }
                Op::AddRow(x, row) => {
                    let d = dy.last_dim();
                    let mut gr = vec![0.0; d];
                    for chunk in dyd.chunks(d) {
                        for (s, v) in gr.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    acc(*x, dy.clone(), &mut grads);
                    acc(*row, Tensor::vector(gr)?, &mut grads);
                }
                Op::Scale(x, c) => acc(*x, dy.map(|v| v * c), &mut grads),
                Op::Transpose(x) => {
                    let (m, nn) = (dy.shape()[0], dy.shape()[1]);
                    acc(*x, Tensor::matrix(nn, m, transpose_raw(dyd, m, nn))?, &mut grads);
                }
                Op::Reshape(x) => acc(*x, dy.reshape(self.value(*x).shape())?, &mut grads),
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = dy.last_dim();
                    let g = self.value(*gain).data();
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; dyd.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let dyr = &dyd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dgain[j] += dyr[j] * hr[j];
                            dbias[j] += dyr[j];
                            let dh = dyr[j] * g[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = dyr[j] * g[j];
                            dx[r * d + j] = is / d as f64 * (d as f64 * dh - s1 - hr[j] * s2);
                        }
                    }
                    acc(*x, Tensor::new(dy.shape().to_vec(), dx)?, &mut grads);
                    acc(*gain, Tensor::vector(dgain)?, &mut grads);
                    acc(*bias, Tensor::vector(dbias)?, &mut grads);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let gx: Vec<f64> = dyd.iter().zip(xv.data()).map(|(g, &v)| g * gelu_grad(v)).collect();
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx)?, &mut grads);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut gx = vec![0.0; dyd.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &dyd[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), gx)?, &mut grads);
                }
                Op::Mean { x, axis } => {
                    let xv = self.value(*x);
                    let (outer, nn, inner) = axis_split(xv.shape(), *axis);
                    let mut gx = vec![0.0; xv.numel()];
                    for o in 0..outer {
                        for k in 0..nn {
                            for i in 0..inner {
                                gx[(o * nn + k) * inner + i] = dyd[o * inner + i] / nn as f64;
                            }
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx)?, &mut grads);
                }
                Op::Sum(x) => {
                    acc(*x, Tensor::full(self.value(*x).shape(), dyd[0]), &mut grads);
                }
                Op::ConcatRows(xs) => {
                    let mut offset = 0;
                    for &v in xs {
                        let len = self.value(v).numel();
                        let part = Tensor::new(self.value(v).shape().to_vec(), dyd[offset..offset + len].to_vec())?;
                        offset += len;
                        acc(v, part, &mut grads);
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let nn = xv.shape()[1];
                    let mut gx = vec![0.0; xv.numel()];
                    gx[start * nn..start * nn + dyd.len()].copy_from_slice(dyd);
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx)?, &mut grads);
                }
                Op::ConcatCols(xs) => {
                    let m = dy.shape()[0];
                    let total = dy.shape()[1];
                    let mut offset = 0;
                    for &v in xs {
                        let w = self.value(v).shape()[1];
                        let mut part = Vec::with_capacity(m * w);
                        for i in 0..m {
                            part.extend_from_slice(&dyd[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        acc(v, Tensor::matrix(m, w, part)?, &mut grads);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let (m, nn) = (xv.shape()[0], xv.shape()[1]);
                    let w = dy.shape()[1];
                    let mut gx = vec![0.0; m * nn];
                    for i in 0..m {
                        gx[i * nn + start..i * nn + start + w].copy_from_slice(&dyd[i * w..(i + 1) * w]);
                    }
                    acc(*x, Tensor::matrix(m, nn, gx)?, &mut grads);
                }
                Op::Cosine { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let d = av.last_dim();
                    let rows = av.rows();
                    let scale = dyd[0] / rows as f64;
                    let mut ga = vec![0.0; av.numel()];
                    let mut gb = vec![0.0; bv.numel()];
                    for r in 0..rows {
                        let (x, y) = (av.row(r), bv.row(r));
                        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (cx, cy) = (nx.max(COSINE_NORM_FLOOR), ny.max(COSINE_NORM_FLOOR));
                        let cos = dot / (cx * cy);
                        for j in 0..d {
                            let mut dcx = y[j] / (cx * cy);
                            if nx > COSINE_NORM_FLOOR {
                                dcx -= cos * x[j] / (nx * nx);
                            }
                            let mut dcy = x[j] / (cx * cy);
                            if ny > COSINE_NORM_FLOOR {
                                dcy -= cos * y[j] / (ny * ny);
                            }
                            ga[r * d + j] = -scale * dcx;
                            gb[r * d + j] = -scale * dcy;
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), ga)?, &mut grads);
                    acc(*b, Tensor::new(bv.shape().to_vec(), gb)?, &mut grads);
                }
                Op::SmoothL1 { a, b, delta } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let scale = dyd[0] / av.numel() as f64;
                    let ga: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| scale * smooth_l1(x - y, *delta).1)
                        .collect();
                    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                    acc(*a, Tensor::new(av.shape().to_vec(), ga)?, &mut grads);
                    acc(*b, Tensor::new(bv.shape().to_vec(), gb)?, &mut grads);
                }
                Op::CrossEntropy { logits, labels } => {
                    let lv = self.value(*logits);
                    let c = lv.last_dim();
                    let scale = dyd[0] / labels.len() as f64;
                    let mut g = vec![0.0; lv.numel()];
                    for (r, &y) in labels.iter().enumerate() {
                        let row = lv.row(r);
                        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - m).exp() / s;
                            g[r * c + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    acc(*logits, Tensor::new(lv.shape().to_vec(), g)?, &mut grads);
                }
                Op::BceWithLogits { logits, targets } => {
                    let lv = self.value(*logits);
                    let scale = dyd[0] / lv.numel() as f64;
                    let g: Vec<f64> = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| scale * (1.0 / (1.0 + (-z).exp()) - y))
                        .collect();
                    acc(*logits, Tensor::new(lv.shape().to_vec(), g)?, &mut grads);
                }
            }
            grads[i] = Some(dy);
        }

        let leaf_tracked = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, contributions, leaf_tracked, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use crate::tensor::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let i = g.constant(Tensor::eye(4));
        let z = g.constant(Tensor::zeros(&[4, 2]));
        let ai = g.matmul(av, i).unwrap();
        let az = g.matmul(av, z).unwrap();
        assert_eq!(g.value(ai), &a);
        assert!(g.value(az).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[3, 2]);
        let mut expected = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    expected[i * 2 + j] += a.data()[i * 3 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let c = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(c).data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    fn ln(g: &mut Graph, x: Tensor, gain: f64, bias: f64) -> Tensor {
        let d = x.last_dim();
        let xv = g.constant(x);
        let gv = g.constant(Tensor::full(&[d], gain));
        let bv = g.constant(Tensor::full(&[d], bias));
        let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let y = ln(&mut g, Tensor::full(&[2, 4], 3.0), 1.0, 0.0);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = ln(&mut g, Tensor::vector(vec![1.0, 5.0, -2.0]).unwrap(), 0.0, 0.7);
        assert!(y.data().iter().all(|&v| v == 0.7));
        // Row [1, 2, 3]: mean 2, population variance 2/3.
        let y = ln(&mut g, Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), 1.0, 0.0);
        let s = (2.0f64 / 3.0 + 1e-5).sqrt();
        for (v, e) in y.data().iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((v - e).abs() < 1e-14, "{v} vs {e}");
        }
    }

    #[test]
    fn layer_norm_rejects_bad_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 3]));
        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::ones(&[3]));
        assert!(g.layer_norm(x, gain, bias, 1e-5).is_err());
        let gain = g.constant(Tensor::ones(&[3]));
        assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let y = ln(&mut g, rand_tensor(&mut rng, &[5, 16]), 1.0, 0.0);
        for r in 0..5 {
            let row = y.row(r);
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3, "variance {v}");
        }
    }

    /// erf by its Maclaurin series, adequate for |x| ≤ 3.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..80 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 10.0, 1.0, -0.5]).unwrap());
        let y = g.gelu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        assert!((v[2] - 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()))).abs() < 1e-14);
        assert!((v[3] + 0.25 * (1.0 + erf_series(-0.5 / 2f64.sqrt()))).abs() < 1e-14);
    }

    #[test]
    fn reduce_mean_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.reduce_mean(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[2.5]);
        let c = g.constant(Tensor::full(&[3, 2], 7.0));
        let m = g.reduce_mean(c, 0).unwrap();
        assert_eq!(g.value(m).data(), &[7.0, 7.0]);
        let one = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        let m = g.reduce_mean(one, 0).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, -2.0, 3.0]);
        assert!(matches!(g.reduce_mean(one, 2), Err(Error::Axis { axis: 2, rank: 2 })));
    }

    #[test]
    fn backward_basic_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0]);
        assert_eq!(grads.contributions(x), 2);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0]).unwrap());
        let c = g.param(Tensor::vector(vec![3.0]).unwrap());
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.contributions(x), 0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_leaves_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let c = g.constant(Tensor::ones(&[2]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(c).is_none());
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::new();
            let a = g.constant(rand_tensor(&mut rng, &[4, 6]));
            let b = g.constant(rand_tensor(&mut rng, &[6, 3]));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax(c);
            let y = g.gelu(s);
            g.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    /// Every differentiable primitive against central differences.
    #[test]
    fn primitives_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.insert("a", rand_tensor(&mut rng, &[3, 4]));
        store.insert("b", rand_tensor(&mut rng, &[4, 3]));
        store.insert("c", rand_tensor(&mut rng, &[3, 4]));
        store.insert("gain", rand_tensor(&mut rng, &[4]));
        store.insert("bias", rand_tensor(&mut rng, &[4]));
        let target = rand_tensor(&mut rng, &[3, 4]);
        let multi = Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 0.0], vec![0.0; 4], vec![1.0; 4]]).unwrap();
        let report = finite_diff_check(&store, 1e-5, |g, p| {
            let (a, b, c) = (p.get("a")?, p.get("b")?, p.get("c")?);
            let ab = g.matmul(a, b)?;
            let sm = g.softmax(ab);
            let ac = g.mul(a, c)?;
            let ln = g.layer_norm(ac, p.get("gain")?, p.get("bias")?, 1e-5)?;
            let ge = g.gelu(ln);
            let t = g.constant(target.clone());
            let cosv = g.cosine_distance(ge, t)?;
            let sl = g.smooth_l1(ge, t, 0.5)?;
            let tr = g.transpose(b)?;
            let sub = g.sub(tr, c)?;
            let rows = g.slice_rows(sub, 1, 3)?;
            let cols = g.slice_cols(sub, 0, 2)?;
            let cat = g.concat_cols(&[cols, sub])?;
            let stacked = g.concat_rows(&[rows, a])?;
            let mean = g.reduce_mean(stacked, 1)?;
            let mean_s = g.sum(mean);
            let shaped = g.reshape(cat, &[18])?;
            let bias = g.add_row(ln, p.get("bias")?)?;
            let ce = g.cross_entropy(bias, &[0, 3, 1])?;
            let bce = g.bce_with_logits(ac, &multi)?;
            let sq = g.mul(shaped, shaped)?;
            let sqs = g.sum(sq);
            let sqs = g.scale(sqs, 0.1);
            let sms = g.sum(sm);
            let mut total = g.add(cosv, sl)?;
            for v in [mean_s, ce, bce, sqs, sms] {
                total = g.add(total, v)?;
            }
            Ok(total)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
