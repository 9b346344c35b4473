//! Central-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_group: String,
    pub coordinates: usize,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    /// Per-coordinate `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`, maximized.
    pub fn compare(analytic: &ParamStore, numeric: &ParamStore) -> Result<Self> {
        let mut groups = Vec::new();
        for (name, fd) in numeric.iter() {
            let ad = analytic.get(name)?;
            if ad.shape() != fd.shape() {
                return Err(Error::Contract(format!("gradient shape mismatch for `{name}`")));
            }
            let max_rel_error = ad
                .data()
                .iter()
                .zip(fd.data())
                .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
                .fold(0.0, f64::max);
            groups.push(GroupError { name: name.clone(), max_rel_error, coordinates: fd.numel() });
        }
        let worst = groups.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
        Ok(Self {
            max_rel_error: worst.map_or(0.0, |g| g.max_rel_error),
            worst_group: worst.map_or_else(String::new, |g| g.name.clone()),
            coordinates: groups.iter().map(|g| g.coordinates).sum(),
            groups,
        })
    }
}

fn evaluate<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let loss = f(&mut g, &bound)?;
    g.value(loss).item()
}

/// Loss value and reverse-mode gradient of every parameter.
pub fn analytic_gradients<F>(params: &ParamStore, f: F) -> Result<(f64, ParamStore)>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = f(&mut g, &bound)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    Ok((value, bound.gradients(&grads)))
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every coordinate.
pub fn numeric_gradients<F>(params: &ParamStore, h: f64, f: F) -> Result<ParamStore>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let first = evaluate(params, &f)?;
    let second = evaluate(params, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }
    let mut work = params.clone();
    let mut out = ParamStore::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let mut grad = params.get(&name)?.clone();
        for i in 0..n {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = evaluate(&work, &f)?;
            work.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = evaluate(&work, &f)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// Compares [`analytic_gradients`] with [`numeric_gradients`].
pub fn finite_diff_check<F>(params: &ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let numeric = numeric_gradients(params, h, &f)?;
    let (_, analytic) = analytic_gradients(params, &f)?;
    GradCheckReport::compare(&analytic, &numeric)
}
