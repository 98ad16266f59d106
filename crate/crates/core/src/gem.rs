//! Gradient Episodic Memory: keep the update from increasing the loss on
//! any earlier task's stored exemplars.
//!
//! Each earlier task contributes one constraint gradient `G_i` (mean CE
//! gradient over its exemplars). If the proposed gradient `g` has a negative
//! inner product with some `G_i`, it is replaced by the closest vector that
//! satisfies `G g̃ ≥ 0`, found through the dual
//! `min_{v ≥ 0} ½ vᵀ G Gᵀ v + (G g)ᵀ v` with `g̃ = g + Gᵀ v`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::distill::ce_loss;
use crate::error::{CilError, Result};
use crate::model::ModelParams;
use crate::scenario::Sample;

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub v: Array1<f64>,
    pub g_proj: Array1<f64>,
    /// Constraints violated by the unprojected gradient.
    pub violations: usize,
}

impl QpSolution {
    pub fn correction_norm(&self, g: ArrayView1<f64>) -> f64 {
        (&self.g_proj - &g).mapv(|x| x * x).sum().sqrt()
    }
}

const CD_TOL: f64 = 1e-10;

/// Projects `g` onto `{z : G z ≥ 0}` when some constraint is violated by
/// more than `margin`; returns `g` untouched otherwise.
pub fn project(g: ArrayView1<f64>, constraints: ArrayView2<f64>, margin: f64, tol: f64) -> Result<QpSolution> {
    let k = constraints.nrows();
    if k > 0 && constraints.ncols() != g.len() {
        return Err(CilError::Shape(format!(
            "constraint gradients have {} entries, gradient has {}",
            constraints.ncols(),
            g.len()
        )));
    }
    if g.iter().chain(constraints.iter()).any(|v| !v.is_finite()) {
        return Err(CilError::NonFinite("GEM gradients"));
    }
    let dots = constraints.dot(&g);
    let violations = dots.iter().filter(|&&d| d < -margin).count();
    if violations == 0 {
        return Ok(QpSolution {
            v: Array1::zeros(k),
            g_proj: g.to_owned(),
            violations,
        });
    }

    let gram = constraints.dot(&constraints.t());
    let v = solve_dual(&gram, &dots);
    let g_proj = &g + &constraints.t().dot(&v);
    let worst = constraints.dot(&g_proj).fold(f64::INFINITY, |a, &b| a.min(b));
    if worst < -tol {
        return Err(CilError::Data(format!(
            "GEM projection left a constraint at {worst:e}"
        )));
    }
    Ok(QpSolution { v, g_proj, violations })
}

/// Projected coordinate descent on `½ vᵀQv + pᵀv, v ≥ 0`, followed by an
/// exact solve restricted to the support it found.
fn solve_dual(gram: &Array2<f64>, p: &Array1<f64>) -> Array1<f64> {
    let k = p.len();
    let mut v = Array1::<f64>::zeros(k);
    let max_sweeps = 10 * k * k;
    for _ in 0..max_sweeps {
        let mut change: f64 = 0.0;
        for i in 0..k {
            let q = gram[[i, i]];
            if q <= 0.0 {
                continue;
            }
            let grad_i = gram.row(i).dot(&v) + p[i];
            let next = (v[i] - grad_i / q).max(0.0);
            change = change.max((next - v[i]).abs());
            v[i] = next;
        }
        if change < CD_TOL {
            break;
        }
    }
    polish(gram, p, &v).unwrap_or(v)
}

/// Solves `Q_SS v_S = −p_S` on the support `S` of `v`; accepts the result if
/// it satisfies the KKT conditions.
fn polish(gram: &Array2<f64>, p: &Array1<f64>, v: &Array1<f64>) -> Option<Array1<f64>> {
    let support: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0).collect();
    if support.is_empty() {
        return None;
    }
    let n = support.len();
    let mut a = Array2::from_shape_fn((n, n), |(r, c)| gram[[support[r], support[c]]]);
    let mut b = Array1::from_shape_fn(n, |r| -p[support[r]]);
    // Gaussian elimination with partial pivoting.
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[[x, col]].abs().total_cmp(&a[[y, col]].abs()))?;
        if a[[pivot, col]].abs() < 1e-14 {
            return None;
        }
        for j in 0..n {
            a.swap([col, j], [pivot, j]);
        }
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            for j in col..n {
                a[[row, j]] -= f * a[[col, j]];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|j| a[[row, j]] * x[j]).sum();
        x[row] = (b[row] - s) / a[[row, row]];
    }
    if x.iter().any(|&xi| xi < 0.0 || !xi.is_finite()) {
        return None;
    }
    let mut out = Array1::zeros(v.len());
    for (r, &i) in support.iter().enumerate() {
        out[i] = x[r];
    }
    let slack = gram.dot(&out) + p;
    let scale = p.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if slack.iter().any(|&s| s < -1e-9 * scale) {
        return None;
    }
    Some(out)
}

/// Mean CE loss over `samples` (argmax over every head row) and its gradient.
pub fn ce_gradient(model: &ModelParams, samples: &[&Sample]) -> Result<(f64, ModelParams)> {
    let mut grad = model.zeros_like();
    if samples.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    for s in samples {
        let fwd = model.forward_f32(&s.features)?;
        let row = model.row_of(s.label).ok_or_else(|| {
            CilError::Data(format!("label {} has no head row", s.label))
        })?;
        let logits = fwd.logits.view().insert_axis(ndarray::Axis(0));
        total += ce_loss(logits, &[row])? * scale;
        let mut d = crate::distill::softmax(fwd.logits.view());
        d[row] -= 1.0;
        d *= scale;
        model.backward(&fwd, &d, None, &mut grad);
    }
    Ok((total, grad))
}

/// One flattened CE gradient per earlier task, in task order.
pub fn reference_gradients(
    model: &ModelParams,
    groups: &BTreeMap<usize, Vec<&Sample>>,
) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(groups.len());
    for samples in groups.values() {
        rows.push(ce_gradient(model, samples)?.1.flatten());
    }
    let dim = model.num_params();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((groups.len(), dim), flat).map_err(|e| CilError::Shape(e.to_string()))
}
