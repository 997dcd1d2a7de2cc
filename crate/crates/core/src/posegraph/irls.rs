//! Iteratively reweighted least squares for sparse linear residuals under an
//! L1 or Huber loss.

use nalgebra::{DMatrix, DVector};

/// One residual `sum_k coef_k x_{idx_k} - rhs`. Rows sharing a `group` form
/// one vector residual for the Huber loss.
#[derive(Clone, Debug)]
pub(crate) struct Row {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
    pub group: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    L1,
    /// Huber on the per-group Euclidean norm with this threshold.
    Huber(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct IrlsConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub eps: f64,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig {
            max_iters: 100,
            rel_tol: 1e-10,
            eps: 1e-6,
        }
    }
}

pub(crate) fn residuals(rows: &[Row], x: &DVector<f64>) -> Vec<f64> {
    rows.iter()
        .map(|r| r.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>() - r.rhs)
        .collect()
}

fn group_norms(rows: &[Row], res: &[f64], n_groups: usize) -> Vec<f64> {
    let mut g = vec![0.0; n_groups];
    for (r, v) in rows.iter().zip(res) {
        g[r.group] += v * v;
    }
    g.iter_mut().for_each(|v| *v = v.sqrt());
    g
}

pub(crate) fn objective(rows: &[Row], res: &[f64], loss: Loss) -> f64 {
    match loss {
        Loss::L1 => res.iter().map(|r| r.abs()).sum(),
        Loss::Huber(delta) => {
            let n_groups = rows.iter().map(|r| r.group + 1).max().unwrap_or(0);
            group_norms(rows, res, n_groups)
                .iter()
                .map(|&g| {
                    if g <= delta {
                        0.5 * g * g
                    } else {
                        delta * (g - 0.5 * delta)
                    }
                })
                .sum()
        }
    }
}

fn weights(rows: &[Row], res: &[f64], loss: Loss, eps: f64) -> Vec<f64> {
    match loss {
        Loss::L1 => res.iter().map(|r| 1.0 / r.abs().max(eps)).collect(),
        Loss::Huber(delta) => {
            let n_groups = rows.iter().map(|r| r.group + 1).max().unwrap_or(0);
            let g = group_norms(rows, res, n_groups);
            rows.iter()
                .map(|r| {
                    let n = g[r.group];
                    if n <= delta {
                        1.0
                    } else {
                        delta / n
                    }
                })
                .collect()
        }
    }
}

fn weighted_solve(rows: &[Row], w: &[f64], n: usize) -> Option<DVector<f64>> {
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (r, wi) in rows.iter().zip(w) {
        for &(i, ci) in &r.terms {
            b[i] += wi * ci * r.rhs;
            for &(j, cj) in &r.terms {
                a[(i, j)] += wi * ci * cj;
            }
        }
    }
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(&b));
    }
    a.lu().solve(&b)
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct IrlsResult {
    pub x: DVector<f64>,
    pub iters: usize,
    pub objective: f64,
}

/// Minimizes the loss over `n` unknowns. With `warm`, the first weights come
/// from the residuals at `x0`; otherwise the first solve is plain least
/// squares.
pub(crate) fn solve(
    rows: &[Row],
    n: usize,
    x0: &DVector<f64>,
    warm: bool,
    loss: Loss,
    cfg: &IrlsConfig,
) -> Option<IrlsResult> {
    if n == 0 {
        let res = residuals(rows, x0);
        return Some(IrlsResult {
            x: x0.clone(),
            iters: 0,
            objective: objective(rows, &res, loss),
        });
    }
    let scale: f64 = rows.iter().map(|r| r.rhs.abs()).sum::<f64>().max(1.0);
    let floor = 1e-15 * scale;
    let mut x = x0.clone();
    let mut res = residuals(rows, &x);
    let mut obj = objective(rows, &res, loss);
    if warm && obj <= floor {
        return Some(IrlsResult {
            x,
            iters: 0,
            objective: obj,
        });
    }
    let mut w = if warm {
        weights(rows, &res, loss, cfg.eps)
    } else {
        vec![1.0; rows.len()]
    };
    let mut iters = 0;
    let mut best = (x.clone(), f64::INFINITY);
    while iters < cfg.max_iters {
        iters += 1;
        let xn = weighted_solve(rows, &w, n)?;
        let rn = residuals(rows, &xn);
        let on = objective(rows, &rn, loss);
        let prev = obj;
        x = xn;
        res = rn;
        obj = on;
        if obj < best.1 {
            best = (x.clone(), obj);
        }
        if obj <= floor || (prev.is_finite() && (prev - obj).abs() <= cfg.rel_tol * prev.max(floor))
        {
            break;
        }
        w = weights(rows, &res, loss, cfg.eps);
    }
    Some(IrlsResult {
        x: best.0,
        iters,
        objective: best.1,
    })
}
