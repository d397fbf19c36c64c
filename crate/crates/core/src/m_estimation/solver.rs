//! Damped Newton for M-estimators (minimize `M_n`) and Z-estimators (root of `Ψ_n`).

use serde::{Deserialize, Serialize};

use super::models::ModelCallbacks;
use super::{MestError, ModelKind};
use crate::linalg::{cholesky, dot, norm, Matrix, SymMatrix};

pub const MAX_ITERATIONS: usize = 200;
pub const ARMIJO_BETA: f64 = 0.5;
pub const ARMIJO_C: f64 = 1e-4;
/// Default stopping tolerance on `‖∇M_n‖` or `‖Ψ_n‖`.
pub const DEFAULT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    /// Set when a singular Jacobian forced a gradient step.
    pub gradient_fallback: bool,
}

/// `(1/n) Σᵢ score(θ, Xᵢ)`.
pub fn mean_score(model: &dyn ModelCallbacks, data: &Matrix, theta: &[f64]) -> Vec<f64> {
    let d = theta.len();
    let mut acc = vec![0.0; d];
    let mut s = vec![0.0; d];
    for i in 0..data.rows() {
        model.score(theta, data.row(i), &mut s);
        for (a, v) in acc.iter_mut().zip(&s) {
            *a += v;
        }
    }
    let n = data.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// `(1/n) Σᵢ ∂score(θ, Xᵢ)`.
pub fn mean_jacobian(model: &dyn ModelCallbacks, data: &Matrix, theta: &[f64]) -> Matrix {
    let d = theta.len();
    let mut acc = Matrix::zeros(d, d);
    let mut j = Matrix::zeros(d, d);
    for i in 0..data.rows() {
        model.score_jacobian(theta, data.row(i), &mut j);
        acc.add_scaled(1.0, &j);
    }
    // Divide rather than scale by 1/n so a constant Jacobian averages to itself exactly.
    let n = data.rows() as f64;
    acc.as_mut_slice().iter_mut().for_each(|a| *a /= n);
    acc
}

fn mean_objective(model: &dyn ModelCallbacks, data: &Matrix, theta: &[f64]) -> Option<f64> {
    let mut s = 0.0;
    for i in 0..data.rows() {
        s += model.objective(theta, data.row(i))?;
    }
    Some(s / data.rows() as f64)
}

// Solves J p = -g; `None` when J is not safely invertible.
fn newton_direction(jac: &Matrix, g: &[f64], symmetric: bool) -> Option<Vec<f64>> {
    let d = g.len();
    if symmetric {
        let s = SymMatrix::from_symmetric_part(jac);
        let l = cholesky(&s, None).ok()?;
        // Forward then backward substitution.
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut v = -g[i];
            for k in 0..i {
                v -= l[(i, k)] * y[k];
            }
            y[i] = v / l[(i, i)];
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let mut v = y[i];
            for k in (i + 1)..d {
                v -= l[(k, i)] * x[k];
            }
            x[i] = v / l[(i, i)];
        }
        Some(x)
    } else {
        lu_solve(jac, &g.iter().map(|v| -v).collect::<Vec<_>>())
    }
}

/// Gaussian elimination with partial pivoting.
pub fn lu_solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let d = b.len();
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))?;
        if m[(piv, col)].abs() <= 1e-13 * scale {
            return None;
        }
        if piv != col {
            for k in 0..d {
                let t = m[(col, k)];
                m[(col, k)] = m[(piv, k)];
                m[(piv, k)] = t;
            }
            x.swap(col, piv);
        }
        for r in (col + 1)..d {
            let f = m[(r, col)] / m[(col, col)];
            if f != 0.0 {
                for k in col..d {
                    m[(r, k)] -= f * m[(col, k)];
                }
                x[r] -= f * x[col];
            }
        }
    }
    for r in (0..d).rev() {
        let mut v = x[r];
        for k in (r + 1)..d {
            v -= m[(r, k)] * x[k];
        }
        x[r] = v / m[(r, r)];
    }
    Some(x)
}

/// Newton with Armijo backtracking. For M-estimators the merit is `M_n`; for
/// Z-estimators it is `‖Ψ_n‖²/2`. Once the merit stops resolving progress
/// (rounding), full steps are accepted while they shrink the gradient.
pub fn solve(
    model: &dyn ModelCallbacks,
    kind: ModelKind,
    data: &Matrix,
    init: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, SolveDiagnostics), MestError> {
    let d = init.len();
    if data.rows() < d {
        return Err(MestError::TooFewRows { n: data.rows(), d });
    }
    let use_objective = kind == ModelKind::MSmooth && model.objective(init, data.row(0)).is_some();
    let merit = |theta: &[f64], g: &[f64]| -> f64 {
        if use_objective {
            mean_objective(model, data, theta).unwrap_or(f64::NAN)
        } else {
            0.5 * dot(g, g)
        }
    };
    let mut theta = init.to_vec();
    let mut g = mean_score(model, data, &theta);
    let mut gn = norm(&g);
    let mut diag = SolveDiagnostics { iterations: 0, grad_norm: gn, gradient_fallback: false };
    let mut polish = 0;
    for _ in 0..MAX_ITERATIONS {
        if gn <= tol {
            // A couple of extra steps push the gradient to rounding level, which the
            // decomposition identity relies on.
            if polish >= 2 || gn == 0.0 {
                break;
            }
            polish += 1;
        }
        let jac = mean_jacobian(model, data, &theta);
        let (p, fallback) = match newton_direction(&jac, &g, kind == ModelKind::MSmooth) {
            Some(p) => (p, false),
            None => (g.iter().map(|v| -v).collect(), true),
        };
        diag.gradient_fallback |= fallback;
        let f0 = merit(&theta, &g);
        let slope = if use_objective { dot(&g, &p) } else { -dot(&g, &g) };
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let cand: Vec<f64> = theta.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            let gc = mean_score(model, data, &cand);
            let fc = merit(&cand, &gc);
            // At rounding level the merit can no longer certify progress; a full step
            // that halves the gradient is taken on its own merits.
            let full_ok = t == 1.0 && norm(&gc) <= 0.5 * gn;
            if full_ok || (fc.is_finite() && fc <= f0 + ARMIJO_C * t * slope) {
                accepted = Some((cand, gc));
                break;
            }
            t *= ARMIJO_BETA;
        }
        let (cand, gc) = match accepted {
            Some(v) => v,
            None => {
                let cand: Vec<f64> = theta.iter().zip(&p).map(|(a, b)| a + b).collect();
                let gc = mean_score(model, data, &cand);
                if norm(&gc) < gn {
                    (cand, gc)
                } else if gn <= tol {
                    break;
                } else {
                    diag.grad_norm = gn;
                    return Err(MestError::NonConvergence { theta, grad_norm: gn, iterations: diag.iterations });
                }
            }
        };
        let new_gn = norm(&gc);
        if gn <= tol && new_gn >= gn {
            break;
        }
        if gn > tol {
            diag.iterations += 1;
        }
        theta = cand;
        g = gc;
        gn = new_gn;
        diag.grad_norm = gn;
    }
    if gn > tol {
        return Err(MestError::NonConvergence { theta, grad_norm: gn, iterations: diag.iterations });
    }
    diag.grad_norm = gn;
    Ok((theta, diag))
}
