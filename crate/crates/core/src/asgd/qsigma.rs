//! `Q_i = ℓ_i Σ_{j=i}^{n−1} Π_{k=i+1}^{j}(I − ℓ_k G)` and `Σ_n = (1/n) Σ_{i=1}^{n−1} Q_i Σ_i Q_iᵀ`.

use serde::{Deserialize, Serialize};

use super::{AsgdError, Schedule};
use crate::linalg::{inv_sqrt_psd, sym_eig, Matrix, SymMatrix};

/// `Q_i` in the eigenbasis of `G`: `Q_i = U diag(q_i) Uᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFactors {
    pub eigvecs: Matrix,
    pub eigvals: Vec<f64>,
    /// Row `i` holds `q_i(λ_k)` for each eigenvalue.
    pub coeffs: Matrix,
}

impl QFactors {
    /// Backward recursion `S_{n−1} = 1`, `S_i = 1 + (1 − ℓ_{i+1}λ) S_{i+1}`, `q_i = ℓ_i S_i`.
    pub fn new(g: &SymMatrix, schedule: &Schedule) -> Result<Self, AsgdError> {
        schedule.validate()?;
        let n = schedule.n;
        let eig = sym_eig(g);
        let d = eig.values.len();
        let mut coeffs = Matrix::zeros(n, d);
        for (k, &lam) in eig.values.iter().enumerate() {
            let mut s = 1.0;
            coeffs[(n - 1, k)] = schedule.ell(n - 1) * s;
            for i in (0..n - 1).rev() {
                s = 1.0 + (1.0 - schedule.ell(i + 1) * lam) * s;
                coeffs[(i, k)] = schedule.ell(i) * s;
            }
        }
        Ok(Self { eigvecs: eig.vectors, eigvals: eig.values, coeffs })
    }

    pub fn n(&self) -> usize {
        self.coeffs.rows()
    }

    pub fn matrix(&self, i: usize) -> Matrix {
        let d = self.eigvals.len();
        let u = &self.eigvecs;
        let q = self.coeffs.row(i);
        let mut m = Matrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                m[(a, b)] = (0..d).map(|k| u[(a, k)] * q[k] * u[(b, k)]).sum();
            }
        }
        m
    }

    /// `Q_i v`.
    pub fn apply(&self, i: usize, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        let u = &self.eigvecs;
        let q = self.coeffs.row(i);
        let c: Vec<f64> = (0..d).map(|k| q[k] * (0..d).map(|a| u[(a, k)] * v[a]).sum::<f64>()).collect();
        (0..d).map(|a| (0..d).map(|k| u[(a, k)] * c[k]).sum()).collect()
    }

    /// `p_i = ‖Q_i‖`.
    pub fn norm(&self, i: usize) -> f64 {
        self.coeffs.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Dense `Q_0..Q_{n−1}`.
pub fn compute_q(g: &SymMatrix, schedule: &Schedule) -> Result<Vec<Matrix>, AsgdError> {
    let f = QFactors::new(g, schedule)?;
    Ok((0..f.n()).map(|i| f.matrix(i)).collect())
}

/// `(1/n) Σ_{i=1}^{n−1} Q_i Σ_i Q_iᵀ` with `n = q.len()`.
pub fn compute_sigma_n(q: &[Matrix], sigma: &[SymMatrix]) -> Result<SymMatrix, AsgdError> {
    if q.len() != sigma.len() || q.is_empty() {
        return Err(AsgdError::InvalidProblem(format!("{} Q matrices but {} covariances", q.len(), sigma.len())));
    }
    let n = q.len();
    let d = sigma[0].dim();
    let mut acc = Matrix::zeros(d, d);
    for i in 1..n {
        acc.add_scaled(1.0 / n as f64, sigma[i].congruence(&q[i]).as_matrix());
    }
    Ok(SymMatrix::from_symmetric_part(&acc))
}

#[derive(Clone, Debug)]
pub struct QSigma {
    pub q: QFactors,
    pub sigma_n: SymMatrix,
    pub sigma_n_inv_sqrt: SymMatrix,
    pub lambda_min: f64,
    /// Realized `p_i = ‖Q_i‖`.
    pub p: Vec<f64>,
}

impl QSigma {
    /// Uses a common `Σ_i = sigma_xi`; in the eigenbasis `Σ_n[a,b] = M[a,b]·(1/n)Σ q_i(λ_a) q_i(λ_b)`.
    pub fn new(g: &SymMatrix, schedule: &Schedule, sigma_xi: &SymMatrix) -> Result<Self, AsgdError> {
        let q = QFactors::new(g, schedule)?;
        let n = schedule.n;
        let d = g.dim();
        let u = &q.eigvecs;
        let m = sigma_xi.congruence(&u.transpose());
        let mut inner = Matrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let w: f64 = (1..n).map(|i| q.coeffs[(i, a)] * q.coeffs[(i, b)]).sum::<f64>() / n as f64;
                inner[(a, b)] = m.as_matrix()[(a, b)] * w;
            }
        }
        let sigma_n = SymMatrix::from_symmetric_part(&inner).congruence(u);
        let sigma_n_inv_sqrt = inv_sqrt_psd(&sigma_n, None)?;
        let lambda_min = sigma_n.lambda_min();
        let p = (0..n).map(|i| q.norm(i)).collect();
        Ok(Self { q, sigma_n, sigma_n_inv_sqrt, lambda_min, p })
    }

    pub fn max_p(&self) -> f64 {
        self.p.iter().fold(0.0f64, |m, v| m.max(*v))
    }

    /// `λ_min(Σ_n)^{−1/2}`, the realized constant in `Δ₃`.
    pub fn c1(&self) -> f64 {
        self.lambda_min.powf(-0.5)
    }
}
