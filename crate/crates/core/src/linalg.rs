//! Small dense linear algebra.
//!
//! Everything here targets the d ≤ 32 regime: covariance matrices, Hessians at
//! the optimum, and the SGD weight matrices. Matrices are row-major `f64`
//! buffers; symmetric matrices carry a validated newtype so that callers which
//! need an eigendecomposition cannot hand in an asymmetric one by accident.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative symmetry tolerance accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric: |M[{i}][{j}] - M[{j}][{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("matrix has non-finite entry at ({i}, {j})")]
    NonFinite { i: usize, j: usize },
    #[error("matrix is singular: eigenvalue {eigenvalue:e} is at or below the floor {floor:e}")]
    Singular { eigenvalue: f64, floor: f64 },
    #[error("matrix must have at least one row and one column")]
    Empty,
    #[error("rows have inconsistent lengths")]
    Ragged,
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries((0..self.rows).map(|i| self.row(i))).finish()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = LinalgError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        (0..m.rows).map(|i| m.row(i).to_vec()).collect()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Wraps a row-major buffer. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 {
            return Err(LinalgError::Empty);
        }
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::Ragged);
        }
        Ok(Self { rows: r, cols: c, data: rows.concat() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v, &mut out);
        out
    }

    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            *o = dot(self.row(i), v);
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a * s).collect() }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Averages the matrix with its transpose.
    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square());
        let mut m = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(u.len(), v.len());
        for (i, &a) in u.iter().enumerate() {
            for (j, &b) in v.iter().enumerate() {
                m[(i, j)] = a * b;
            }
        }
        m
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// A square matrix validated to be symmetric (and finite).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct SymMatrix(Matrix);

impl TryFrom<Matrix> for SymMatrix {
    type Error = LinalgError;

    fn try_from(m: Matrix) -> Result<Self, Self::Error> {
        SymMatrix::new(m)
    }
}

impl From<SymMatrix> for Matrix {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

impl SymMatrix {
    /// Validates symmetry within `1e-12·(1+|M[i][j]|)` and exact-symmetrizes the stored entries.
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::DimMismatch { expected: m.rows(), found: m.cols() });
        }
        if m.rows() == 0 {
            return Err(LinalgError::Empty);
        }
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if !m[(i, j)].is_finite() {
                    return Err(LinalgError::NonFinite { i, j });
                }
            }
        }
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                let gap = (m[(i, j)] - m[(j, i)]).abs();
                if gap > SYMMETRY_TOL * (1.0 + m[(i, j)].abs()) {
                    return Err(LinalgError::NotSymmetric { i, j, gap });
                }
            }
        }
        Ok(SymMatrix(m.symmetrized()))
    }

    /// Symmetrizes `m` unconditionally. Use for matrices symmetric by construction.
    pub fn from_symmetric_part(m: &Matrix) -> Self {
        assert!(m.is_square());
        SymMatrix(m.symmetrized())
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(Matrix::identity(dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(Matrix::zeros(dim, dim))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        SymMatrix(Matrix::from_diag(diag))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(self.0.add(&other.0))
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(self.0.sub(&other.0))
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(self.0.scale(s))
    }

    /// `A M Aᵀ`, symmetric whenever `M` is.
    pub fn congruence(&self, a: &Matrix) -> SymMatrix {
        SymMatrix::from_symmetric_part(&a.matmul(&self.0).matmul(&a.transpose()))
    }

    pub fn lambda_min(&self) -> f64 {
        *sym_eig(self).values.last().expect("dim >= 1")
    }

    pub fn lambda_max(&self) -> f64 {
        sym_eig(self).values[0]
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Eigendecomposition `M = Q Λ Qᵀ`; eigenvalues descending, eigenvectors in columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEigen {
    /// Rebuilds `Q f(Λ) Qᵀ`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let d = self.values.len();
        let mut out = Matrix::zeros(d, d);
        for (k, &lam) in self.values.iter().enumerate() {
            let fl = f(lam);
            if fl == 0.0 {
                continue;
            }
            for i in 0..d {
                let qi = self.vectors[(i, k)] * fl;
                for j in 0..d {
                    out[(i, j)] += qi * self.vectors[(j, k)];
                }
            }
        }
        SymMatrix::from_symmetric_part(&out)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(m: &SymMatrix) -> SymEigen {
    let d = m.dim();
    let mut a = m.as_matrix().clone();
    let mut v = Matrix::identity(d);
    let scale = a.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= f64::EPSILON * 1e-3 * scale || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    let values = order.iter().map(|&k| a[(k, k)]).collect();
    let mut vectors = Matrix::zeros(d, d);
    for (col, &k) in order.iter().enumerate() {
        for i in 0..d {
            vectors[(i, col)] = v[(i, k)];
        }
    }
    SymEigen { values, vectors }
}

// Applies the rotation J(p, q, θ) as A ← Jᵀ A J, V ← V J.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let d = a.rows();
    for k in 0..d {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..d {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    for k in 0..d {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Default singularity floor `1e-12·trace(M)/d`.
pub fn default_psd_floor(m: &SymMatrix) -> f64 {
    (1e-12 * m.trace() / m.dim() as f64).max(0.0)
}

fn check_floor(eig: &SymEigen, floor: f64) -> Result<(), LinalgError> {
    let lmin = *eig.values.last().expect("dim >= 1");
    if lmin <= floor {
        return Err(LinalgError::Singular { eigenvalue: lmin, floor });
    }
    Ok(())
}

/// `M^{-1/2}` for a positive definite `M`. `floor = None` uses [`default_psd_floor`].
pub fn inv_sqrt_psd(m: &SymMatrix, floor: Option<f64>) -> Result<SymMatrix, LinalgError> {
    let floor = floor.unwrap_or_else(|| default_psd_floor(m));
    let eig = sym_eig(m);
    check_floor(&eig, floor)?;
    Ok(eig.map_values(|l| 1.0 / l.sqrt()))
}

/// `M^{1/2}` for a positive semidefinite `M`; tiny negative eigenvalues are clamped to zero.
pub fn sqrt_psd(m: &SymMatrix) -> SymMatrix {
    sym_eig(m).map_values(|l| l.max(0.0).sqrt())
}

/// Inverse of a positive definite matrix through its eigendecomposition.
pub fn inverse_spd(m: &SymMatrix, floor: Option<f64>) -> Result<SymMatrix, LinalgError> {
    let floor = floor.unwrap_or_else(|| default_psd_floor(m));
    let eig = sym_eig(m);
    check_floor(&eig, floor)?;
    Ok(eig.map_values(|l| 1.0 / l))
}

/// Lower-triangular Cholesky factor `L` with `M = L Lᵀ`.
pub fn cholesky(m: &SymMatrix, floor: Option<f64>) -> Result<Matrix, LinalgError> {
    let floor = floor.unwrap_or_else(|| default_psd_floor(m));
    let d = m.dim();
    let mut l = Matrix::zeros(d, d);
    for j in 0..d {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= floor {
            return Err(LinalgError::Singular { eigenvalue: diag, floor });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Spectral norm `(λ_max(AᵀA))^{1/2}`.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.rows() == 1 || a.cols() == 1 {
        return a.frobenius_norm();
    }
    let ata = SymMatrix::from_symmetric_part(&a.transpose().matmul(a));
    sym_eig(&ata).values[0].max(0.0).sqrt()
}

/// `A ≼ B` up to `tol`, i.e. `λ_max(A − B) ≤ tol`.
pub fn loewner_leq(a: &SymMatrix, b: &SymMatrix, tol: f64) -> Result<bool, LinalgError> {
    if a.dim() != b.dim() {
        return Err(LinalgError::DimMismatch { expected: a.dim(), found: b.dim() });
    }
    Ok(sym_eig(&a.sub(b)).values[0] <= tol)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[inline]
pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[inline]
pub fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `y += s·x`
#[inline]
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
