//! Model callbacks and the builtin location models.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, SymMatrix};
use crate::stats_core::quadrature::integrate;
use crate::stats_core::special::norm_pdf;
use crate::stats_core::{NoiseFamily, NoiseSpec};

/// Per-observation loss and score callbacks.
///
/// For an M-estimator `score` is `ṁ_θ(x)` and `score_jacobian` is `m̈_θ(x)`; for a
/// Z-estimator they are `h_θ(x)` and its Jacobian in `θ`.
pub trait ModelCallbacks: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// `m_θ(x)`. Z-only models return `None`.
    fn objective(&self, theta: &[f64], x: &[f64]) -> Option<f64>;

    fn score(&self, theta: &[f64], x: &[f64], out: &mut [f64]);

    fn score_jacobian(&self, theta: &[f64], x: &[f64], out: &mut Matrix);

    /// `m₂(x)` with `‖m̈_θ(x) − m̈_{θ*}(x)‖ ≤ m₂(x) ‖θ − θ*‖`.
    fn hessian_envelope(&self, x: &[f64]) -> f64;

    /// Global Lipschitz constant `L_F` of `θ ↦ ṁ_θ(x)`.
    fn score_lipschitz(&self) -> f64;

    /// `ṁ_{θ₁}(x) − ṁ_{θ₂}(x)`.
    fn score_increment(&self, theta1: &[f64], theta2: &[f64], x: &[f64], out: &mut [f64]) {
        let mut b = vec![0.0; out.len()];
        self.score(theta1, x, out);
        self.score(theta2, x, &mut b);
        out.iter_mut().zip(&b).for_each(|(o, v)| *o -= v);
    }

    /// `Ψ(θ) = E ṁ_θ(X)` for `X = θ* + noise`, when available in closed form or by quadrature.
    fn population_score(&self, _theta: &[f64], _theta_star: &[f64], _noise: &NoiseSpec) -> Option<Vec<f64>> {
        None
    }

    /// `(Σ, V)` at `θ*`, when available.
    fn population_sigma_v(&self, _noise: &NoiseSpec) -> Option<(SymMatrix, SymMatrix)> {
        None
    }

    /// Constant `c₁` in `‖Ψ(θ) − Ψ(θ*) − Ψ̇₀(θ − θ*)‖ ≤ c₁ ‖θ − θ*‖²`.
    fn psi_curvature(&self) -> Option<f64> {
        None
    }
}

/// `ρ_κ(u) = κ²(√(1 + (u/κ)²) − 1)` and its first two derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothHuber {
    pub kappa: f64,
}

impl SmoothHuber {
    #[inline]
    pub fn rho(&self, u: f64) -> f64 {
        let r = u / self.kappa;
        // κ²(√(1+r²) − 1) = κ² r² / (√(1+r²) + 1), stable for small r.
        self.kappa * self.kappa * r * r / ((1.0 + r * r).sqrt() + 1.0)
    }

    #[inline]
    pub fn d1(&self, u: f64) -> f64 {
        let r = u / self.kappa;
        u / (1.0 + r * r).sqrt()
    }

    #[inline]
    pub fn d2(&self, u: f64) -> f64 {
        let r = u / self.kappa;
        (1.0 + r * r).powf(-1.5)
    }

    #[inline]
    pub fn d3(&self, u: f64) -> f64 {
        let r = u / self.kappa;
        -3.0 * r / self.kappa * (1.0 + r * r).powf(-2.5)
    }

    /// `sup |ρ'''| = (3/2)(5/4)^{-5/2} / κ ≈ 0.859/κ`, attained at `u = κ/2`.
    pub fn d3_sup(&self) -> f64 {
        1.5 * 1.25f64.powf(-2.5) / self.kappa
    }
}

/// Builtin location models; `X = θ* + noise` in all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum BuiltinModel {
    /// `m_θ(x) = ‖θ − x‖²/2`.
    QuadraticLocation { dim: usize },
    /// `m_θ(x) = Σⱼ ρ_κ(θⱼ − xⱼ)`.
    SmoothedHuber { dim: usize, kappa: f64 },
    /// `h_θ(x) = θ − x`.
    LinearScore { dim: usize },
}

/// Coordinate marginal `εⱼ` of the noise when the coordinates are independent.
#[derive(Clone, Copy, Debug)]
enum Marginal {
    Gaussian { sd: f64 },
    Rademacher { s: f64 },
    Laplace { b: f64 },
}

fn marginals(noise: &NoiseSpec) -> Option<Vec<Marginal>> {
    let c = noise.covariance.as_matrix();
    let d = noise.dim();
    let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || c[(i, j)] == 0.0));
    if !diagonal {
        return None;
    }
    (0..d)
        .map(|j| {
            let sd = noise.scale * c[(j, j)].sqrt();
            match noise.family {
                NoiseFamily::Gaussian => Some(Marginal::Gaussian { sd }),
                NoiseFamily::Rademacher => Some(Marginal::Rademacher { s: sd }),
                NoiseFamily::SubExponential { .. } => Some(Marginal::Laplace { b: sd / 2f64.sqrt() }),
                NoiseFamily::UniformSphere => None,
            }
        })
        .collect()
}

impl Marginal {
    /// `E g(ε)`.
    fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        match *self {
            Marginal::Gaussian { sd } => {
                if sd == 0.0 {
                    return g(0.0);
                }
                integrate(|z| g(sd * z) * norm_pdf(z), -10.0, 10.0, 40)
            }
            Marginal::Rademacher { s } => 0.5 * (g(s) + g(-s)),
            Marginal::Laplace { b } => {
                if b == 0.0 {
                    return g(0.0);
                }
                // e^{-t}/2 on each side after t = |x|/b.
                0.5 * integrate(|t| (g(b * t) + g(-b * t)) * (-t).exp(), 0.0, 45.0, 90)
            }
        }
    }
}

impl ModelCallbacks for BuiltinModel {
    fn dim(&self) -> usize {
        match *self {
            BuiltinModel::QuadraticLocation { dim }
            | BuiltinModel::SmoothedHuber { dim, .. }
            | BuiltinModel::LinearScore { dim } => dim,
        }
    }

    fn objective(&self, theta: &[f64], x: &[f64]) -> Option<f64> {
        match self {
            BuiltinModel::QuadraticLocation { .. } => {
                Some(0.5 * theta.iter().zip(x).map(|(t, x)| (t - x) * (t - x)).sum::<f64>())
            }
            BuiltinModel::SmoothedHuber { kappa, .. } => {
                let h = SmoothHuber { kappa: *kappa };
                Some(theta.iter().zip(x).map(|(t, x)| h.rho(t - x)).sum())
            }
            BuiltinModel::LinearScore { .. } => None,
        }
    }

    fn score(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        match self {
            BuiltinModel::QuadraticLocation { .. } | BuiltinModel::LinearScore { .. } => {
                for ((o, t), xi) in out.iter_mut().zip(theta).zip(x) {
                    *o = t - xi;
                }
            }
            BuiltinModel::SmoothedHuber { kappa, .. } => {
                let h = SmoothHuber { kappa: *kappa };
                for ((o, t), xi) in out.iter_mut().zip(theta).zip(x) {
                    *o = h.d1(t - xi);
                }
            }
        }
    }

    fn score_jacobian(&self, theta: &[f64], x: &[f64], out: &mut Matrix) {
        out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        match self {
            BuiltinModel::QuadraticLocation { dim } | BuiltinModel::LinearScore { dim } => {
                for j in 0..*dim {
                    out[(j, j)] = 1.0;
                }
            }
            BuiltinModel::SmoothedHuber { dim, kappa } => {
                let h = SmoothHuber { kappa: *kappa };
                for j in 0..*dim {
                    out[(j, j)] = h.d2(theta[j] - x[j]);
                }
            }
        }
    }

    fn hessian_envelope(&self, _x: &[f64]) -> f64 {
        match self {
            BuiltinModel::QuadraticLocation { .. } | BuiltinModel::LinearScore { .. } => 0.0,
            // Any bound ≥ sup|ρ'''| ≈ 0.859/κ works since m̈ is diagonal.
            BuiltinModel::SmoothedHuber { kappa, .. } => 3.0 / kappa,
        }
    }

    fn score_lipschitz(&self) -> f64 {
        // sup ρ'' = 1 for the smoothed loss as well.
        1.0
    }

    fn score_increment(&self, theta1: &[f64], theta2: &[f64], x: &[f64], out: &mut [f64]) {
        match self {
            // Affine in θ: the increment is θ₁ − θ₂ with no rounding from x.
            BuiltinModel::QuadraticLocation { .. } | BuiltinModel::LinearScore { .. } => {
                for ((o, a), b) in out.iter_mut().zip(theta1).zip(theta2) {
                    *o = a - b;
                }
            }
            BuiltinModel::SmoothedHuber { .. } => {
                let mut b = vec![0.0; out.len()];
                self.score(theta1, x, out);
                self.score(theta2, x, &mut b);
                out.iter_mut().zip(&b).for_each(|(o, v)| *o -= v);
            }
        }
    }

    fn population_score(&self, theta: &[f64], theta_star: &[f64], noise: &NoiseSpec) -> Option<Vec<f64>> {
        match self {
            BuiltinModel::QuadraticLocation { .. } | BuiltinModel::LinearScore { .. } => {
                Some(theta.iter().zip(theta_star).map(|(t, s)| t - s).collect())
            }
            BuiltinModel::SmoothedHuber { kappa, .. } => {
                let h = SmoothHuber { kappa: *kappa };
                let m = marginals(noise)?;
                Some(
                    theta
                        .iter()
                        .zip(theta_star)
                        .zip(&m)
                        .map(|((t, s), mj)| {
                            let a = t - s;
                            mj.expect(|e| h.d1(a - e))
                        })
                        .collect(),
                )
            }
        }
    }

    fn population_sigma_v(&self, noise: &NoiseSpec) -> Option<(SymMatrix, SymMatrix)> {
        match self {
            BuiltinModel::QuadraticLocation { dim } | BuiltinModel::LinearScore { dim } => {
                Some((noise.second_moment(), SymMatrix::identity(*dim)))
            }
            BuiltinModel::SmoothedHuber { kappa, .. } => {
                let h = SmoothHuber { kappa: *kappa };
                let m = marginals(noise)?;
                let sigma: Vec<f64> = m.iter().map(|mj| mj.expect(|e| h.d1(e).powi(2))).collect();
                let v: Vec<f64> = m.iter().map(|mj| mj.expect(|e| h.d2(e))).collect();
                Some((SymMatrix::from_diag(&sigma), SymMatrix::from_diag(&v)))
            }
        }
    }

    fn psi_curvature(&self) -> Option<f64> {
        match self {
            BuiltinModel::QuadraticLocation { .. } | BuiltinModel::LinearScore { .. } => Some(0.0),
            // Coordinatewise Taylor: |Ψⱼ − Ψ̇ⱼⱼeⱼ| ≤ sup|ρ'''| eⱼ²/2, and Σ eⱼ⁴ ≤ ‖e‖⁴.
            BuiltinModel::SmoothedHuber { kappa, .. } => Some(0.5 * SmoothHuber { kappa: *kappa }.d3_sup()),
        }
    }
}
