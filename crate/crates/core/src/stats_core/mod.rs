//! Random sources, whitening, the third-moment functional and Gaussian
//! probabilities of convex sets.

pub mod noise;
pub mod quadrature;
pub mod rng;
pub mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex_geom::ConvexBody;
use crate::linalg::{dot, inv_sqrt_psd, norm, LinalgError, Matrix, SymMatrix};

pub use noise::{NoiseFamily, NoiseSampler, NoiseSpec};
pub use rng::{RandomSource, SourceId};
pub use special::{chi_square_cdf, chi_square_ppf, norm_cdf, norm_ppf};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid noise spec: {0}")]
    InvalidSpec(String),
    #[error("no closed-form Gaussian probability for this body: {0}")]
    Unsupported(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    pub fn new(value: f64, stderr: f64) -> Self {
        Self { value, stderr }
    }

    pub fn scaled(self, s: f64) -> Self {
        Self { value: s * self.value, stderr: s.abs() * self.stderr }
    }
}

/// Running mean and variance (Welford), mergeable across workers (Chan et al.).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanAcc {
    pub count: u64,
    mean: f64,
    m2: f64,
}

impl MeanAcc {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &MeanAcc) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        let se = if self.count == 0 { 0.0 } else { (self.variance() / self.count as f64).sqrt() };
        Estimate { value: self.mean, stderr: se }
    }
}

impl FromIterator<f64> for MeanAcc {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = MeanAcc::default();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// Influence terms of one realization after whitening.
#[derive(Clone, Debug)]
pub struct InfluenceBatch {
    pub xi: Matrix,
    /// The applied `(Σᵢ ξᵢ ξᵢᵀ)^{-1/2}`.
    pub standardizer: SymMatrix,
    /// `‖mean(ξ)‖` after the transform; reported, not enforced.
    pub mean_norm: f64,
}

impl InfluenceBatch {
    pub fn n(&self) -> usize {
        self.xi.rows()
    }

    pub fn d(&self) -> usize {
        self.xi.cols()
    }

    /// `W = Σᵢ ξᵢ`.
    pub fn sum(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.d()];
        for i in 0..self.n() {
            crate::linalg::axpy(1.0, self.xi.row(i), &mut w);
        }
        w
    }
}

/// `Σᵢ ξᵢ ξᵢᵀ` over the rows.
pub fn sum_outer(xi: &Matrix) -> SymMatrix {
    let d = xi.cols();
    let mut s = Matrix::zeros(d, d);
    for i in 0..xi.rows() {
        let r = xi.row(i);
        for a in 0..d {
            for b in 0..d {
                s[(a, b)] += r[a] * r[b];
            }
        }
    }
    SymMatrix::from_symmetric_part(&s)
}

/// Whitens rows so that `Σᵢ ξᵢ ξᵢᵀ = I`.
pub fn standardize(xi_raw: &Matrix) -> Result<InfluenceBatch, StatsError> {
    let r = inv_sqrt_psd(&sum_outer(xi_raw), None)?;
    let mut xi = Matrix::zeros(xi_raw.rows(), xi_raw.cols());
    for i in 0..xi_raw.rows() {
        r.as_matrix().matvec_into(xi_raw.row(i), xi.row_mut(i));
    }
    let mut batch = InfluenceBatch { xi, standardizer: r, mean_norm: 0.0 };
    let s = batch.sum();
    batch.mean_norm = norm(&s) / batch.n() as f64;
    Ok(batch)
}

/// `Σᵢ ‖ξᵢ‖³` of one batch.
pub fn gamma_third_moment(batch: &InfluenceBatch) -> f64 {
    (0..batch.n()).map(|i| norm(batch.xi.row(i)).powi(3)).sum()
}

/// `E‖Z‖³` for `Z ~ N(0, I_d)`: `2^{3/2} Γ((d+3)/2) / Γ(d/2)`.
pub fn gaussian_third_abs_moment(d: usize) -> f64 {
    let df = d as f64;
    (1.5 * 2f64.ln() + special::ln_gamma(0.5 * (df + 3.0)) - special::ln_gamma(0.5 * df)).exp()
}

/// `γ = Σᵢ E‖ξᵢ‖³` for `n` iid draws of `spec`, whitened by the population second
/// moment so that `ξᵢ = Σ^{-1/2} Xᵢ / √n`. Analytic where the law allows,
/// otherwise Monte Carlo with `mc_reps` draws.
pub fn gamma_expected(spec: &NoiseSpec, n: usize, mc_reps: usize, source: &mut RandomSource) -> Result<Estimate, StatsError> {
    let d = spec.dim();
    let per_draw = match spec.family {
        NoiseFamily::Gaussian => Estimate::exact(gaussian_third_abs_moment(d)),
        // Whitening makes these vectors norm √d exactly.
        NoiseFamily::Rademacher | NoiseFamily::UniformSphere => Estimate::exact((d as f64).powf(1.5)),
        // Unit-variance Laplace: b = 1/√2 and E|e|³ = 6b³.
        NoiseFamily::SubExponential { .. } if d == 1 => Estimate::exact(6.0 * 0.5f64.powf(1.5)),
        NoiseFamily::SubExponential { .. } => {
            let w = inv_sqrt_psd(&spec.second_moment(), None)?;
            let mut sampler = spec.sampler()?;
            let mut x = vec![0.0; d];
            let mut acc = MeanAcc::default();
            for _ in 0..mc_reps {
                sampler.draw(source, &mut x);
                acc.push(norm(&w.as_matrix().matvec(&x)).powi(3));
            }
            acc.estimate()
        }
    };
    Ok(per_draw.scaled((n as f64).powf(-0.5)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbMode {
    Exact,
    Mc { reps: usize },
}

/// `P(Z ∈ A)` for `Z ~ N(0, I_d)`.
pub fn gaussian_convex_prob(body: &ConvexBody, mode: ProbMode, source: &mut RandomSource) -> Result<Estimate, StatsError> {
    if body.is_empty() {
        return Ok(Estimate::exact(0.0));
    }
    match mode {
        ProbMode::Exact => gaussian_prob_exact(body).map(Estimate::exact),
        ProbMode::Mc { reps } => {
            let d = body.dim();
            let mut z = vec![0.0; d];
            let mut hits = 0usize;
            for _ in 0..reps {
                source.fill_normal(&mut z);
                if body.contains(&z) {
                    hits += 1;
                }
            }
            let p = hits as f64 / reps as f64;
            Ok(Estimate::new(p, (p * (1.0 - p) / reps as f64).sqrt()))
        }
    }
}

/// Closed forms for half-spaces, centered balls and boxes.
pub fn gaussian_prob_exact(body: &ConvexBody) -> Result<f64, StatsError> {
    match body {
        ConvexBody::HalfSpace(h) => Ok(norm_cdf(h.offset)),
        ConvexBody::Ball { center, radius } if center.iter().all(|&c| c == 0.0) => {
            Ok(chi_square_cdf(radius * radius, center.len()))
        }
        ConvexBody::Box { lower, upper } => Ok(lower
            .iter()
            .zip(upper)
            .map(|(&l, &u)| box_side_prob(l, u))
            .product()),
        ConvexBody::Empty { .. } => Ok(0.0),
        other => Err(StatsError::Unsupported(format!("{other:?}"))),
    }
}

// Φ(u) − Φ(l), computed on the side where the difference is not a cancellation of two numbers near 1.
fn box_side_prob(l: f64, u: f64) -> f64 {
    if l > 0.0 {
        norm_cdf(-l) - norm_cdf(-u)
    } else {
        norm_cdf(u) - norm_cdf(l)
    }
}

/// `⟨u, x⟩` for every row.
pub fn project_rows(x: &Matrix, u: &[f64]) -> Vec<f64> {
    (0..x.rows()).map(|i| dot(x.row(i), u)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex_geom::ConvexBody;

    #[test]
    fn standardize_scalar_example() {
        let raw = Matrix::from_rows(&[vec![2.0], vec![-2.0]]).unwrap();
        let b = standardize(&raw).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.xi[(0, 0)] - h).abs() < 1e-15);
        assert!((b.xi[(1, 0)] + h).abs() < 1e-15);
    }

    #[test]
    fn standardize_random_batch() {
        let spec = NoiseSpec::new(
            NoiseFamily::Gaussian,
            1.0,
            SymMatrix::new(Matrix::from_rows(&[vec![1.0, 0.3, 0.0], vec![0.3, 2.0, 0.1], vec![0.0, 0.1, 0.5]]).unwrap())
                .unwrap(),
        )
        .unwrap();
        let raw = spec.sample(200, &mut RandomSource::new(1, 2)).unwrap();
        let b = standardize(&raw).unwrap();
        let s = sum_outer(&b.xi);
        assert!(s.as_matrix().sub(&Matrix::identity(3)).frobenius_norm() < 1e-10);
        let again = standardize(&b.xi).unwrap();
        assert!(again.standardizer.as_matrix().sub(&Matrix::identity(3)).frobenius_norm() < 1e-8);
    }

    #[test]
    fn standardize_rejects_zeros() {
        assert!(standardize(&Matrix::zeros(5, 2)).is_err());
    }

    #[test]
    fn gamma_rademacher_and_gaussian() {
        let n = 100;
        let mut src = RandomSource::new(0, 0);
        let rad = NoiseSpec::new(NoiseFamily::Rademacher, 1.0, SymMatrix::identity(1)).unwrap();
        let g = gamma_expected(&rad, n, 0, &mut src).unwrap();
        assert!((g.value - (n as f64).powf(-0.5)).abs() < 1e-15);
        let raw = rad.sample(n, &mut src).unwrap();
        let batch = standardize(&raw).unwrap();
        assert!((gamma_third_moment(&batch) - (n as f64).powf(-0.5)).abs() < 1e-12);

        let gau = NoiseSpec::standard_gaussian(1);
        let g = gamma_expected(&gau, n, 0, &mut src).unwrap();
        let m3 = quadrature::gaussian_expectation(|z| z.abs().powi(3));
        assert!((g.value - m3 / (n as f64).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn gaussian_third_moment_formula() {
        let mut src = RandomSource::new(4, 4);
        for d in 1..=4 {
            let mut z = vec![0.0; d];
            let acc: MeanAcc = (0..200_000)
                .map(|_| {
                    src.fill_normal(&mut z);
                    norm(&z).powi(3)
                })
                .collect();
            let e = acc.estimate();
            assert!((e.value - gaussian_third_abs_moment(d)).abs() < 5.0 * e.stderr, "d={d}");
        }
    }

    #[test]
    fn laplace_gamma_mc_agrees_with_closed_form() {
        let spec = NoiseSpec::new(NoiseFamily::SubExponential { rate: 1.0 }, 1.0, SymMatrix::identity(1)).unwrap();
        let mut src = RandomSource::new(2, 2);
        let x = spec.sample(400_000, &mut src).unwrap();
        let acc: MeanAcc = x.as_slice().iter().map(|v| v.abs().powi(3)).collect();
        let e = acc.estimate();
        let closed = gamma_expected(&spec, 1, 0, &mut src).unwrap().value;
        assert!((e.value - closed).abs() < 5.0 * e.stderr);
    }

    #[test]
    fn exact_probabilities() {
        let mut src = RandomSource::new(0, 0);
        let hs = ConvexBody::half_space(vec![1.0, 0.0], 0.0).unwrap();
        assert_eq!(gaussian_convex_prob(&hs, ProbMode::Exact, &mut src).unwrap().value, 0.5);
        let ball = ConvexBody::ball(vec![0.0, 0.0], (2.0 * 2f64.ln()).sqrt()).unwrap();
        assert!((gaussian_convex_prob(&ball, ProbMode::Exact, &mut src).unwrap().value - 0.5).abs() < 1e-15);
        let off = ConvexBody::ball(vec![1.0, 0.0], 1.0).unwrap();
        assert!(gaussian_convex_prob(&off, ProbMode::Exact, &mut src).is_err());
        assert_eq!(gaussian_convex_prob(&ConvexBody::Empty { dim: 2 }, ProbMode::Exact, &mut src).unwrap().value, 0.0);
    }

    #[test]
    fn off_center_ball_mc_vs_quadrature() {
        // P(‖Z − (c, 0)‖ ≤ r) = ∫ φ(z₁) P(χ²₁ ≤ r² − (z₁ − c)²) dz₁ over |z₁ − c| ≤ r.
        let (c, r) = (0.8, 1.2);
        let oracle = quadrature::integrate(
            |z1| {
                let rem = r * r - (z1 - c) * (z1 - c);
                if rem <= 0.0 {
                    0.0
                } else {
                    special::norm_pdf(z1) * (2.0 * norm_cdf(rem.sqrt()) - 1.0)
                }
            },
            c - r,
            c + r,
            400,
        );
        let body = ConvexBody::ball(vec![c, 0.0], r).unwrap();
        let est = gaussian_convex_prob(&body, ProbMode::Mc { reps: 1_000_000 }, &mut RandomSource::new(9, 0)).unwrap();
        assert!((est.value - oracle).abs() < 3.0 * est.stderr, "{} vs {}", est.value, oracle);
    }

    #[test]
    fn exact_vs_mc_instances() {
        let mut src = RandomSource::new(33, 0);
        for k in 0..50 {
            let d = 1 + k % 3;
            let mut dir = vec![0.0; d];
            src.fill_normal(&mut dir);
            let body = match k % 3 {
                0 => ConvexBody::HalfSpace(crate::convex_geom::HalfSpace::normalized(&dir, src.normal()).unwrap()),
                1 => ConvexBody::ball(vec![0.0; d], 0.3 + 2.0 * src.uniform()).unwrap(),
                _ => {
                    let lo: Vec<f64> = (0..d).map(|_| -2.0 * src.uniform()).collect();
                    let hi: Vec<f64> = lo.iter().map(|l| l + 0.2 + 2.0 * src.uniform()).collect();
                    ConvexBody::cuboid(lo, hi).unwrap()
                }
            };
            let exact = gaussian_convex_prob(&body, ProbMode::Exact, &mut src).unwrap().value;
            let mc = gaussian_convex_prob(&body, ProbMode::Mc { reps: 20_000 }, &mut src).unwrap();
            let se = (exact * (1.0 - exact) / 20_000.0).sqrt();
            assert!((mc.value - exact).abs() <= 4.0 * se + 1e-12, "instance {k}");
        }
    }

    #[test]
    fn mean_acc_merge_matches_sequential() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let whole: MeanAcc = xs.iter().copied().collect();
        let mut a: MeanAcc = xs[..37].iter().copied().collect();
        let b: MeanAcc = xs[37..].iter().copied().collect();
        a.merge(&b);
        assert!((a.mean() - whole.mean()).abs() < 1e-15);
        assert!((a.variance() - whole.variance()).abs() < 1e-14);
    }
}
