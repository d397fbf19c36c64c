//! Noise families used for observations and SGD gradient noise.

use serde::{Deserialize, Serialize};

use super::rng::RandomSource;
use super::StatsError;
use crate::linalg::{cholesky, Matrix, SymMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseFamily {
    /// `scale · L z` with `z` standard normal and `L Lᵀ = covariance`.
    Gaussian,
    /// `scale · L ε` with iid signs.
    Rademacher,
    /// `scale · u` with `u` uniform on the unit sphere; the covariance field is ignored.
    UniformSphere,
    /// `scale · L e` with `e` iid Laplace normalized to unit variance.
    ///
    /// `rate` is the exponential rate of the raw components before that
    /// normalization; it is validated but cancels out of the law.
    SubExponential { rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    #[serde(default = "one")]
    pub scale: f64,
    pub covariance: SymMatrix,
}

fn one() -> f64 {
    1.0
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, scale: f64, covariance: SymMatrix) -> Result<Self, StatsError> {
        let spec = Self { family, scale, covariance };
        spec.validate()?;
        Ok(spec)
    }

    pub fn standard_gaussian(d: usize) -> Self {
        Self { family: NoiseFamily::Gaussian, scale: 1.0, covariance: SymMatrix::identity(d) }
    }

    pub fn dim(&self) -> usize {
        self.covariance.dim()
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(StatsError::InvalidSpec(format!("noise scale {}", self.scale)));
        }
        if let NoiseFamily::SubExponential { rate } = self.family {
            if !(rate > 0.0) || !rate.is_finite() {
                return Err(StatsError::InvalidSpec(format!("sub-exponential rate {rate} must be positive")));
            }
        }
        cholesky(&self.covariance, None)?;
        Ok(())
    }

    fn factor(&self) -> Result<Matrix, StatsError> {
        Ok(cholesky(&self.covariance, None)?)
    }

    /// `E ξ ξᵀ` of one draw.
    pub fn second_moment(&self) -> SymMatrix {
        let s2 = self.scale * self.scale;
        match self.family {
            NoiseFamily::UniformSphere => SymMatrix::identity(self.dim()).scale(s2 / self.dim() as f64),
            _ => self.covariance.scale(s2),
        }
    }

    /// `E‖ξ‖⁴` of one draw.
    pub fn fourth_moment_norm(&self) -> f64 {
        let s4 = self.scale.powi(4);
        if let NoiseFamily::UniformSphere = self.family {
            return s4;
        }
        // ‖L z‖² = zᵀ M z with M = Lᵀ L; for iid unit-variance z with kurtosis κ,
        // E(zᵀMz)² = (tr M)² + 2 tr(M²) + (κ − 3) Σ M_ii².
        let l = self.factor().expect("validated covariance");
        let m = l.transpose().matmul(&l);
        let tr = m.trace();
        let tr2: f64 = m.as_slice().iter().map(|v| v * v).sum();
        let diag2: f64 = (0..m.rows()).map(|i| m[(i, i)] * m[(i, i)]).sum();
        let kurtosis = match self.family {
            NoiseFamily::Gaussian => 3.0,
            NoiseFamily::Rademacher => 1.0,
            NoiseFamily::SubExponential { .. } => 6.0,
            NoiseFamily::UniformSphere => unreachable!(),
        };
        s4 * (tr * tr + 2.0 * tr2 + (kurtosis - 3.0) * diag2)
    }

    /// Draws `n` rows.
    pub fn sample(&self, n: usize, source: &mut RandomSource) -> Result<Matrix, StatsError> {
        let d = self.dim();
        let l = self.factor()?;
        let mut out = Matrix::zeros(n, d);
        let mut z = vec![0.0; d];
        for i in 0..n {
            self.draw_with(&l, source, &mut z, out.row_mut(i));
        }
        Ok(out)
    }

    /// One draw into `out`, reusing a precomputed factor.
    pub fn draw_with(&self, l: &Matrix, source: &mut RandomSource, z: &mut [f64], out: &mut [f64]) {
        let d = z.len();
        match self.family {
            NoiseFamily::Gaussian => source.fill_normal(z),
            NoiseFamily::Rademacher => z.iter_mut().for_each(|v| *v = source.rademacher()),
            NoiseFamily::SubExponential { rate } => {
                // Laplace(1/rate) has variance 2/rate²; normalize to unit variance.
                let b = 1.0 / rate;
                let norm = rate / 2f64.sqrt();
                z.iter_mut().for_each(|v| *v = source.laplace(b) * norm);
            }
            NoiseFamily::UniformSphere => {
                loop {
                    source.fill_normal(z);
                    let r = crate::linalg::norm(z);
                    if r > 0.0 {
                        for (o, zi) in out.iter_mut().zip(z.iter()) {
                            *o = self.scale * zi / r;
                        }
                        return;
                    }
                }
            }
        }
        for i in 0..d {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += l[(i, k)] * z[k];
            }
            out[i] = self.scale * acc;
        }
    }

    /// Cholesky factor of the covariance, for repeated [`NoiseSpec::draw_with`] calls.
    pub fn sampler(&self) -> Result<NoiseSampler<'_>, StatsError> {
        Ok(NoiseSampler { spec: self, l: self.factor()?, z: vec![0.0; self.dim()] })
    }
}

/// A spec bound to its covariance factor and scratch space.
pub struct NoiseSampler<'a> {
    spec: &'a NoiseSpec,
    l: Matrix,
    z: Vec<f64>,
}

impl NoiseSampler<'_> {
    pub fn draw(&mut self, source: &mut RandomSource, out: &mut [f64]) {
        self.spec.draw_with(&self.l, source, &mut self.z, out);
    }
}
