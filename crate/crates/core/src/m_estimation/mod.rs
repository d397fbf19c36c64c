//! M- and Z-estimation: solving, the `T = W + D` decomposition, the remainder
//! majorants `Δ` and their leave-one-out versions.

pub mod models;
pub mod solver;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound_engine::{loo_subsample, Replication};
use crate::distance_lab::{rate_fit, RateFit};
use crate::linalg::{inv_sqrt_psd, norm, spectral_norm, LinalgError, Matrix, SymMatrix};
use crate::stats_core::quadrature::gl16_unit;
use crate::stats_core::{Estimate, MeanAcc, NoiseSpec, RandomSource, StatsError};

pub use models::{BuiltinModel, ModelCallbacks, SmoothHuber};
pub use solver::{mean_jacobian, mean_score, solve, SolveDiagnostics, DEFAULT_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MestError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("solver did not converge after {iterations} iterations: ‖grad‖ = {grad_norm:e} at {theta:?}")]
    NonConvergence { theta: Vec<f64>, grad_norm: f64, iterations: usize },
    #[error("need at least d = {d} rows, got {n}")]
    TooFewRows { n: usize, d: usize },
    #[error("model has no population score Ψ for this noise law")]
    NoPopulationScore,
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MSmooth,
    ZScore,
}

/// Condition constants; unset ones are realized from `Σ` and `V` where needed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConstants {
    pub mu: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EstimationModel {
    pub kind: ModelKind,
    pub callbacks: Arc<dyn ModelCallbacks>,
    pub theta_star: Vec<f64>,
    /// Observations are `X = θ* + noise`.
    pub noise: NoiseSpec,
    pub domain_diameter: f64,
    pub constants: ModelConstants,
}

/// JSON form of a builtin model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationModelConfig {
    pub model: BuiltinModel,
    #[serde(default)]
    pub kind: Option<ModelKind>,
    pub theta_star: Vec<f64>,
    pub noise: NoiseSpec,
    #[serde(default = "default_diameter")]
    pub domain_diameter: f64,
    #[serde(default)]
    pub constants: ModelConstants,
}

fn default_diameter() -> f64 {
    10.0
}

impl EstimationModelConfig {
    pub fn build(&self) -> Result<EstimationModel, MestError> {
        let kind = self.kind.unwrap_or(match self.model {
            BuiltinModel::LinearScore { .. } => ModelKind::ZScore,
            _ => ModelKind::MSmooth,
        });
        if kind == ModelKind::MSmooth && matches!(self.model, BuiltinModel::LinearScore { .. }) {
            return Err(MestError::Invalid("linear_score has no loss; use kind z_score".into()));
        }
        if let BuiltinModel::SmoothedHuber { kappa, .. } = self.model {
            if !(kappa > 0.0) {
                return Err(MestError::Invalid(format!("kappa must be positive, got {kappa}")));
            }
        }
        EstimationModel::new(
            kind,
            Arc::new(self.model.clone()),
            self.theta_star.clone(),
            self.noise.clone(),
            self.domain_diameter,
            self.constants.clone(),
        )
    }
}

impl EstimationModel {
    pub fn new(
        kind: ModelKind,
        callbacks: Arc<dyn ModelCallbacks>,
        theta_star: Vec<f64>,
        noise: NoiseSpec,
        domain_diameter: f64,
        constants: ModelConstants,
    ) -> Result<Self, MestError> {
        let d = callbacks.dim();
        if theta_star.len() != d || noise.dim() != d {
            return Err(MestError::Invalid(format!(
                "dimensions disagree: model {d}, theta_star {}, noise {}",
                theta_star.len(),
                noise.dim()
            )));
        }
        noise.validate()?;
        if !(domain_diameter > 0.0) {
            return Err(MestError::Invalid(format!("domain diameter {domain_diameter}")));
        }
        Ok(Self { kind, callbacks, theta_star, noise, domain_diameter, constants })
    }

    pub fn builtin(model: BuiltinModel, theta_star: Vec<f64>, noise: NoiseSpec) -> Result<Self, MestError> {
        EstimationModelConfig {
            model,
            kind: None,
            theta_star,
            noise,
            domain_diameter: default_diameter(),
            constants: ModelConstants::default(),
        }
        .build()
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn cb(&self) -> &dyn ModelCallbacks {
        self.callbacks.as_ref()
    }

    pub fn sample_data(&self, n: usize, source: &mut RandomSource) -> Result<Matrix, MestError> {
        let mut x = self.noise.sample(n, source)?;
        for i in 0..n {
            for (v, s) in x.row_mut(i).iter_mut().zip(&self.theta_star) {
                *v += s;
            }
        }
        Ok(x)
    }

    /// One fresh observation.
    pub fn draw_row(&self, source: &mut RandomSource) -> Result<Vec<f64>, MestError> {
        Ok(self.sample_data(1, source)?.row(0).to_vec())
    }

    pub fn solve(&self, data: &Matrix, init: &[f64], tol: f64) -> Result<(Vec<f64>, SolveDiagnostics), MestError> {
        solve(self.cb(), self.kind, data, init, tol)
    }

    /// `Ψ(θ)`, or an error when the model cannot provide it.
    pub fn population_score(&self, theta: &[f64]) -> Result<Vec<f64>, MestError> {
        self.cb().population_score(theta, &self.theta_star, &self.noise).ok_or(MestError::NoPopulationScore)
    }
}

/// Population or sample `Σ` and `V` (`Ψ̇₀` for Z-estimators) with the standardizer.
#[derive(Clone, Debug)]
pub struct SigmaV {
    pub sigma: SymMatrix,
    pub v: SymMatrix,
    pub sigma_inv_sqrt: SymMatrix,
    pub analytic: bool,
    pub lambda_min_sigma: f64,
    pub lambda_min_v: f64,
    /// The `λ` entering `Δ` as `λ^{-1/2}`: the configured constant or `λ_min(Σ)`.
    pub delta_lambda: f64,
    pub warnings: Vec<String>,
}

/// `Σ = E ξξᵀ` and `V = E m̈_{θ*}` (or `Ψ̇₀`), analytic for builtins and from `data` otherwise.
pub fn estimate_sigma_v(model: &EstimationModel, data: Option<&Matrix>) -> Result<SigmaV, MestError> {
    let d = model.dim();
    let (sigma, v, analytic) = match model.cb().population_sigma_v(&model.noise) {
        Some((s, v)) => (s, v, true),
        None => {
            let data = data.ok_or_else(|| MestError::Invalid("no analytic Σ, V and no data supplied".into()))?;
            let n = data.rows() as f64;
            let mut s = Matrix::zeros(d, d);
            let mut xi = vec![0.0; d];
            for i in 0..data.rows() {
                model.cb().score(&model.theta_star, data.row(i), &mut xi);
                s.add_scaled(1.0 / n, &Matrix::outer(&xi, &xi));
            }
            let v = mean_jacobian(model.cb(), data, &model.theta_star);
            (SymMatrix::from_symmetric_part(&s), SymMatrix::from_symmetric_part(&v), false)
        }
    };
    let sigma_inv_sqrt = inv_sqrt_psd(&sigma, None)?;
    let lambda_min_sigma = sigma.lambda_min();
    let lambda_min_v = v.lambda_min();
    let mut warnings = Vec::new();
    // The two pipelines name their eigenvalue floors the other way round.
    let (sigma_floor, v_floor, sigma_name, v_name) = match model.kind {
        ModelKind::MSmooth => (model.constants.lambda1, model.constants.lambda2, "lambda1", "lambda2"),
        ModelKind::ZScore => (model.constants.lambda2, model.constants.lambda1, "lambda2", "lambda1"),
    };
    if let Some(l) = sigma_floor {
        if lambda_min_sigma < l {
            warnings.push(format!("lambda_min(Sigma) = {lambda_min_sigma} is below {sigma_name} = {l}"));
        }
    }
    if let Some(l) = v_floor {
        if lambda_min_v < l {
            warnings.push(format!("lambda_min(V) = {lambda_min_v} is below {v_name} = {l}"));
        }
    }
    if !analytic {
        warnings.push("Sigma and V are sample estimates".into());
    }
    Ok(SigmaV {
        sigma,
        v,
        sigma_inv_sqrt,
        analytic,
        lambda_min_sigma,
        lambda_min_v,
        delta_lambda: sigma_floor.unwrap_or(lambda_min_sigma),
        warnings,
    })
}

#[derive(Clone, Debug)]
pub struct DecompositionResult {
    pub theta_hat: Vec<f64>,
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    /// `‖T − W − D‖`: solver slack plus quadrature error.
    pub residual: f64,
    pub delta: f64,
    pub h1: f64,
    pub h2: f64,
    pub sigma_hat: SymMatrix,
    pub v_hat: SymMatrix,
    /// Rows `(1/√n) Σ^{-1/2} ξᵢ`.
    pub xi_std: Matrix,
    pub solver: SolveDiagnostics,
}

impl DecompositionResult {
    pub fn xi_std_norm(&self, i: usize) -> f64 {
        norm(self.xi_std.row(i))
    }

    /// `Σᵢ ‖ξᵢ‖³` for the standardized influence terms.
    pub fn gamma(&self) -> f64 {
        (0..self.xi_std.rows()).map(|i| self.xi_std_norm(i).powi(3)).sum()
    }
}

// W and the standardized influence rows.
fn influence(model: &EstimationModel, data: &Matrix, sv: &SigmaV) -> (Vec<f64>, Matrix, SymMatrix) {
    let n = data.rows();
    let d = model.dim();
    let s = sv.sigma_inv_sqrt.as_matrix();
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let mut xi = vec![0.0; d];
    let mut xi_std = Matrix::zeros(n, d);
    let mut w = vec![0.0; d];
    let mut sig = Matrix::zeros(d, d);
    for i in 0..n {
        model.cb().score(&model.theta_star, data.row(i), &mut xi);
        sig.add_scaled(1.0 / n as f64, &Matrix::outer(&xi, &xi));
        let z = s.matvec(&xi);
        for k in 0..d {
            xi_std[(i, k)] = inv_sqrt_n * z[k];
            w[k] -= inv_sqrt_n * z[k];
        }
    }
    (w, xi_std, SymMatrix::from_symmetric_part(&sig))
}

/// `(Δ, H₁, H₂)` for an M-estimate.
pub fn delta_m(model: &EstimationModel, data: &Matrix, theta_hat: &[f64], sv: &SigmaV) -> (f64, f64, f64) {
    let n = data.rows() as f64;
    let hbar = mean_jacobian(model.cb(), data, &model.theta_star);
    let h1 = spectral_norm(&hbar.sub(sv.v.as_matrix()));
    let h2 = (0..data.rows()).map(|i| model.cb().hessian_envelope(data.row(i))).sum::<f64>() / n;
    let e = crate::linalg::dist(theta_hat, &model.theta_star);
    let delta = n.sqrt() * sv.delta_lambda.powf(-0.5) * (h1 * e + h2 * e * e);
    (delta, h1, h2)
}

/// `T = √n Σ^{-1/2} V (θ̂ − θ*)`, `W = −(1/√n) Σᵢ Σ^{-1/2} ξᵢ`, and `D` from the two-term remainder.
pub fn decompose(
    model: &EstimationModel,
    data: &Matrix,
    theta_hat: &[f64],
    sv: &SigmaV,
    solver: SolveDiagnostics,
) -> Result<DecompositionResult, MestError> {
    let n = data.rows();
    let d = model.dim();
    let sqrt_n = (n as f64).sqrt();
    let s = sv.sigma_inv_sqrt.as_matrix();
    let e: Vec<f64> = theta_hat.iter().zip(&model.theta_star).map(|(a, b)| a - b).collect();

    let (w, xi_std, sigma_hat) = influence(model, data, sv);
    let t = s.matvec(&sv.v.as_matrix().matvec(&e)).iter().map(|v| sqrt_n * v).collect::<Vec<_>>();

    let hbar = mean_jacobian(model.cb(), data, &model.theta_star);
    let first = hbar.sub(sv.v.as_matrix()).matvec(&e);
    // ∫₀¹ (m̈_{θ*+te} − m̈_{θ*}) dt · e by 16-point Gauss–Legendre.
    let mut incr = Matrix::zeros(d, d);
    for (tk, wk) in gl16_unit() {
        let theta_t: Vec<f64> = model.theta_star.iter().zip(&e).map(|(s, ei)| s + tk * ei).collect();
        incr.add_scaled(wk, &mean_jacobian(model.cb(), data, &theta_t).sub(&hbar));
    }
    let second = incr.matvec(&e);
    let inner: Vec<f64> = first.iter().zip(&second).map(|(a, b)| a + b).collect();
    let dvec: Vec<f64> = s.matvec(&inner).iter().map(|v| -sqrt_n * v).collect();

    let residual = (0..d).map(|k| (t[k] - w[k] - dvec[k]).powi(2)).sum::<f64>().sqrt();
    let (delta, h1, h2) = delta_m(model, data, theta_hat, sv);
    Ok(DecompositionResult {
        theta_hat: theta_hat.to_vec(),
        t,
        w,
        d: dvec,
        residual,
        delta,
        h1,
        h2,
        sigma_hat,
        v_hat: SymMatrix::from_symmetric_part(&hbar),
        xi_std,
        solver,
    })
}

/// How row `i` is replaced when building `Δ^{(i)}`.
pub enum Replacement<'a> {
    /// An independent draw from the model.
    Fresh(&'a mut RandomSource),
    /// The row itself; a no-op used to test the plumbing.
    SameRow,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub delta: f64,
    /// `(i, Δ^{(i)})` for every index that re-solved.
    pub entries: Vec<(usize, f64)>,
    /// Indices whose re-solve failed; excluded from `entries`.
    pub failed: Vec<usize>,
}

/// `Δ` and `Δ^{(i)}` over `indices`, re-solving warm-started from `θ̂`.
pub fn delta_loo(
    model: &EstimationModel,
    data: &Matrix,
    theta_hat: &[f64],
    sv: &SigmaV,
    indices: &[usize],
    mut replacement: Replacement<'_>,
    tol: f64,
) -> Result<LooResult, MestError> {
    let (delta, _, _) = delta_m(model, data, theta_hat, sv);
    let mut out = LooResult { delta, ..Default::default() };
    let mut work = data.clone();
    for &i in indices {
        let original = data.row(i).to_vec();
        if let Replacement::Fresh(src) = &mut replacement {
            let fresh = model.draw_row(src)?;
            work.row_mut(i).copy_from_slice(&fresh);
        }
        match model.solve(&work, theta_hat, tol) {
            Ok((th, _)) => out.entries.push((i, delta_m(model, &work, &th, sv).0)),
            Err(_) => out.failed.push(i),
        }
        work.row_mut(i).copy_from_slice(&original);
    }
    Ok(out)
}

/// One replication of the M-estimation pipeline.
#[derive(Clone, Debug)]
pub struct MestReplication {
    pub decomposition: DecompositionResult,
    pub coupling: Replication,
    pub loo_failures: usize,
}

/// Draws data, solves, decomposes and (when `loo_k` is set) builds the leave-one-out terms.
pub fn mest_replication(
    model: &EstimationModel,
    sv: &SigmaV,
    n: usize,
    source: &mut RandomSource,
    loo_k: Option<usize>,
    tol: f64,
) -> Result<MestReplication, MestError> {
    let data = model.sample_data(n, source)?;
    let (theta_hat, diag) = model.solve(&data, &model.theta_star, tol)?;
    let dec = decompose(model, &data, &theta_hat, sv, diag)?;
    let mut coupling = Replication {
        n,
        w_norm: norm(&dec.w),
        delta: dec.delta,
        loo: Vec::new(),
        gamma: dec.gamma(),
        outside_o: false,
    };
    let mut loo_failures = 0;
    if let Some(k) = loo_k {
        let mut idx_src = source.substream(1);
        let idx = loo_subsample(n, k, &mut idx_src);
        let mut rep_src = source.substream(2);
        let loo = delta_loo(model, &data, &theta_hat, sv, &idx, Replacement::Fresh(&mut rep_src), tol)?;
        loo_failures = loo.failed.len();
        coupling.loo = loo.entries.iter().map(|&(i, di)| (dec.xi_std_norm(i), di)).collect();
        // The subsample estimator rescales by n/k with k the number that succeeded.
    }
    Ok(MestReplication { decomposition: dec, coupling, loo_failures })
}

/// `δ_n = (D_Θ + 1) d n^{−(p−2)/(2p−2)}`.
pub fn delta_n(domain_diameter: f64, d: usize, n: usize, p: f64) -> f64 {
    (domain_diameter + 1.0) * d as f64 * (n as f64).powf(-(p - 2.0) / (2.0 * p - 2.0))
}

/// Fixed probe points in the `δ_n`-ball around `θ*`; prefixes are nested.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub points: Vec<Vec<f64>>,
}

impl ProbeSet {
    pub fn new(center: &[f64], radius: f64, count: usize, source: &mut RandomSource) -> Self {
        let d = center.len();
        let points = (0..count)
            .map(|_| {
                let mut u = vec![0.0; d];
                loop {
                    source.fill_normal(&mut u);
                    if norm(&u) > 0.0 {
                        break;
                    }
                }
                let r = radius * source.uniform().powf(1.0 / d as f64) / norm(&u);
                center.iter().zip(&u).map(|(c, ui)| c + r * ui).collect()
            })
            .collect();
        Self { points }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZDecomposition {
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    pub residual: f64,
    /// Whether `‖θ̂ − θ*‖ ≤ δ_n`.
    pub in_ball: bool,
}

/// Z-estimator split with `T = √n Σ^{-1/2} Ψ̇₀ (θ̂ − θ*)` (`sv.v` holds `Ψ̇₀`).
pub fn z_decompose(
    model: &EstimationModel,
    data: &Matrix,
    theta_hat: &[f64],
    sv: &SigmaV,
    delta_n: f64,
) -> Result<ZDecomposition, MestError> {
    let n = data.rows();
    let sqrt_n = (n as f64).sqrt();
    let s = sv.sigma_inv_sqrt.as_matrix();
    let e: Vec<f64> = theta_hat.iter().zip(&model.theta_star).map(|(a, b)| a - b).collect();
    let (w, _, _) = influence(model, data, sv);
    let t: Vec<f64> = s.matvec(&sv.v.as_matrix().matvec(&e)).iter().map(|v| sqrt_n * v).collect();
    let psi_hat = model.population_score(theta_hat)?;
    let psi_star = model.population_score(&model.theta_star)?;
    let emp_hat = mean_score(model.cb(), data, theta_hat);
    let emp_star = mean_score(model.cb(), data, &model.theta_star);
    let lin = sv.v.as_matrix().matvec(&e);
    let d = model.dim();
    let inner: Vec<f64> = (0..d)
        .map(|k| ((emp_hat[k] - psi_hat[k]) - (emp_star[k] - psi_star[k])) + (psi_hat[k] - psi_star[k] - lin[k]))
        .collect();
    let dvec: Vec<f64> = s.matvec(&inner).iter().map(|v| -sqrt_n * v).collect();
    let residual = (0..d).map(|k| (t[k] - w[k] - dvec[k]).powi(2)).sum::<f64>().sqrt();
    Ok(ZDecomposition { t, w, d: dvec, residual, in_ball: norm(&e) <= delta_n })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZDeltas {
    pub delta1: f64,
    pub delta2: f64,
}

/// `Δ₁` (lower-bounded by the first `k` probes plus `θ̂`) and `Δ₂`.
pub fn z_deltas(
    model: &EstimationModel,
    data: &Matrix,
    theta_hat: &[f64],
    sv: &SigmaV,
    delta_n: f64,
    probes: &ProbeSet,
    k: usize,
) -> Result<ZDeltas, MestError> {
    let n = data.rows() as f64;
    let scale = sv.delta_lambda.powf(-0.5) * n.sqrt();
    let star_emp = mean_score(model.cb(), data, &model.theta_star);
    let star_pop = model.population_score(&model.theta_star)?;
    let mut sup = 0.0f64;
    let e = crate::linalg::dist(theta_hat, &model.theta_star);
    let extra = if e <= delta_n { Some(theta_hat) } else { None };
    for theta in probes.points.iter().take(k).map(Vec::as_slice).chain(extra) {
        let emp = mean_score(model.cb(), data, theta);
        let pop = model.population_score(theta)?;
        let gap: f64 =
            (0..theta.len()).map(|j| ((emp[j] - pop[j]) - (star_emp[j] - star_pop[j])).powi(2)).sum::<f64>().sqrt();
        sup = sup.max(gap);
    }
    let c1 = model.constants.c1.or_else(|| model.cb().psi_curvature()).unwrap_or(0.0);
    let delta2 = if e <= delta_n { c1 * scale * e * e } else { 0.0 };
    Ok(ZDeltas { delta1: scale * sup, delta2 })
}

/// Z-estimator leave-one-out: `(Δ₁^{(i)}, Δ₂^{(i)})` for each index.
#[allow(clippy::too_many_arguments)]
pub fn z_delta_loo(
    model: &EstimationModel,
    data: &Matrix,
    theta_hat: &[f64],
    sv: &SigmaV,
    delta_n: f64,
    probes: &ProbeSet,
    k: usize,
    indices: &[usize],
    source: &mut RandomSource,
    tol: f64,
) -> Result<Vec<(usize, ZDeltas)>, MestError> {
    let mut work = data.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let original = data.row(i).to_vec();
        let fresh = model.draw_row(source)?;
        work.row_mut(i).copy_from_slice(&fresh);
        if let Ok((th, _)) = model.solve(&work, theta_hat, tol) {
            out.push((i, z_deltas(model, &work, &th, sv, delta_n, probes, k)?));
        }
        work.row_mut(i).copy_from_slice(&original);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaRateRow {
    pub n: usize,
    pub m2: Estimate,
    pub m4: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaRateTable {
    pub rows: Vec<ThetaRateRow>,
    pub slope_m2: RateFit,
    pub slope_m4: RateFit,
}

/// `‖θ̂_n − θ*‖` for each replication; replication `r` uses stream `r`.
pub fn theta_errors(model: &EstimationModel, n: usize, reps: usize, seed: u64) -> Result<Vec<f64>, MestError> {
    use rayon::prelude::*;
    (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut src = RandomSource::new(seed, r).substream(n as u64);
            let data = model.sample_data(n, &mut src)?;
            let (th, _) = model.solve(&data, &model.theta_star, DEFAULT_TOL)?;
            Ok(crate::linalg::dist(&th, &model.theta_star))
        })
        .collect()
}

/// `E‖θ̂_n − θ*‖^p`, `p ∈ {2, 4}`, over an `n` grid; replication `r` uses stream `r`.
pub fn rate_probe_theta(model: &EstimationModel, ns: &[usize], reps: usize, seed: u64) -> Result<ThetaRateTable, MestError> {
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let errs = theta_errors(model, n, reps, seed)?;
        let m2: MeanAcc = errs.iter().map(|e| e * e).collect();
        let m4: MeanAcc = errs.iter().map(|e| e.powi(4)).collect();
        rows.push(ThetaRateRow { n, m2: m2.estimate(), m4: m4.estimate() });
    }
    let fit = |f: fn(&ThetaRateRow) -> f64| {
        rate_fit(&rows.iter().map(|r| (r.n as f64, f(r))).collect::<Vec<_>>())
            .map_err(|e| MestError::Invalid(e.to_string()))
    };
    let slope_m2 = fit(|r| r.m2.value)?;
    let slope_m4 = fit(|r| r.m4.value)?;
    Ok(ThetaRateTable { rows, slope_m2, slope_m4 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats_core::NoiseFamily;

    fn huber(d: usize, kappa: f64) -> EstimationModel {
        EstimationModel::builtin(BuiltinModel::SmoothedHuber { dim: d, kappa }, vec![0.5; d], NoiseSpec::standard_gaussian(d))
            .unwrap()
    }

    fn quad(d: usize) -> EstimationModel {
        let cov = SymMatrix::new(Matrix::from_rows(&[vec![1.5, 0.4], vec![0.4, 0.8]]).unwrap()).unwrap();
        let noise = if d == 2 { NoiseSpec::new(NoiseFamily::Gaussian, 1.0, cov).unwrap() } else { NoiseSpec::standard_gaussian(d) };
        EstimationModel::builtin(BuiltinModel::QuadraticLocation { dim: d }, vec![1.0; d], noise).unwrap()
    }

    fn col_mean(x: &Matrix) -> Vec<f64> {
        (0..x.cols()).map(|j| x.column(j).iter().sum::<f64>() / x.rows() as f64).collect()
    }

    #[test]
    fn quadratic_solves_to_mean_in_one_step() {
        let m = quad(2);
        let data = m.sample_data(50, &mut RandomSource::new(1, 0)).unwrap();
        let (th, diag) = m.solve(&data, &[0.0, 0.0], DEFAULT_TOL).unwrap();
        assert_eq!(diag.iterations, 1);
        assert!(crate::linalg::dist(&th, &col_mean(&data)) < 1e-12);
    }

    #[test]
    fn linear_score_root_is_mean() {
        let m = EstimationModel::builtin(BuiltinModel::LinearScore { dim: 2 }, vec![0.0, 1.0], NoiseSpec::standard_gaussian(2))
            .unwrap();
        assert_eq!(m.kind, ModelKind::ZScore);
        let data = m.sample_data(40, &mut RandomSource::new(2, 0)).unwrap();
        let (th, _) = m.solve(&data, &[5.0, -5.0], DEFAULT_TOL).unwrap();
        assert!(crate::linalg::dist(&th, &col_mean(&data)) < 1e-12);
    }

    #[test]
    fn huber_matches_bisection_oracle() {
        let m = huber(1, 0.8);
        let data = m.sample_data(300, &mut RandomSource::new(3, 0)).unwrap();
        let (th, diag) = m.solve(&data, &[0.0], DEFAULT_TOL).unwrap();
        assert!(diag.grad_norm <= 1e-10);
        // Bisection on the monotone mean score.
        let h = SmoothHuber { kappa: 0.8 };
        let g = |t: f64| data.as_slice().iter().map(|x| h.d1(t - x)).sum::<f64>();
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((th[0] - 0.5 * (lo + hi)).abs() < 1e-8);
    }

    #[test]
    fn quadratic_decomposition_is_exact() {
        let m = quad(2);
        let sv = estimate_sigma_v(&m, None).unwrap();
        assert!(sv.analytic);
        for seed in 0..20 {
            let rep = mest_replication(&m, &sv, 64, &mut RandomSource::new(seed, 0), Some(8), DEFAULT_TOL).unwrap();
            let dec = &rep.decomposition;
            assert!(norm(&dec.d) <= 1e-12);
            assert_eq!((dec.h1, dec.h2, dec.delta), (0.0, 0.0, 0.0));
            assert!(rep.coupling.loo.iter().all(|&(_, di)| di == 0.0));
            assert!(dec.residual < 1e-12);
        }
    }

    #[test]
    fn huber_decomposition_bounds() {
        let m = huber(2, 1.0);
        let sv = estimate_sigma_v(&m, None).unwrap();
        for seed in 0..20 {
            let rep = mest_replication(&m, &sv, 128, &mut RandomSource::new(seed, 1), None, DEFAULT_TOL).unwrap();
            let dec = &rep.decomposition;
            assert!(dec.residual < 1e-10, "residual {}", dec.residual);
            assert!(norm(&dec.d) <= dec.delta + dec.residual);
        }
    }

    #[test]
    fn same_row_replacement_is_noop() {
        let m = huber(2, 1.0);
        let sv = estimate_sigma_v(&m, None).unwrap();
        let data = m.sample_data(64, &mut RandomSource::new(4, 0)).unwrap();
        let (th, _) = m.solve(&data, &m.theta_star, DEFAULT_TOL).unwrap();
        let loo = delta_loo(&m, &data, &th, &sv, &[0, 5, 63], Replacement::SameRow, DEFAULT_TOL).unwrap();
        for (_, di) in loo.entries {
            assert!((di - loo.delta).abs() <= 1e-12 * (1.0 + loo.delta));
        }
    }

    #[test]
    fn sigma_v_quadratic_and_linear() {
        let m = quad(2);
        let sv = estimate_sigma_v(&m, None).unwrap();
        assert_eq!(sv.v, SymMatrix::identity(2));
        assert_eq!(sv.sigma, m.noise.covariance);
        let lin = EstimationModel::builtin(BuiltinModel::LinearScore { dim: 3 }, vec![0.0; 3], NoiseSpec::standard_gaussian(3))
            .unwrap();
        assert_eq!(estimate_sigma_v(&lin, None).unwrap().v, SymMatrix::identity(3));
    }

    #[test]
    fn huber_v_quadrature_vs_sample() {
        let m = EstimationModel::builtin(BuiltinModel::SmoothedHuber { dim: 1, kappa: 1.0 }, vec![0.0], NoiseSpec::standard_gaussian(1))
            .unwrap();
        let sv = estimate_sigma_v(&m, None).unwrap();
        let data = m.sample_data(200_000, &mut RandomSource::new(5, 0)).unwrap();
        let h = SmoothHuber { kappa: 1.0 };
        let acc: MeanAcc = data.as_slice().iter().map(|x| h.d2(-x)).collect();
        let e = acc.estimate();
        assert!((e.value - sv.v[(0, 0)]).abs() < 3.0 * e.stderr);
    }

    #[test]
    fn sigma_threshold_warning() {
        let mut m = quad(2);
        m.constants.lambda1 = Some(10.0);
        let sv = estimate_sigma_v(&m, None).unwrap();
        assert!(sv.warnings.iter().any(|w| w.contains("lambda1")));
        assert_eq!(sv.delta_lambda, 10.0);
    }

    #[test]
    fn linear_score_z_path() {
        let m = EstimationModel::builtin(BuiltinModel::LinearScore { dim: 2 }, vec![0.0, 0.0], NoiseSpec::standard_gaussian(2))
            .unwrap();
        let sv = estimate_sigma_v(&m, None).unwrap();
        let mut src = RandomSource::new(6, 0);
        let data = m.sample_data(100, &mut src).unwrap();
        let (th, _) = m.solve(&data, &m.theta_star, DEFAULT_TOL).unwrap();
        let dn = delta_n(m.domain_diameter, 2, 100, 3.0);
        let probes = ProbeSet::new(&m.theta_star, dn, 64, &mut src);
        let zd = z_deltas(&m, &data, &th, &sv, dn, &probes, 64).unwrap();
        assert!(zd.delta1 < 1e-12);
        let dec = z_decompose(&m, &data, &th, &sv, dn).unwrap();
        assert!(dec.residual < 1e-10);
        assert!(norm(&dec.d) < 1e-12);
    }

    #[test]
    fn z_delta2_indicator() {
        let mut m = huber(1, 1.0);
        m.kind = ModelKind::ZScore;
        let sv = estimate_sigma_v(&m, None).unwrap();
        let mut src = RandomSource::new(7, 0);
        let data = m.sample_data(50, &mut src).unwrap();
        let (th, _) = m.solve(&data, &m.theta_star, DEFAULT_TOL).unwrap();
        let e = (th[0] - m.theta_star[0]).abs();
        let probes = ProbeSet::new(&m.theta_star, 0.5 * e, 8, &mut src);
        let zd = z_deltas(&m, &data, &th, &sv, 0.5 * e, &probes, 8).unwrap();
        assert_eq!(zd.delta2, 0.0);
    }

    #[test]
    fn z_delta1_monotone_in_probe_count() {
        let mut m = huber(2, 1.0);
        m.kind = ModelKind::ZScore;
        let sv = estimate_sigma_v(&m, None).unwrap();
        let mut src = RandomSource::new(8, 0);
        let data = m.sample_data(200, &mut src).unwrap();
        let (th, _) = m.solve(&data, &m.theta_star, DEFAULT_TOL).unwrap();
        let dn = delta_n(m.domain_diameter, 2, 200, 3.0);
        let probes = ProbeSet::new(&m.theta_star, dn, 256, &mut src);
        let mut last = 0.0;
        for k in [1, 4, 16, 64, 256] {
            let d1 = z_deltas(&m, &data, &th, &sv, dn, &probes, k).unwrap().delta1;
            assert!(d1 >= last);
            last = d1;
        }
        let dec = z_decompose(&m, &data, &th, &sv, dn).unwrap();
        assert!(dec.residual < 1e-9, "{}", dec.residual);
        let zd = z_deltas(&m, &data, &th, &sv, dn, &probes, 256).unwrap();
        // The sup includes θ̂ itself, so the bound on the first remainder term holds exactly.
        assert!(dec.in_ball);
        assert!(norm(&dec.d) <= zd.delta1 + zd.delta2 + 1e-9);
        let loo = z_delta_loo(&m, &data, &th, &sv, dn, &probes, 64, &[0, 1], &mut src, DEFAULT_TOL).unwrap();
        assert_eq!(loo.len(), 2);
    }

    #[test]
    fn rate_probe_quadratic() {
        let m = quad(1);
        let t = rate_probe_theta(&m, &[32, 64, 128, 256], 2000, 1).unwrap();
        assert!((t.slope_m2.slope + 1.0).abs() < 0.1);
        assert!((t.slope_m4.slope + 2.0).abs() < 0.15);
    }
}
