//! Averaged SGD: problems, step-size schedules and simulated trajectories,
//! plus the `Q_i`/`Σ_n` machinery and the `T_n = W_n + D_n` split.

pub mod decompose;
pub mod io;
pub mod probes;
pub mod qsigma;

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{sub, LinalgError, Matrix, SymMatrix};
use crate::m_estimation::{estimate_sigma_v, EstimationModel, MestError};
use crate::stats_core::{NoiseSpec, RandomSource, StatsError};

pub use decompose::{
    asgd_replication, coupled_path, decompose, deltas_and_loo, AsgdDecomposition, AsgdDeltas, AsgdReplication,
    CoupledPath, LooEntry,
};
pub use io::{read_trajectory, write_trajectory, TrajectoryFile};
pub use probes::{coupling_decay, iterate_errors, moment_probe, phi, CouplingDecayTable, MomentRow, MomentTable};
pub use qsigma::{compute_q, compute_sigma_n, QFactors, QSigma};

#[derive(Debug, Error)]
pub enum AsgdError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("iterate became non-finite at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Mest(#[from] MestError),
    #[error("trajectory file: {0}")]
    Io(#[from] std::io::Error),
}

/// Step sizes `ℓ_k = ℓ₀ k^{−α}`; `ℓ_0` is taken to be `ℓ₀`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub ell0: f64,
    pub alpha: f64,
    pub n: usize,
}

impl Schedule {
    pub fn new(ell0: f64, alpha: f64, n: usize) -> Result<Self, AsgdError> {
        let s = Self { ell0, alpha, n };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), AsgdError> {
        if !(self.alpha > 0.5 && self.alpha <= 1.0) {
            return Err(AsgdError::InvalidSchedule(format!(
                "alpha must lie in (1/2, 1], got {}",
                self.alpha
            )));
        }
        if !(self.ell0 > 0.0 && self.ell0.is_finite()) {
            return Err(AsgdError::InvalidSchedule(format!("ell0 must be positive, got {}", self.ell0)));
        }
        if self.n < 2 {
            return Err(AsgdError::InvalidSchedule(format!("need n >= 2, got {}", self.n)));
        }
        Ok(())
    }

    pub fn ell(&self, k: usize) -> f64 {
        if k == 0 {
            self.ell0
        } else {
            self.ell0 * (k as f64).powf(-self.alpha)
        }
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..*self }
    }
}

/// `f` through its gradient and Hessian.
pub trait Objective: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn gradient(&self, theta: &[f64], out: &mut [f64]);
    fn hessian(&self, theta: &[f64]) -> SymMatrix;
}

/// `f(θ) = ½ (θ−θ*)ᵀ A (θ−θ*)`.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    pub a: SymMatrix,
    pub theta_star: Vec<f64>,
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        self.a.as_matrix().matvec_into(&sub(theta, &self.theta_star), out);
    }

    fn hessian(&self, _theta: &[f64]) -> SymMatrix {
        self.a.clone()
    }
}

/// `f(θ) = Σⱼ μuⱼ²/2 + w(log(1+e^{uⱼ}) − uⱼ/2 − log 2)` with `u = θ − θ*`.
#[derive(Clone, Debug)]
pub struct LogisticLikeObjective {
    pub mu: f64,
    pub w: f64,
    pub theta_star: Vec<f64>,
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl Objective for LogisticLikeObjective {
    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        for ((o, t), s) in out.iter_mut().zip(theta).zip(&self.theta_star) {
            let u = t - s;
            *o = self.mu * u + self.w * (sigmoid(u) - 0.5);
        }
    }

    fn hessian(&self, theta: &[f64]) -> SymMatrix {
        let diag: Vec<f64> = theta
            .iter()
            .zip(&self.theta_star)
            .map(|(t, s)| {
                let p = sigmoid(t - s);
                self.mu + self.w * p * (1.0 - p)
            })
            .collect();
        SymMatrix::from_diag(&diag)
    }
}

/// `f = M`, the population risk of an M-estimation model.
#[derive(Clone, Debug)]
pub struct ModelObjective {
    pub model: EstimationModel,
}

impl Objective for ModelObjective {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        let g = self.model.population_score(theta).expect("checked when the problem was built");
        out.copy_from_slice(&g);
    }

    fn hessian(&self, theta: &[f64]) -> SymMatrix {
        let d = self.dim();
        let h = 1e-5;
        let mut m = Matrix::zeros(d, d);
        let (mut gp, mut gm) = (vec![0.0; d], vec![0.0; d]);
        for j in 0..d {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[j] += h;
            tm[j] -= h;
            self.gradient(&tp, &mut gp);
            self.gradient(&tm, &mut gm);
            for i in 0..d {
                m[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        SymMatrix::from_symmetric_part(&m)
    }
}

/// The state-dependent part `η = g(θ, ξ)` of the noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Multiplicative {
    #[default]
    None,
    /// `g(θ, ξ) = c₁ sign(ξ₁)(θ − θ*)`: mean zero for symmetric `ξ`, `c₁`-Lipschitz, zero at `θ*`.
    SignScaled { c1: f64 },
}

impl Multiplicative {
    pub fn c1(&self) -> f64 {
        match self {
            Multiplicative::None => 0.0,
            Multiplicative::SignScaled { c1 } => *c1,
        }
    }

    pub fn apply(&self, theta: &[f64], theta_star: &[f64], xi: &[f64], out: &mut [f64]) {
        match self {
            Multiplicative::None => out.iter_mut().for_each(|v| *v = 0.0),
            Multiplicative::SignScaled { c1 } => {
                let s = if xi[0] > 0.0 {
                    1.0
                } else if xi[0] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                for ((o, t), ts) in out.iter_mut().zip(theta).zip(theta_star) {
                    *o = c1 * s * (t - ts);
                }
            }
        }
    }
}

/// Where the per-step raw draw comes from and how it splits into `(ξ, η)`.
#[derive(Clone, Debug)]
pub enum Innovation {
    /// Raw draw is `ξ`; `η = g(θ, ξ)`.
    Additive { noise: NoiseSpec, multiplicative: Multiplicative },
    /// Raw draw is an observation `X`; `ξ = ṁ_{θ*}(X) − ∇M(θ*)`,
    /// `η = ṁ_θ(X) − ṁ_{θ*}(X) − ∇M(θ) + ∇M(θ*)`.
    Stream { model: EstimationModel, grad_star: Vec<f64> },
}

/// `θ₀ = θ* + offset + scale·Z` with `Z` standard normal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSpec {
    /// Defaults to the all-ones vector.
    pub offset: Option<Vec<f64>>,
    pub scale: f64,
}

impl InitSpec {
    pub fn offset(&self, d: usize) -> Vec<f64> {
        self.offset.clone().unwrap_or_else(|| vec![1.0; d])
    }

    /// `τ₀ = (E‖θ₀ − θ*‖⁴)^{1/4}`.
    pub fn tau0(&self, d: usize) -> f64 {
        let o2: f64 = self.offset(d).iter().map(|v| v * v).sum();
        let s2 = self.scale * self.scale;
        let df = d as f64;
        ((o2 + s2 * df).powi(2) + 2.0 * s2 * s2 * df + 4.0 * s2 * o2).powf(0.25)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConstants {
    pub mu: f64,
    pub l: f64,
    pub c1: f64,
    pub c2: f64,
    /// `None` means `β = ∞`.
    pub beta: Option<f64>,
}

impl SgdConstants {
    /// `L₁ = max{c₂, 2L/β}`.
    pub fn l1(&self) -> f64 {
        match self.beta {
            Some(b) => self.c2.max(2.0 * self.l / b),
            None => self.c2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgdProblem {
    pub objective: Arc<dyn Objective>,
    pub theta_star: Vec<f64>,
    /// `G = ∇²f(θ*)`.
    pub g: SymMatrix,
    pub constants: SgdConstants,
    pub innovation: Innovation,
    /// `Σᵢ = E ξᵢξᵢᵀ`, the same for every step.
    pub sigma_xi: SymMatrix,
    pub init: InitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    Quadratic { a: SymMatrix },
    LogisticLike { mu: f64, w: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantOverrides {
    pub mu: Option<f64>,
    pub l: Option<f64>,
    pub c2: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdProblemConfig {
    pub objective: ObjectiveConfig,
    pub theta_star: Vec<f64>,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub multiplicative: Multiplicative,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub constants: ConstantOverrides,
}

impl SgdProblemConfig {
    pub fn build(&self) -> Result<SgdProblem, AsgdError> {
        let d = self.theta_star.len();
        let (objective, g, mut c): (Arc<dyn Objective>, SymMatrix, SgdConstants) = match &self.objective {
            ObjectiveConfig::Quadratic { a } => {
                if a.dim() != d {
                    return Err(AsgdError::InvalidProblem(format!("A is {}x{}, theta_star has {d}", a.dim(), a.dim())));
                }
                let c = SgdConstants { mu: a.lambda_min(), l: a.lambda_max(), c1: 0.0, c2: 0.0, beta: None };
                (Arc::new(QuadraticObjective { a: a.clone(), theta_star: self.theta_star.clone() }), a.clone(), c)
            }
            ObjectiveConfig::LogisticLike { mu, w } => {
                if !(*mu > 0.0 && *w >= 0.0) {
                    return Err(AsgdError::InvalidProblem(format!("need mu > 0 and w >= 0, got {mu}, {w}")));
                }
                let obj = LogisticLikeObjective { mu: *mu, w: *w, theta_star: self.theta_star.clone() };
                let g = obj.hessian(&self.theta_star);
                // sup|σ''| = 1/(6√3) < 0.1.
                let c = SgdConstants { mu: *mu, l: mu + w / 4.0, c1: 0.0, c2: 0.1 * w, beta: None };
                (Arc::new(obj), g, c)
            }
        };
        c.c1 = self.multiplicative.c1();
        if let Some(v) = self.constants.mu {
            c.mu = v;
        }
        if let Some(v) = self.constants.l {
            c.l = v;
        }
        if let Some(v) = self.constants.c2 {
            c.c2 = v;
        }
        if self.constants.beta.is_some() {
            c.beta = self.constants.beta;
        }
        SgdProblem::new(
            objective,
            self.theta_star.clone(),
            g,
            c,
            Innovation::Additive { noise: self.noise.clone(), multiplicative: self.multiplicative },
            self.init.clone(),
        )
    }
}

impl SgdProblem {
    pub fn new(
        objective: Arc<dyn Objective>,
        theta_star: Vec<f64>,
        g: SymMatrix,
        constants: SgdConstants,
        innovation: Innovation,
        init: InitSpec,
    ) -> Result<Self, AsgdError> {
        let d = theta_star.len();
        if objective.dim() != d || g.dim() != d {
            return Err(AsgdError::InvalidProblem("dimension mismatch".into()));
        }
        if !(constants.mu > 0.0 && constants.mu <= constants.l) {
            return Err(AsgdError::InvalidProblem(format!(
                "need 0 < mu <= L, got mu = {}, L = {}",
                constants.mu, constants.l
            )));
        }
        if init.offset(d).len() != d || !(init.scale >= 0.0) {
            return Err(AsgdError::InvalidProblem("init offset must have length d and scale >= 0".into()));
        }
        let sigma_xi = match &innovation {
            Innovation::Additive { noise, multiplicative } => {
                if noise.dim() != d {
                    return Err(AsgdError::InvalidProblem("noise dimension mismatch".into()));
                }
                noise.validate()?;
                if let Multiplicative::SignScaled { c1 } = multiplicative {
                    if !(*c1 >= 0.0) {
                        return Err(AsgdError::InvalidProblem(format!("c1 must be nonnegative, got {c1}")));
                    }
                }
                noise.second_moment()
            }
            Innovation::Stream { model, .. } => estimate_sigma_v(model, None)?.sigma,
        };
        Ok(Self { objective, theta_star, g, constants, innovation, sigma_xi, init })
    }

    /// Quadratic problem with Gaussian noise.
    pub fn quadratic(a: SymMatrix, theta_star: Vec<f64>, noise: NoiseSpec) -> Result<Self, AsgdError> {
        SgdProblemConfig {
            objective: ObjectiveConfig::Quadratic { a },
            theta_star,
            noise,
            multiplicative: Multiplicative::None,
            init: InitSpec::default(),
            constants: ConstantOverrides::default(),
        }
        .build()
    }

    /// `f = M` for a model whose population score is available; `c₁ = 2L_F`.
    pub fn from_model(model: EstimationModel, init: InitSpec) -> Result<Self, AsgdError> {
        let sv = estimate_sigma_v(&model, None)?;
        let grad_star = model.population_score(&model.theta_star)?;
        let cb = model.cb();
        let lf = cb.score_lipschitz();
        let mu = model.constants.mu.unwrap_or(sv.lambda_min_v);
        let c2 = model.constants.c2.unwrap_or(2.0 * cb.psi_curvature().unwrap_or(0.0));
        let constants = SgdConstants { mu, l: lf.max(mu), c1: 2.0 * lf, c2, beta: None };
        let theta_star = model.theta_star.clone();
        Self::new(
            Arc::new(ModelObjective { model: model.clone() }),
            theta_star,
            sv.v,
            constants,
            Innovation::Stream { model, grad_star },
            init,
        )
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    /// `n` raw per-step draws (noise vectors or observations).
    pub fn draw_raw(&self, n: usize, source: &mut RandomSource) -> Result<Matrix, AsgdError> {
        Ok(match &self.innovation {
            Innovation::Additive { noise, .. } => noise.sample(n, source)?,
            Innovation::Stream { model, .. } => model.sample_data(n, source)?,
        })
    }

    /// `(ξ, η)` for a step taken from `θ` with raw draw `raw`.
    pub fn split_noise(&self, theta: &[f64], raw: &[f64], xi: &mut [f64], eta: &mut [f64]) {
        match &self.innovation {
            Innovation::Additive { multiplicative, .. } => {
                xi.copy_from_slice(raw);
                multiplicative.apply(theta, &self.theta_star, raw, eta);
            }
            Innovation::Stream { model, grad_star } => {
                let cb = model.cb();
                cb.score(&self.theta_star, raw, xi);
                xi.iter_mut().zip(grad_star).for_each(|(x, g)| *x -= g);
                cb.score_increment(theta, &self.theta_star, raw, eta);
                let mut grad = vec![0.0; theta.len()];
                self.objective.gradient(theta, &mut grad);
                for ((e, g), gs) in eta.iter_mut().zip(&grad).zip(grad_star) {
                    *e -= g - gs;
                }
            }
        }
    }

    /// `θ_k = θ_{k−1} − ℓ_k(∇f(θ_{k−1}) + ξ_k + η_k)`, returning `(θ_k, ξ_k, η_k)` in the out slices.
    pub fn step(&self, theta: &[f64], raw: &[f64], ell: f64, next: &mut [f64], xi: &mut [f64], eta: &mut [f64]) {
        self.split_noise(theta, raw, xi, eta);
        let mut grad = vec![0.0; theta.len()];
        self.objective.gradient(theta, &mut grad);
        for k in 0..theta.len() {
            next[k] = theta[k] - ell * (grad[k] + xi[k] + eta[k]);
        }
    }

    /// `H(θ) = ∇f(θ) − G(θ − θ*)`.
    pub fn h_remainder(&self, theta: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; theta.len()];
        self.objective.gradient(theta, &mut grad);
        let lin = self.g.as_matrix().matvec(&sub(theta, &self.theta_star));
        grad.iter().zip(&lin).map(|(a, b)| a - b).collect()
    }

    /// `‖ξ‖₄`, analytic for additive noise.
    pub fn tau(&self) -> Option<f64> {
        match &self.innovation {
            Innovation::Additive { noise, .. } => Some(noise.fourth_moment_norm().powf(0.25)),
            Innovation::Stream { .. } => None,
        }
    }

    /// Warnings for a schedule, e.g. `n` below `4{(2Lℓ₀)^α + 1}`.
    pub fn schedule_warnings(&self, schedule: &Schedule) -> Vec<String> {
        let mut w = Vec::new();
        let guard = 4.0 * ((2.0 * self.constants.l * schedule.ell0).powf(schedule.alpha) + 1.0);
        if (schedule.n as f64) < guard {
            w.push(format!("n = {} is below 4((2 L ell0)^alpha + 1) = {guard:.1}", schedule.n));
        }
        if schedule.alpha == 1.0 && schedule.ell0 * self.constants.mu < 1.0 {
            w.push(format!("alpha = 1 with ell0*mu = {} < 1 converges slowly", schedule.ell0 * self.constants.mu));
        }
        w
    }

    fn initial_point(&self, source: &mut RandomSource) -> Vec<f64> {
        let d = self.dim();
        let off = self.init.offset(d);
        let mut z = vec![0.0; d];
        if self.init.scale > 0.0 {
            source.fill_normal(&mut z);
        }
        (0..d).map(|k| self.theta_star[k] + off[k] + self.init.scale * z[k]).collect()
    }
}

/// Iterates `θ_0..θ_n` with the per-step noise records (row `k−1` is step `k`).
#[derive(Clone, Debug)]
pub struct SgdTrajectory {
    pub thetas: Matrix,
    /// `(1/n) Σ_{i=0}^{n−1} θᵢ`.
    pub theta_bar: Vec<f64>,
    pub raw: Matrix,
    pub xi: Matrix,
    pub eta: Matrix,
    pub schedule: Schedule,
}

impl SgdTrajectory {
    pub fn n(&self) -> usize {
        self.schedule.n
    }

    pub fn theta(&self, k: usize) -> &[f64] {
        self.thetas.row(k)
    }

    /// Largest `|θ_k − θ_{k−1} + ℓ_k(∇f + ξ_k + η_k)|` recomputed from the records.
    pub fn recursion_residual(&self, problem: &SgdProblem) -> f64 {
        let d = problem.dim();
        let mut grad = vec![0.0; d];
        let mut worst = 0.0f64;
        for k in 1..=self.n() {
            let prev = self.theta(k - 1);
            problem.objective.gradient(prev, &mut grad);
            let ell = self.schedule.ell(k);
            for j in 0..d {
                let next = prev[j] - ell * (grad[j] + self.xi[(k - 1, j)] + self.eta[(k - 1, j)]);
                worst = worst.max((self.thetas[(k, j)] - next).abs());
            }
        }
        worst
    }
}

fn average_prefix(thetas: &Matrix, n: usize) -> Vec<f64> {
    let d = thetas.cols();
    let mut bar = vec![0.0; d];
    for i in 0..n {
        for (b, v) in bar.iter_mut().zip(thetas.row(i)) {
            *b += v;
        }
    }
    bar.iter_mut().for_each(|b| *b /= n as f64);
    bar
}

/// Runs the recursion from given raw draws and starting point.
pub fn run_with(problem: &SgdProblem, schedule: &Schedule, theta0: &[f64], raw: Matrix) -> Result<SgdTrajectory, AsgdError> {
    schedule.validate()?;
    let n = schedule.n;
    let d = problem.dim();
    if raw.rows() != n || raw.cols() != d {
        return Err(AsgdError::InvalidProblem(format!("raw draws are {}x{}, expected {n}x{d}", raw.rows(), raw.cols())));
    }
    let mut thetas = Matrix::zeros(n + 1, d);
    thetas.row_mut(0).copy_from_slice(theta0);
    let mut xi = Matrix::zeros(n, d);
    let mut eta = Matrix::zeros(n, d);
    let mut next = vec![0.0; d];
    let (mut x, mut e) = (vec![0.0; d], vec![0.0; d]);
    for k in 1..=n {
        problem.step(thetas.row(k - 1), raw.row(k - 1), schedule.ell(k), &mut next, &mut x, &mut e);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(AsgdError::Divergence { step: k });
        }
        thetas.row_mut(k).copy_from_slice(&next);
        xi.row_mut(k - 1).copy_from_slice(&x);
        eta.row_mut(k - 1).copy_from_slice(&e);
    }
    let theta_bar = average_prefix(&thetas, n);
    Ok(SgdTrajectory { thetas, theta_bar, raw, xi, eta, schedule: *schedule })
}

const INIT_STREAM: u64 = 0x1417;

/// Simulates `n` steps; `θ₀` comes from a substream so raw draws do not depend on the init law.
pub fn run(problem: &SgdProblem, schedule: &Schedule, source: &mut RandomSource) -> Result<SgdTrajectory, AsgdError> {
    schedule.validate()?;
    let theta0 = problem.initial_point(&mut source.substream(INIT_STREAM));
    let raw = problem.draw_raw(schedule.n, source)?;
    run_with(problem, schedule, &theta0, raw)
}

/// `θ_k = θ_{k−1} − ℓ_k ṁ_{θ_{k−1}}(X_k)` on a stream drawn from the model, stored as `∇M + ξ + η`.
pub fn streaming_m_estimation(
    model: &EstimationModel,
    schedule: &Schedule,
    init: InitSpec,
    source: &mut RandomSource,
) -> Result<(SgdProblem, SgdTrajectory), AsgdError> {
    let problem = SgdProblem::from_model(model.clone(), init)?;
    let traj = run(&problem, schedule, source)?;
    Ok((problem, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dist, norm};
    use crate::m_estimation::BuiltinModel;
    use crate::stats_core::NoiseFamily;

    pub(crate) fn canonical(d: usize) -> SgdProblem {
        let diag: Vec<f64> = (0..d).map(|k| 1.0 + k as f64 / (d.max(2) - 1) as f64).collect();
        SgdProblem::quadratic(SymMatrix::from_diag(&diag), vec![0.0; d], NoiseSpec::standard_gaussian(d)).unwrap()
    }

    #[test]
    fn schedule_rejects_alpha() {
        let e = Schedule::new(1.0, 0.4, 10).unwrap_err().to_string();
        assert!(e.contains("(1/2, 1]"));
        assert!(Schedule::new(1.0, 1.0, 10).is_ok());
        assert!(Schedule::new(1.0, 0.5, 10).is_err());
    }

    #[test]
    fn one_contraction_step() {
        let p = SgdProblem::quadratic(SymMatrix::identity(1), vec![2.0], NoiseSpec::standard_gaussian(1)).unwrap();
        let s = Schedule::new(0.5, 1.0, 2).unwrap();
        let t = run_with(&p, &s, &[5.0], Matrix::zeros(2, 1)).unwrap();
        assert_eq!(t.theta(1)[0] - 2.0, 0.5 * 3.0);
    }

    #[test]
    fn noiseless_product_oracle() {
        let p = canonical(2);
        let s = Schedule::new(0.8, 0.75, 50).unwrap();
        let t = run_with(&p, &s, &[1.0, -1.0], Matrix::zeros(50, 2)).unwrap();
        let lam = [1.0, 2.0];
        for (j, l) in lam.iter().enumerate() {
            let prod: f64 = (1..=50).map(|k| 1.0 - s.ell(k) * l).product();
            let start = if j == 0 { 1.0 } else { -1.0 };
            assert!((t.theta(50)[j] - start * prod).abs() < 1e-14);
        }
    }

    #[test]
    fn recursion_and_average_exact() {
        let p = canonical(3);
        let s = Schedule::new(1.0, 0.6, 300).unwrap();
        let t = run(&p, &s, &mut RandomSource::new(1, 0)).unwrap();
        assert_eq!(t.recursion_residual(&p), 0.0);
        assert!(t.eta.as_slice().iter().all(|&v| v == 0.0));
        let bar = average_prefix(&t.thetas, 300);
        assert!(dist(&bar, &t.theta_bar) <= 1e-12);
    }

    #[test]
    fn run_is_deterministic() {
        let p = canonical(2);
        let s = Schedule::new(1.0, 0.75, 100).unwrap();
        let a = run(&p, &s, &mut RandomSource::new(9, 3)).unwrap();
        let b = run(&p, &s, &mut RandomSource::new(9, 3)).unwrap();
        assert_eq!(a.thetas, b.thetas);
    }

    #[test]
    fn divergence_is_reported() {
        let p = canonical(1);
        let s = Schedule::new(1e200, 1.0, 10).unwrap();
        match run(&p, &s, &mut RandomSource::new(1, 0)) {
            Err(AsgdError::Divergence { step }) => assert!(step >= 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sign_scaled_vanishes_at_optimum() {
        let m = Multiplicative::SignScaled { c1: 0.5 };
        let mut out = [1.0, 1.0];
        m.apply(&[3.0, 4.0], &[3.0, 4.0], &[-0.2, 1.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn logistic_like_constants() {
        let cfg = SgdProblemConfig {
            objective: ObjectiveConfig::LogisticLike { mu: 0.5, w: 2.0 },
            theta_star: vec![1.0, -1.0],
            noise: NoiseSpec::standard_gaussian(2),
            multiplicative: Multiplicative::None,
            init: InitSpec::default(),
            constants: ConstantOverrides::default(),
        };
        let p = cfg.build().unwrap();
        assert_eq!(p.constants.l, 1.0);
        let l1 = p.constants.l1();
        let mut src = RandomSource::new(2, 0);
        for _ in 0..1000 {
            let th: Vec<f64> = (0..2).map(|k| p.theta_star[k] + 4.0 * src.normal()).collect();
            let e = dist(&th, &p.theta_star);
            assert!(norm(&p.h_remainder(&th)) <= l1 * e * e + 1e-15);
        }
    }

    #[test]
    fn streaming_quadratic_has_zero_eta() {
        let m = EstimationModel::builtin(BuiltinModel::QuadraticLocation { dim: 2 }, vec![0.3, -0.7], NoiseSpec::standard_gaussian(2))
            .unwrap();
        let s = Schedule::new(1.0, 0.75, 200).unwrap();
        let (p, t) = streaming_m_estimation(&m, &s, InitSpec::default(), &mut RandomSource::new(3, 0)).unwrap();
        assert_eq!(p.constants.c1, 2.0);
        assert!(t.eta.as_slice().iter().all(|&v| v == 0.0));
        for k in 0..200 {
            for j in 0..2 {
                assert_eq!(t.xi[(k, j)], m.theta_star[j] - t.raw[(k, j)]);
            }
        }
        assert_eq!(t.recursion_residual(&p), 0.0);
    }

    #[test]
    fn streaming_huber_eta_bound() {
        let noise = NoiseSpec::new(NoiseFamily::Gaussian, 1.0, SymMatrix::identity(2)).unwrap();
        let m = EstimationModel::builtin(BuiltinModel::SmoothedHuber { dim: 2, kappa: 1.0 }, vec![0.0, 0.0], noise).unwrap();
        let s = Schedule::new(1.0, 0.75, 300).unwrap();
        let (p, t) = streaming_m_estimation(&m, &s, InitSpec::default(), &mut RandomSource::new(4, 0)).unwrap();
        for k in 1..=300 {
            let e = dist(t.theta(k - 1), &p.theta_star);
            assert!(norm(t.eta.row(k - 1)) <= p.constants.c1 * e + 1e-12);
        }
        assert!(dist(t.theta(300), &p.theta_star) < 0.5);
    }
}
