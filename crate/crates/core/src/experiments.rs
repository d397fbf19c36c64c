//! Config-driven experiment runner: bound and distance sweeps, rate probes,
//! shell-probability checks, condition validation and report emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::asgd::{coupling_decay, iterate_errors, AsgdError, QSigma, Schedule, SgdProblem, SgdProblemConfig};
use crate::bound_engine::{prop41_constant_eps, thm21_bound, within_bound, BoundError, CouplingAccumulator, DEFAULT_LOO_SUBSAMPLE};
use crate::convex_geom::ConvexBody;
use crate::distance_lab::{empirical_distance_built, rate_fit, shell_event_probability, DistanceError, TestFamily};
use crate::linalg::{dist, norm, spectral_norm, Matrix, SymMatrix};
use crate::m_estimation::{
    estimate_sigma_v, mest_replication, solve, theta_errors, z_decompose, BuiltinModel, EstimationModel,
    EstimationModelConfig, MestError, ModelKind, DEFAULT_TOL,
};
use crate::stats_core::{Estimate, MeanAcc, NoiseFamily, NoiseSpec, RandomSource, StatsError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// 2 for validation problems, 3 for numerical failures, 1 for i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Validation(_) => 2,
            ExperimentError::Numerical(_) => 3,
            ExperimentError::Io(_) => 1,
        }
    }
}

impl From<MestError> for ExperimentError {
    fn from(e: MestError) -> Self {
        match e {
            MestError::Invalid(_) | MestError::TooFewRows { .. } | MestError::NoPopulationScore => {
                ExperimentError::Validation(e.to_string())
            }
            MestError::Stats(StatsError::InvalidSpec(_)) | MestError::Stats(StatsError::DimMismatch { .. }) => {
                ExperimentError::Validation(e.to_string())
            }
            _ => ExperimentError::Numerical(e.to_string()),
        }
    }
}

impl From<AsgdError> for ExperimentError {
    fn from(e: AsgdError) -> Self {
        match e {
            AsgdError::InvalidSchedule(_) | AsgdError::InvalidProblem(_) => ExperimentError::Validation(e.to_string()),
            AsgdError::Stats(StatsError::InvalidSpec(_)) => ExperimentError::Validation(e.to_string()),
            AsgdError::Mest(m) => m.into(),
            AsgdError::Io(io) => ExperimentError::Io(io),
            _ => ExperimentError::Numerical(e.to_string()),
        }
    }
}

impl From<DistanceError> for ExperimentError {
    fn from(e: DistanceError) -> Self {
        match e {
            DistanceError::TooFewSamples(_)
            | DistanceError::EmptyFamily
            | DistanceError::Inradius { .. }
            | DistanceError::TooFewPoints(_)
            | DistanceError::DeltaLength { .. } => ExperimentError::Validation(e.to_string()),
            _ => ExperimentError::Numerical(e.to_string()),
        }
    }
}

impl From<BoundError> for ExperimentError {
    fn from(e: BoundError) -> Self {
        ExperimentError::Numerical(e.to_string())
    }
}

impl From<StatsError> for ExperimentError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::InvalidSpec(_) | StatsError::DimMismatch { .. } => ExperimentError::Validation(e.to_string()),
            _ => ExperimentError::Numerical(e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Bound,
    Distance,
    AsgdRates,
    MestRates,
    ShellCheck,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Bound => "bound",
            ExperimentKind::Distance => "distance",
            ExperimentKind::AsgdRates => "asgd_rates",
            ExperimentKind::MestRates => "mest_rates",
            ExperimentKind::ShellCheck => "shell_check",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Bound, Self::Distance, Self::AsgdRates, Self::MestRates, Self::ShellCheck]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub ell0: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundOptions {
    /// Replications that also build leave-one-out terms; defaults to all.
    pub coupling_replications: Option<usize>,
    pub loo_subsample: usize,
    pub solver_tol: f64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self { coupling_replications: None, loo_subsample: DEFAULT_LOO_SUBSAMPLE, solver_tol: DEFAULT_TOL }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsgdOptions {
    /// Fixed `i` for the coupled-path decay probe; off when unset.
    pub coupling_index: Option<usize>,
    pub coupling_js: Vec<usize>,
    /// Adds `λ_min(Σ_n)` and `max ‖Q_i‖` rows.
    pub sigma_floor: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShellBody {
    CenteredBall { radius: f64 },
    /// `{x : x₁ ≤ offset}`.
    HalfSpace { offset: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellConfig {
    pub dims: Vec<usize>,
    pub n: usize,
    pub epsilons: Vec<f64>,
    pub families: Vec<NoiseFamily>,
    pub bodies: Vec<ShellBody>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    N,
    Alpha,
    D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub family: TestFamily,
    #[serde(default)]
    pub model: Option<EstimationModelConfig>,
    #[serde(default)]
    pub problem: Option<SgdProblemConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub bound: BoundOptions,
    #[serde(default)]
    pub asgd: AsgdOptions,
    #[serde(default)]
    pub shell: Option<ShellConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_replications() -> usize {
    200
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn model(&self) -> Result<EstimationModel, ExperimentError> {
        let m = self.model.as_ref().ok_or_else(|| ExperimentError::Validation("missing \"model\" block".into()))?;
        Ok(m.build()?)
    }

    fn problem(&self) -> Result<SgdProblem, ExperimentError> {
        let p = self.problem.as_ref().ok_or_else(|| ExperimentError::Validation("missing \"problem\" block".into()))?;
        Ok(p.build()?)
    }

    fn schedule(&self) -> Result<ScheduleConfig, ExperimentError> {
        let s = self.schedule.ok_or_else(|| ExperimentError::Validation("missing \"schedule\" block".into()))?;
        Schedule::new(s.ell0, s.alpha, 2)?;
        Ok(s)
    }

    fn grid(&self, min_len: usize) -> Result<&[usize], ExperimentError> {
        if self.n_grid.len() < min_len {
            return Err(ExperimentError::Validation(format!(
                "n_grid needs at least {min_len} points, got {}",
                self.n_grid.len()
            )));
        }
        if self.n_grid.iter().any(|&n| n < 2) {
            return Err(ExperimentError::Validation("every n must be >= 2".into()));
        }
        Ok(&self.n_grid)
    }
}

/// One CSV line; columns are `experiment,n,d,value,stderr,slope,extra`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub n: Option<usize>,
    pub d: usize,
    pub value: Option<f64>,
    pub stderr: Option<f64>,
    pub slope: Option<f64>,
    pub extra: String,
}

impl ReportRow {
    fn point(experiment: &str, n: usize, d: usize, e: Estimate, extra: impl Into<String>) -> Self {
        Self {
            experiment: experiment.into(),
            n: Some(n),
            d,
            value: Some(e.value),
            stderr: Some(e.stderr),
            slope: None,
            extra: extra.into(),
        }
    }

    fn slope(experiment: &str, d: usize, slope: f64, extra: impl Into<String>) -> Self {
        Self { experiment: experiment.into(), n: None, d, value: None, stderr: None, slope: Some(slope), extra: extra.into() }
    }
}

/// Long-format per-replication record for `--keep-raw`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub experiment: String,
    pub n: usize,
    pub replication: usize,
    pub quantity: String,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub name: String,
    pub rows: Vec<ReportRow>,
    pub summary: serde_json::Value,
    pub raw: Vec<RawRow>,
}

fn raw(experiment: &str, n: usize, replication: usize, quantity: impl Into<String>, value: f64) -> RawRow {
    RawRow { experiment: experiment.into(), n, replication, quantity: quantity.into(), value }
}

/// The source of replication `r` at sample size `n`.
pub fn replication_source(seed: u64, r: usize, n: usize) -> RandomSource {
    RandomSource::new(seed, r as u64).substream(n as u64)
}

pub fn run_experiment(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    if let Some(k) = cfg.experiment {
        if k != kind {
            return Err(ExperimentError::Validation(format!(
                "config is for experiment {:?} but {:?} was requested",
                k.name(),
                kind.name()
            )));
        }
    }
    match kind {
        ExperimentKind::Bound => run_bound(cfg),
        ExperimentKind::Distance => run_distance(cfg),
        ExperimentKind::AsgdRates => run_asgd_rates(cfg),
        ExperimentKind::MestRates => run_mest_rates(cfg),
        ExperimentKind::ShellCheck => run_shell_check(cfg),
    }
}

fn fit_row(experiment: &str, d: usize, points: &[(f64, f64)], extra: &str) -> Result<ReportRow, ExperimentError> {
    let f = rate_fit(points)?;
    let sep = if extra.is_empty() { "" } else { ";" };
    Ok(ReportRow::slope(experiment, d, f.slope, format!("{extra}{sep}intercept={};r_squared={}", f.intercept, f.r_squared)))
}

// T samples and identity residuals for one sample size.
struct TSamples {
    t: Matrix,
    max_residual: f64,
}

fn t_samples(model: &EstimationModel, n: usize, reps: usize, seed: u64, tol: f64) -> Result<TSamples, ExperimentError> {
    let sv = estimate_sigma_v(model, None)?;
    let d = model.dim();
    let dn = crate::m_estimation::delta_n(model.domain_diameter, d, n, 3.0);
    let per: Vec<(Vec<f64>, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut src = replication_source(seed, r, n);
            match model.kind {
                ModelKind::MSmooth => {
                    let rep = mest_replication(model, &sv, n, &mut src, None, tol)?;
                    Ok((rep.decomposition.t, rep.decomposition.residual))
                }
                ModelKind::ZScore => {
                    let data = model.sample_data(n, &mut src)?;
                    let (th, _) = solve(model.cb(), model.kind, &data, &model.theta_star, tol)?;
                    let dec = z_decompose(model, &data, &th, &sv, dn)?;
                    Ok((dec.t, dec.residual))
                }
            }
        })
        .collect::<Result<_, MestError>>()?;
    let mut t = Matrix::zeros(reps, d);
    let mut max_residual = 0.0f64;
    for (r, (tr, res)) in per.into_iter().enumerate() {
        t.row_mut(r).copy_from_slice(&tr);
        max_residual = max_residual.max(res);
    }
    Ok(TSamples { t, max_residual })
}

fn run_bound(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let model = cfg.model()?;
    if model.kind != ModelKind::MSmooth {
        return Err(ExperimentError::Validation("the bound experiment needs an m_smooth model".into()));
    }
    let grid = cfg.grid(1)?;
    let d = model.dim();
    let sv = estimate_sigma_v(&model, None)?;
    let built = cfg.family.build(d);
    let coupling_reps = cfg.bound.coupling_replications.unwrap_or(cfg.replications).min(cfg.replications);
    let tol = cfg.bound.solver_tol;
    let mut rows = Vec::new();
    let mut raws = Vec::new();
    let mut details = Vec::new();
    for &n in grid {
        let reps: Vec<_> = (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                let loo = (r < coupling_reps).then_some(cfg.bound.loo_subsample);
                mest_replication(&model, &sv, n, &mut replication_source(cfg.seed, r, n), loo, tol)
            })
            .collect::<Result<_, MestError>>()?;
        let mut acc = CouplingAccumulator::default();
        let mut t = Matrix::zeros(reps.len(), d);
        let mut max_residual = 0.0f64;
        let mut loo_failures = 0;
        for (r, rep) in reps.iter().enumerate() {
            t.row_mut(r).copy_from_slice(&rep.decomposition.t);
            max_residual = max_residual.max(rep.decomposition.residual);
            for (k, v) in rep.decomposition.t.iter().enumerate() {
                raws.push(raw("bound", n, r, format!("t{k}"), *v));
            }
            if r < coupling_reps {
                acc.push(&rep.coupling);
                loo_failures += rep.loo_failures;
                raws.push(raw("bound", n, r, "wd", rep.coupling.w_norm * rep.coupling.delta));
                raws.push(raw("bound", n, r, "loo", rep.coupling.loo_sum()));
                raws.push(raw("bound", n, r, "gamma", rep.coupling.gamma));
            }
        }
        let report = thm21_bound(&acc.terms(), d)?.with_solver_tolerance(tol);
        let distance = empirical_distance_built(&t, &built)?;
        let sound = within_bound(distance.as_estimate(), &report);
        rows.push(ReportRow::point("bound", n, d, Estimate::new(report.value, report.stderr), "formula=thm21"));
        rows.push(ReportRow::point("bound.distance", n, d, distance.as_estimate(), format!("sound={sound}")));
        details.push(json!({
            "n": n,
            "bound": report,
            "distance": distance,
            "sound": sound,
            "max_identity_residual": max_residual,
            "loo_failures": loo_failures,
            "coupling_replications": coupling_reps,
        }));
    }
    Ok(ExperimentOutput {
        name: "bound".into(),
        rows,
        summary: json!({ "points": details, "sigma_v_warnings": sv.warnings }),
        raw: raws,
    })
}

fn distance_points(
    model: &EstimationModel,
    cfg: &ExperimentConfig,
    grid: &[usize],
    raws: &mut Vec<RawRow>,
) -> Result<(Vec<(usize, Estimate)>, Vec<serde_json::Value>), ExperimentError> {
    let built = cfg.family.build(model.dim());
    let mut points = Vec::new();
    let mut details = Vec::new();
    for &n in grid {
        let s = t_samples(model, n, cfg.replications, cfg.seed, cfg.bound.solver_tol)?;
        for r in 0..s.t.rows() {
            for k in 0..s.t.cols() {
                raws.push(raw("distance", n, r, format!("t{k}"), s.t[(r, k)]));
            }
        }
        let dist = empirical_distance_built(&s.t, &built)?;
        points.push((n, dist.as_estimate()));
        details.push(json!({ "n": n, "distance": dist, "max_identity_residual": s.max_residual }));
    }
    Ok((points, details))
}

fn run_distance(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let model = cfg.model()?;
    let grid = cfg.grid(1)?;
    let d = model.dim();
    let mut raws = Vec::new();
    let (points, details) = distance_points(&model, cfg, grid, &mut raws)?;
    let mut rows: Vec<ReportRow> = points.iter().map(|(n, e)| ReportRow::point("distance", *n, d, *e, "")).collect();
    if points.len() >= 3 {
        let pts: Vec<(f64, f64)> = points.iter().map(|(n, e)| (*n as f64, e.value)).collect();
        rows.push(fit_row("distance", d, &pts, "axis=n")?);
    }
    Ok(ExperimentOutput { name: "distance".into(), rows, summary: json!({ "points": details }), raw: raws })
}

fn run_mest_rates(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let model = cfg.model()?;
    let grid = cfg.grid(3)?;
    let d = model.dim();
    let mut rows = Vec::new();
    let mut raws = Vec::new();
    let mut m2s = Vec::new();
    let mut m4s = Vec::new();
    for &n in grid {
        let errs = theta_errors(&model, n, cfg.replications, cfg.seed)?;
        for (r, e) in errs.iter().enumerate() {
            raws.push(raw("mest_rates", n, r, "err", *e));
        }
        let m2 = errs.iter().map(|e| e * e).collect::<MeanAcc>().estimate();
        let m4 = errs.iter().map(|e| e.powi(4)).collect::<MeanAcc>().estimate();
        rows.push(ReportRow::point("mest_rates", n, d, m2, "moment=2"));
        rows.push(ReportRow::point("mest_rates", n, d, m4, "moment=4"));
        m2s.push((n as f64, m2.value));
        m4s.push((n as f64, m4.value));
    }
    rows.push(fit_row("mest_rates", d, &m2s, "moment=2")?);
    rows.push(fit_row("mest_rates", d, &m4s, "moment=4")?);
    Ok(ExperimentOutput { name: "mest_rates".into(), rows, summary: json!({}), raw: raws })
}

fn asgd_moment_rows(
    problem: &SgdProblem,
    sched: ScheduleConfig,
    cfg: &ExperimentConfig,
    grid: &[usize],
    rows: &mut Vec<ReportRow>,
    raws: &mut Vec<RawRow>,
) -> Result<(f64, f64), ExperimentError> {
    let d = problem.dim();
    let per_rep = iterate_errors(problem, sched.ell0, sched.alpha, grid, cfg.replications, cfg.seed)?;
    let tag = format!("alpha={}", sched.alpha);
    let mut m2s = Vec::new();
    let mut m4s = Vec::new();
    for (k, &n) in grid.iter().enumerate() {
        for (r, e) in per_rep.iter().enumerate() {
            raws.push(raw("asgd_rates", n, r, format!("err;{tag}"), e[k]));
        }
        let m2 = per_rep.iter().map(|e| e[k] * e[k]).collect::<MeanAcc>().estimate();
        let m4 = per_rep.iter().map(|e| e[k].powi(4)).collect::<MeanAcc>().estimate();
        rows.push(ReportRow::point("asgd_rates", n, d, m2, format!("{tag};moment=2")));
        rows.push(ReportRow::point("asgd_rates", n, d, m4, format!("{tag};moment=4")));
        m2s.push((n as f64, m2.value));
        m4s.push((n as f64, m4.value));
    }
    let r2 = fit_row("asgd_rates", d, &m2s, &format!("{tag};moment=2"))?;
    let r4 = fit_row("asgd_rates", d, &m4s, &format!("{tag};moment=4"))?;
    let slopes = (r2.slope.unwrap_or(f64::NAN), r4.slope.unwrap_or(f64::NAN));
    rows.push(r2);
    rows.push(r4);
    Ok(slopes)
}

fn run_asgd_rates(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let problem = cfg.problem()?;
    let sched = cfg.schedule()?;
    let grid = cfg.grid(3)?;
    let d = problem.dim();
    let mut rows = Vec::new();
    let mut raws = Vec::new();
    let warnings = problem.schedule_warnings(&Schedule::new(sched.ell0, sched.alpha, *grid.iter().min().unwrap_or(&2))?);
    let (s2, s4) = asgd_moment_rows(&problem, sched, cfg, grid, &mut rows, &mut raws)?;
    let mut extra = json!({});
    if let Some(i) = cfg.asgd.coupling_index {
        let table = coupling_decay(&problem, sched.ell0, sched.alpha, i, &cfg.asgd.coupling_js, cfg.replications, cfg.seed)?;
        for (j, e) in &table.rows {
            rows.push(ReportRow::point("asgd_coupling", *j, d, *e, format!("i={i}")));
        }
        rows.push(ReportRow::slope("asgd_coupling", d, table.fit.slope, format!("i={i};r_squared={}", table.fit.r_squared)));
        extra["coupling"] = json!(table);
    }
    if cfg.asgd.sigma_floor {
        for &n in grid {
            let qs = QSigma::new(&problem.g, &Schedule::new(sched.ell0, sched.alpha, n)?, &problem.sigma_xi)?;
            rows.push(ReportRow::point("asgd_sigma_floor", n, d, Estimate::exact(qs.lambda_min), "quantity=lambda_min"));
            rows.push(ReportRow::point("asgd_sigma_floor", n, d, Estimate::exact(qs.max_p()), "quantity=max_q_norm"));
        }
    }
    Ok(ExperimentOutput {
        name: "asgd_rates".into(),
        rows,
        summary: json!({ "slope_m2": s2, "slope_m4": s4, "warnings": warnings, "tau": problem.tau(), "extra": extra }),
        raw: raws,
    })
}

/// `Σᵢ E‖ξᵢ/√n‖³` for standardized iid draws from `spec`.
fn shell_gamma(spec: &NoiseSpec, n: usize, seed: u64) -> Result<f64, ExperimentError> {
    let est = crate::stats_core::gamma_expected(spec, n, 200_000, &mut RandomSource::new(seed, u64::MAX))?;
    Ok(est.value)
}

fn run_shell_check(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let sc = cfg.shell.as_ref().ok_or_else(|| ExperimentError::Validation("missing \"shell\" block".into()))?;
    if sc.n == 0 {
        return Err(ExperimentError::Validation("shell.n must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for &d in &sc.dims {
        for family in &sc.families {
            let spec = NoiseSpec::new(*family, 1.0, SymMatrix::identity(d))?;
            let spec = standardized(spec);
            let gamma = shell_gamma(&spec, sc.n, cfg.seed)?;
            let w = standardized_sums(&spec, sc.n, cfg.replications, cfg.seed)?;
            for body in &sc.bodies {
                let cb = match body {
                    ShellBody::CenteredBall { radius } => ConvexBody::ball(vec![0.0; d], *radius),
                    ShellBody::HalfSpace { offset } => {
                        let mut e1 = vec![0.0; d];
                        e1[0] = 1.0;
                        ConvexBody::half_space(e1, *offset)
                    }
                }
                .map_err(|e| ExperimentError::Validation(e.to_string()))?;
                for &eps in &sc.epsilons {
                    let p = shell_event_probability(&w, &cb, gamma, &[eps], &[eps])?;
                    let bound = prop41_constant_eps(gamma, d, eps);
                    let pass = p.value <= bound + 3.0 * p.stderr;
                    let fam = serde_json::to_string(family).unwrap_or_default();
                    let extra = format!("eps={eps};gamma={gamma};bound={bound};pass={pass};body={body:?};family={fam}")
                        .replace(',', " ");
                    rows.push(ReportRow::point("shell_check", sc.n, d, p, extra));
                    details.push(json!({ "d": d, "eps": eps, "gamma": gamma, "bound": bound, "prob": p, "pass": pass }));
                }
            }
        }
    }
    Ok(ExperimentOutput { name: "shell_check".into(), rows, summary: json!({ "points": details }), raw: Vec::new() })
}

// Unit-covariance version of a spec (the sphere law has covariance I/d).
fn standardized(spec: NoiseSpec) -> NoiseSpec {
    match spec.family {
        NoiseFamily::UniformSphere => NoiseSpec { scale: (spec.dim() as f64).sqrt(), ..spec },
        _ => spec,
    }
}

/// `reps` draws of `W = n^{−1/2} Σᵢ ξᵢ` with `ξᵢ` iid from `spec`; replication `r` uses stream `r`.
pub fn standardized_sums(spec: &NoiseSpec, n: usize, reps: usize, seed: u64) -> Result<Matrix, ExperimentError> {
    let d = spec.dim();
    let rows: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut src = replication_source(seed, r, n);
            let mut sampler = spec.sampler()?;
            let mut acc = vec![0.0; d];
            let mut x = vec![0.0; d];
            for _ in 0..n {
                sampler.draw(&mut src, &mut x);
                acc.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
            }
            let s = (n as f64).sqrt();
            Ok(acc.into_iter().map(|a| a / s).collect())
        })
        .collect::<Result<_, StatsError>>()?;
    let mut m = Matrix::zeros(reps, d);
    for (r, row) in rows.iter().enumerate() {
        m.row_mut(r).copy_from_slice(row);
    }
    Ok(m)
}

/// Rows for a sweep: one per point, then one fitted-slope row.
pub fn summarize_sweep(
    experiment: &str,
    d: usize,
    axis: SweepAxis,
    points: &[(f64, Estimate)],
) -> Result<Vec<ReportRow>, ExperimentError> {
    let axis_name = match axis {
        SweepAxis::N => "n",
        SweepAxis::Alpha => "alpha",
        SweepAxis::D => "d",
    };
    let mut rows: Vec<ReportRow> = points
        .iter()
        .map(|(x, e)| {
            let (n, dd, extra) = match axis {
                SweepAxis::N => (Some(*x as usize), d, String::new()),
                SweepAxis::D => (None, *x as usize, String::new()),
                SweepAxis::Alpha => (None, d, format!("alpha={x}")),
            };
            ReportRow { experiment: experiment.into(), n, d: dd, value: Some(e.value), stderr: Some(e.stderr), slope: None, extra }
        })
        .collect();
    let pts: Vec<(f64, f64)> = points.iter().map(|(x, e)| (*x, e.value)).collect();
    rows.push(fit_row(experiment, d, &pts, &format!("axis={axis_name}"))?);
    Ok(rows)
}

fn resize_model(cfg: &EstimationModelConfig, d: usize) -> Result<EstimationModelConfig, ExperimentError> {
    let model = match cfg.model {
        BuiltinModel::QuadraticLocation { .. } => BuiltinModel::QuadraticLocation { dim: d },
        BuiltinModel::SmoothedHuber { kappa, .. } => BuiltinModel::SmoothedHuber { dim: d, kappa },
        BuiltinModel::LinearScore { .. } => BuiltinModel::LinearScore { dim: d },
    };
    let first = *cfg.theta_star.first().unwrap_or(&0.0);
    let noise = NoiseSpec::new(cfg.noise.family, cfg.noise.scale, SymMatrix::identity(d))?;
    Ok(EstimationModelConfig { model, theta_star: vec![first; d], noise, ..cfg.clone() })
}

/// Runs the configured experiment along one axis and appends a fitted-slope row.
pub fn sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let sw = cfg.sweep.as_ref().ok_or_else(|| ExperimentError::Validation("missing \"sweep\" block".into()))?;
    if sw.values.len() < 3 {
        return Err(ExperimentError::Validation(format!("a sweep needs at least 3 points, got {}", sw.values.len())));
    }
    let kind = cfg.experiment.ok_or_else(|| ExperimentError::Validation("sweep needs \"experiment\"".into()))?;
    let mut raws = Vec::new();
    let rows = match (sw.axis, kind) {
        (SweepAxis::N, ExperimentKind::Distance) => {
            let model = cfg.model()?;
            let grid: Vec<usize> = sw.values.iter().map(|v| *v as usize).collect();
            let (points, _) = distance_points(&model, cfg, &grid, &mut raws)?;
            let pts: Vec<(f64, Estimate)> = points.iter().map(|(n, e)| (*n as f64, *e)).collect();
            summarize_sweep("distance", model.dim(), SweepAxis::N, &pts)?
        }
        (SweepAxis::N, ExperimentKind::MestRates) => {
            let model = cfg.model()?;
            let mut pts = Vec::new();
            for v in &sw.values {
                let n = *v as usize;
                let errs = theta_errors(&model, n, cfg.replications, cfg.seed)?;
                pts.push((*v, errs.iter().map(|e| e * e).collect::<MeanAcc>().estimate()));
            }
            summarize_sweep("mest_rates", model.dim(), SweepAxis::N, &pts)?
        }
        (SweepAxis::N, ExperimentKind::AsgdRates) => {
            let problem = cfg.problem()?;
            let s = cfg.schedule()?;
            let grid: Vec<usize> = sw.values.iter().map(|v| *v as usize).collect();
            let per = iterate_errors(&problem, s.ell0, s.alpha, &grid, cfg.replications, cfg.seed)?;
            let pts: Vec<(f64, Estimate)> = (0..grid.len())
                .map(|k| (grid[k] as f64, per.iter().map(|e| e[k] * e[k]).collect::<MeanAcc>().estimate()))
                .collect();
            summarize_sweep("asgd_rates", problem.dim(), SweepAxis::N, &pts)?
        }
        (SweepAxis::Alpha, ExperimentKind::AsgdRates) => {
            let problem = cfg.problem()?;
            let s = cfg.schedule()?;
            let grid = cfg.grid(3)?;
            let mut rows = Vec::new();
            for &alpha in &sw.values {
                let sc = ScheduleConfig { alpha, ..s };
                let mut point_rows = Vec::new();
                asgd_moment_rows(&problem, sc, cfg, grid, &mut point_rows, &mut raws)?;
                rows.extend(point_rows);
            }
            rows
        }
        (SweepAxis::D, ExperimentKind::Distance) => {
            let base = cfg.model.as_ref().ok_or_else(|| ExperimentError::Validation("missing \"model\" block".into()))?;
            let n = *cfg.grid(1)?.last().unwrap_or(&2);
            let mut pts = Vec::new();
            for v in &sw.values {
                let model = resize_model(base, *v as usize)?.build()?;
                let (points, _) = distance_points(&model, cfg, &[n], &mut raws)?;
                pts.push((*v, points[0].1));
            }
            summarize_sweep("distance", 0, SweepAxis::D, &pts)?
        }
        (axis, kind) => {
            return Err(ExperimentError::Validation(format!("sweep over {axis:?} is not defined for {}", kind.name())))
        }
    };
    Ok(ExperimentOutput { name: "sweep".into(), rows, summary: json!({ "axis": sw.axis, "values": sw.values }), raw: raws })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Warn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub condition: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub checks: Vec<ConditionCheck>,
}

impl ConditionReport {
    fn push(&mut self, condition: &str, ok: bool, detail: impl Into<String>) {
        let status = if ok { CheckStatus::Pass } else { CheckStatus::Warn };
        self.checks.push(ConditionCheck { condition: condition.into(), status, detail: detail.into() });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn status(&self, condition: &str) -> Option<CheckStatus> {
        self.checks.iter().find(|c| c.condition == condition).map(|c| c.status)
    }
}

const PROBE_PAIRS: usize = 1000;

fn random_point(center: &[f64], scale: f64, src: &mut RandomSource) -> Vec<f64> {
    center.iter().map(|c| c + scale * src.normal()).collect()
}

fn validate_model(m: &EstimationModelConfig, seed: u64, report: &mut ConditionReport) {
    let cov = m.noise.covariance.scale(m.noise.scale * m.noise.scale);
    let lam = cov.lambda_min();
    let floor = m.constants.lambda1.unwrap_or(0.0);
    if !(lam > 1e-12 * (1.0 + cov.lambda_max())) || lam < floor {
        report.push("A2", false, format!("lambda_min(Sigma) = {lam:e} (floor {floor})"));
        report.push("A1", false, "skipped: model cannot be built with a singular covariance");
        return;
    }
    let model = match m.build() {
        Ok(model) => model,
        Err(e) => {
            report.push("model", false, e.to_string());
            return;
        }
    };
    match estimate_sigma_v(&model, None) {
        Ok(sv) => {
            let l1 = model.constants.lambda1.unwrap_or(0.0);
            let l2 = model.constants.lambda2.unwrap_or(0.0);
            let ok = sv.lambda_min_sigma > 0.0 && sv.lambda_min_v > 0.0 && sv.warnings.iter().all(|w| !w.contains("below"));
            report.push(
                "A2",
                ok,
                format!("lambda_min(Sigma) = {} (>= {l1}), lambda_min(V) = {} (>= {l2})", sv.lambda_min_sigma, sv.lambda_min_v),
            );
        }
        Err(e) => report.push("A2", false, e.to_string()),
    }
    // Score Lipschitz constant from random pairs.
    let mut src = RandomSource::new(seed, 0xA1);
    let d = model.dim();
    let lf = model.cb().score_lipschitz();
    let mut worst = 0.0f64;
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    for _ in 0..PROBE_PAIRS {
        let x = random_point(&model.theta_star, 2.0, &mut src);
        let t1 = random_point(&model.theta_star, 2.0, &mut src);
        let t2 = random_point(&model.theta_star, 2.0, &mut src);
        model.cb().score(&t1, &x, &mut a);
        model.cb().score(&t2, &x, &mut b);
        worst = worst.max(dist(&a, &b) / dist(&t1, &t2));
    }
    report.push("A1", worst <= lf * (1.0 + 1e-9), format!("max score ratio {worst} vs L_F = {lf}"));
    if let Ok(psi) = model.population_score(&model.theta_star) {
        let r = norm(&psi);
        report.push("score_at_optimum", r <= 1e-8, format!("|Psi(theta*)| = {r:e}"));
    }
}

fn validate_problem(p: &SgdProblemConfig, sched: Option<ScheduleConfig>, seed: u64, report: &mut ConditionReport) {
    let problem = match p.build() {
        Ok(pr) => pr,
        Err(e) => {
            report.push("problem", false, e.to_string());
            return;
        }
    };
    let d = problem.dim();
    let c = problem.constants;
    let tau0 = problem.init.tau0(d);
    report.push("C0", tau0.is_finite(), format!("tau0 = {tau0}"));
    let mut src = RandomSource::new(seed, 0xC1);
    let noise = match &problem.innovation {
        crate::asgd::Innovation::Additive { noise, .. } => noise.clone(),
        crate::asgd::Innovation::Stream { model, .. } => model.noise.clone(),
    };
    let xis = match noise.sample(PROBE_PAIRS, &mut src) {
        Ok(x) => x,
        Err(e) => {
            report.push("C1", false, e.to_string());
            return;
        }
    };
    let lam = problem.sigma_xi.lambda_min();
    report.push("C1(i)", lam > 0.0, format!("lambda_min(Sigma_i) = {lam}; tau = {:?}", problem.tau()));
    let (mut x, mut e1, mut e2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut at_star = 0.0f64;
    let mut ratio = 0.0f64;
    for k in 0..PROBE_PAIRS {
        problem.split_noise(&problem.theta_star, xis.row(k), &mut x, &mut e1);
        at_star = at_star.max(norm(&e1));
        let t1 = random_point(&problem.theta_star, 2.0, &mut src);
        let t2 = random_point(&problem.theta_star, 2.0, &mut src);
        problem.split_noise(&t1, xis.row(k), &mut x, &mut e1);
        problem.split_noise(&t2, xis.row(k), &mut x, &mut e2);
        ratio = ratio.max(dist(&e1, &e2) / dist(&t1, &t2));
    }
    report.push(
        "C1(ii)",
        at_star <= 1e-12 && ratio <= c.c1 * (1.0 + 1e-9) + 1e-12,
        format!("max |g(theta*,xi)| = {at_star:e}; max Lipschitz ratio {ratio} vs c1 = {}", c.c1),
    );
    let (mut lo, mut hi, mut c3) = (f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..PROBE_PAIRS {
        let t = random_point(&problem.theta_star, 2.0, &mut src);
        let h = problem.objective.hessian(&t);
        lo = lo.min(h.lambda_min());
        hi = hi.max(h.lambda_max());
        let r = dist(&t, &problem.theta_star);
        if c.beta.map_or(true, |b| r <= b) && r > 0.0 {
            c3 = c3.max(spectral_norm(&h.sub(&problem.g).into_matrix()) / r);
        }
    }
    let tol = 1e-6;
    report.push("C2", lo >= c.mu - tol && hi <= c.l + tol, format!("Hessian eigenvalues in [{lo}, {hi}] vs [{}, {}]", c.mu, c.l));
    report.push("C3", c3 <= c.c2 + tol, format!("max Hessian Lipschitz ratio {c3} vs c2 = {}", c.c2));
    if let Some(s) = sched {
        match Schedule::new(s.ell0, s.alpha, 2) {
            Ok(_) => report.push("schedule", true, format!("ell0 = {}, alpha = {}", s.ell0, s.alpha)),
            Err(e) => report.push("schedule", false, e.to_string()),
        }
    }
}

/// Numerical checks of every declared condition; never fails, only warns.
pub fn validate_conditions(cfg: &ExperimentConfig) -> ConditionReport {
    let mut report = ConditionReport::default();
    if let Some(m) = &cfg.model {
        validate_model(m, cfg.seed, &mut report);
    }
    if let Some(p) = &cfg.problem {
        validate_problem(p, cfg.schedule, cfg.seed, &mut report);
    }
    if cfg.model.is_none() && cfg.problem.is_none() {
        report.push("config", false, "no model or problem block to check");
    }
    report
}

pub const CSV_HEADER: &str = "experiment,n,d,value,stderr,slope,extra";

/// Serializes rows with the fixed header.
pub fn rows_to_csv(rows: &[ReportRow]) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ExperimentError::Io(std::io::Error::other(e)))?;
    }
    let mut bytes = w.into_inner().map_err(|e| ExperimentError::Io(std::io::Error::other(e.to_string())))?;
    if rows.is_empty() {
        bytes = format!("{CSV_HEADER}\n").into_bytes();
    }
    Ok(bytes)
}

pub struct WrittenFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub raw: Option<PathBuf>,
}

/// Writes `<name>.csv`, `<name>.json` and, with `keep_raw`, `<name>_raw.csv`.
pub fn write_outputs(
    out: &ExperimentOutput,
    dir: &Path,
    keep_raw: bool,
    meta: serde_json::Value,
) -> Result<WrittenFiles, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", out.name));
    std::fs::write(&csv_path, rows_to_csv(&out.rows)?)?;
    let summary_path = dir.join(format!("{}.json", out.name));
    let summary = json!({ "experiment": out.name, "meta": meta, "summary": out.summary });
    let mut f = BufWriter::new(File::create(&summary_path)?);
    serde_json::to_writer_pretty(&mut f, &summary).map_err(|e| ExperimentError::Io(e.into()))?;
    f.flush()?;
    let raw_path = if keep_raw {
        let p = dir.join(format!("{}_raw.csv", out.name));
        let mut w = csv::Writer::from_path(&p).map_err(|e| ExperimentError::Io(std::io::Error::other(e)))?;
        for r in &out.raw {
            w.serialize(r).map_err(|e| ExperimentError::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Some(p)
    } else {
        None
    };
    Ok(WrittenFiles { csv: csv_path, summary: summary_path, raw: raw_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_cfg(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
              "seed": 3, "replications": 120, "n_grid": [16, 32, 64],
              "model": {{ "model": {{"model": "quadratic_location", "dim": 1}}, "theta_star": [0.0],
                         "noise": {{"family": {{"kind": "gaussian"}}, "covariance": [[1.0]]}} }}
              {extra}
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn header_is_fixed() {
        let rows = vec![ReportRow::point("x", 4, 1, Estimate::new(0.5, 0.1), "")];
        let s = String::from_utf8(rows_to_csv(&rows).unwrap()).unwrap();
        assert_eq!(s.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(s.lines().nth(1).unwrap(), "x,4,1,0.5,0.1,,");
    }

    #[test]
    fn synthetic_sweep_slope() {
        let pts: Vec<(f64, Estimate)> =
            [64.0, 128.0, 256.0, 512.0].iter().map(|&n: &f64| (n, Estimate::exact(3.0 * n.powf(-0.5)))).collect();
        let rows = summarize_sweep("synthetic", 1, SweepAxis::N, &pts).unwrap();
        assert_eq!(rows.len(), 5);
        assert!((rows[4].slope.unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn n_sweep_structure() {
        let mut cfg = quad_cfg(r#", "experiment": "mest_rates", "sweep": {"axis": "n", "values": [64, 128, 256]}"#);
        cfg.replications = 100;
        let out = sweep(&cfg).unwrap();
        assert_eq!(out.rows.len(), 4);
        assert!(out.rows[3].slope.is_some());
    }

    #[test]
    fn quadratic_conditions_pass() {
        let r = validate_conditions(&quad_cfg(""));
        assert!(r.all_pass(), "{r:?}");
    }

    #[test]
    fn singular_sigma_warns() {
        let cfg = ExperimentConfig::from_json(
            r#"{ "model": { "model": {"model": "quadratic_location", "dim": 2}, "theta_star": [0.0, 0.0],
                 "noise": {"family": {"kind": "gaussian"}, "covariance": [[1.0, 0.0], [0.0, 0.0]]} } }"#,
        )
        .unwrap();
        assert_eq!(validate_conditions(&cfg).status("A2"), Some(CheckStatus::Warn));
    }

    #[test]
    fn mismatched_kind_is_validation_error() {
        let cfg = quad_cfg(r#", "experiment": "distance""#);
        assert_eq!(run_experiment(ExperimentKind::Bound, &cfg).unwrap_err().exit_code(), 2);
    }
}
