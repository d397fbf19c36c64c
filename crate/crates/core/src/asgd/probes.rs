//! Monte Carlo rate probes for the iterates and the coupled paths, and `φ_β`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{coupled_path, run, AsgdError, Schedule, SgdProblem};
use crate::distance_lab::{rate_fit, RateFit};
use crate::linalg::dist;
use crate::stats_core::{Estimate, MeanAcc, RandomSource};

/// `φ_β(t) = (t^β − 1)/β`, and `log t` at `β = 0`.
pub fn phi(beta: f64, t: f64) -> Result<f64, AsgdError> {
    if !(t > 0.0) {
        return Err(AsgdError::InvalidProblem(format!("phi needs t > 0, got {t}")));
    }
    let l = t.ln();
    // (e^{βl} − 1)/β via expm1 keeps the β → 0 limit continuous.
    Ok(if beta == 0.0 { l } else { (beta * l).exp_m1() / beta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub n: usize,
    pub m2: Estimate,
    pub m4: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub alpha: f64,
    pub ell0: f64,
    pub rows: Vec<MomentRow>,
    pub slope_m2: RateFit,
    pub slope_m4: RateFit,
}

fn fit(points: Vec<(f64, f64)>) -> Result<RateFit, AsgdError> {
    rate_fit(&points).map_err(|e| AsgdError::InvalidProblem(e.to_string()))
}

/// `‖θ_n − θ*‖` at each grid point (inner index) for each replication (outer index).
pub fn iterate_errors(
    problem: &SgdProblem,
    ell0: f64,
    alpha: f64,
    ns: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, AsgdError> {
    let n_max = *ns.iter().max().ok_or_else(|| AsgdError::InvalidProblem("empty n grid".into()))?;
    let schedule = Schedule::new(ell0, alpha, n_max)?;
    (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let traj = run(problem, &schedule, &mut RandomSource::new(seed, r))?;
            Ok(ns.iter().map(|&n| dist(traj.theta(n), &problem.theta_star)).collect())
        })
        .collect()
}

/// `E‖θ_n − θ*‖²` and `E‖θ_n − θ*‖⁴` on an `n` grid, read off one run per replication.
pub fn moment_probe(
    problem: &SgdProblem,
    ell0: f64,
    alpha: f64,
    ns: &[usize],
    reps: usize,
    seed: u64,
) -> Result<MomentTable, AsgdError> {
    let per_rep = iterate_errors(problem, ell0, alpha, ns, reps, seed)?;
    let rows: Vec<MomentRow> = ns
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let m2: MeanAcc = per_rep.iter().map(|e| e[k] * e[k]).collect();
            let m4: MeanAcc = per_rep.iter().map(|e| e[k].powi(4)).collect();
            MomentRow { n, m2: m2.estimate(), m4: m4.estimate() }
        })
        .collect();
    let slope_m2 = fit(rows.iter().map(|r| (r.n as f64, r.m2.value)).collect())?;
    let slope_m4 = fit(rows.iter().map(|r| (r.n as f64, r.m4.value)).collect())?;
    Ok(MomentTable { alpha, ell0, rows, slope_m2, slope_m4 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingDecayTable {
    pub i: usize,
    /// `(j, E‖θ_j − θ_j^{(i)}‖²)`.
    pub rows: Vec<(usize, Estimate)>,
    pub fit: RateFit,
}

/// `E‖θ_j − θ_j^{(i)}‖²` for fixed `i` across `j`.
pub fn coupling_decay(
    problem: &SgdProblem,
    ell0: f64,
    alpha: f64,
    i: usize,
    js: &[usize],
    reps: usize,
    seed: u64,
) -> Result<CouplingDecayTable, AsgdError> {
    let n_max = *js.iter().max().ok_or_else(|| AsgdError::InvalidProblem("empty j grid".into()))?;
    if js.iter().any(|&j| j < i) {
        return Err(AsgdError::InvalidProblem(format!("every j must be >= i = {i}")));
    }
    let schedule = Schedule::new(ell0, alpha, n_max)?;
    let per_rep: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut src = RandomSource::new(seed, r);
            let traj = run(problem, &schedule, &mut src)?;
            let fresh = problem.draw_raw(1, &mut src.substream(3))?;
            let path = coupled_path(&traj, problem, i, fresh.row(0))?;
            Ok(js.iter().map(|&j| dist(traj.theta(j), path.thetas.row(j)).powi(2)).collect())
        })
        .collect::<Result<_, AsgdError>>()?;
    let rows: Vec<(usize, Estimate)> = js
        .iter()
        .enumerate()
        .map(|(k, &j)| (j, per_rep.iter().map(|v| v[k]).collect::<MeanAcc>().estimate()))
        .collect();
    let fit = fit(rows.iter().map(|(j, e)| (*j as f64, e.value)).collect())?;
    Ok(CouplingDecayTable { i, rows, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMatrix;
    use crate::stats_core::NoiseSpec;

    #[test]
    fn phi_examples() {
        assert_eq!(phi(0.0, 4.0).unwrap(), 4f64.ln());
        assert!((phi(1.0, 4.0).unwrap() - 3.0).abs() < 1e-15);
        assert!((phi(0.5, 4.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((phi(1e-12, 4.0).unwrap() - 4f64.ln()).abs() < 1e-11);
        assert!(phi(1.0, 0.0).is_err());
    }

    #[test]
    fn second_moment_rate_alpha_075() {
        let p = SgdProblem::quadratic(SymMatrix::from_diag(&[1.0, 2.0]), vec![0.0, 0.0], NoiseSpec::standard_gaussian(2))
            .unwrap();
        let t = moment_probe(&p, 1.0, 0.75, &[128, 256, 512, 1024, 2048], 400, 5).unwrap();
        assert!((t.slope_m2.slope + 0.75).abs() < 0.1, "{:?}", t.slope_m2);
    }
}
