//! `T_n = W_n + D_{1,n} + D_{2,n} + D_{3,n}`, the majorants `Δ₁, Δ₂, Δ₃` and
//! the coupled leave-one-out trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run, AsgdError, QSigma, Schedule, SgdProblem, SgdTrajectory};
use crate::bound_engine::{loo_subsample, Replication};
use crate::linalg::{dist, norm, Matrix};
use crate::stats_core::RandomSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsgdDecomposition {
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
    /// `‖T − W − D₁ − D₂ − D₃‖`.
    pub residual: f64,
    /// `‖ζᵢ‖` for `i = 0..n−1`, with entry 0 unused (zero).
    pub zeta_norms: Vec<f64>,
}

impl AsgdDecomposition {
    pub fn d(&self) -> Vec<f64> {
        (0..self.t.len()).map(|k| self.d1[k] + self.d2[k] + self.d3[k]).collect()
    }

    /// `Σᵢ ‖ζᵢ‖³`.
    pub fn gamma(&self) -> f64 {
        self.zeta_norms.iter().map(|z| z.powi(3)).sum()
    }
}

fn check_lengths(traj: &SgdTrajectory, qs: &QSigma) -> Result<(), AsgdError> {
    if qs.q.n() != traj.n() {
        return Err(AsgdError::InvalidProblem(format!("Q built for n = {}, trajectory has n = {}", qs.q.n(), traj.n())));
    }
    Ok(())
}

// (1/√n) Σ_n^{-1/2} Σ_{i=1}^{n−1} Q_i v_i, with v_i produced by `row`.
fn weighted_sum(qs: &QSigma, n: usize, mut row: impl FnMut(usize) -> Vec<f64>) -> Vec<f64> {
    let d = qs.sigma_n.dim();
    let mut acc = vec![0.0; d];
    for i in 1..n {
        let v = qs.q.apply(i, &row(i));
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
    }
    let s = qs.sigma_n_inv_sqrt.as_matrix().matvec(&acc);
    s.iter().map(|v| v / (n as f64).sqrt()).collect()
}

pub fn decompose(traj: &SgdTrajectory, problem: &SgdProblem, qs: &QSigma) -> Result<AsgdDecomposition, AsgdError> {
    check_lengths(traj, qs)?;
    let n = traj.n();
    let d = problem.dim();
    let sqrt_n = (n as f64).sqrt();
    let s = qs.sigma_n_inv_sqrt.as_matrix();
    let star = &problem.theta_star;

    let bar_err: Vec<f64> = traj.theta_bar.iter().zip(star).map(|(a, b)| a - b).collect();
    let t: Vec<f64> = s.matvec(&bar_err).iter().map(|v| sqrt_n * v).collect();

    let mut zeta_norms = vec![0.0; n];
    let mut w = vec![0.0; d];
    for i in 1..n {
        let z: Vec<f64> = s.matvec(&qs.q.apply(i, traj.xi.row(i - 1))).iter().map(|v| v / sqrt_n).collect();
        zeta_norms[i] = norm(&z);
        w.iter_mut().zip(&z).for_each(|(a, b)| *a -= b);
    }

    let e0: Vec<f64> = traj.theta(0).iter().zip(star).map(|(a, b)| a - b).collect();
    let d1: Vec<f64> =
        s.matvec(&qs.q.apply(0, &e0)).iter().map(|v| v / (sqrt_n * traj.schedule.ell0)).collect();
    let d2: Vec<f64> = weighted_sum(qs, n, |i| traj.eta.row(i - 1).to_vec()).iter().map(|v| -v).collect();
    let d3: Vec<f64> = weighted_sum(qs, n, |i| problem.h_remainder(traj.theta(i - 1))).iter().map(|v| -v).collect();

    let residual = (0..d).map(|k| (t[k] - w[k] - d1[k] - d2[k] - d3[k]).powi(2)).sum::<f64>().sqrt();
    Ok(AsgdDecomposition { t, w, d1, d2, d3, residual, zeta_norms })
}

/// `θ^{(i)}`: identical to `θ` before step `i`, a fresh draw at step `i`, the original draws after.
#[derive(Clone, Debug)]
pub struct CoupledPath {
    pub i: usize,
    pub thetas: Matrix,
    pub eta: Matrix,
}

pub fn coupled_path(traj: &SgdTrajectory, problem: &SgdProblem, i: usize, fresh: &[f64]) -> Result<CoupledPath, AsgdError> {
    let n = traj.n();
    let d = problem.dim();
    if i == 0 || i > n {
        return Err(AsgdError::InvalidProblem(format!("coupling index {i} outside 1..={n}")));
    }
    let mut thetas = Matrix::zeros(n + 1, d);
    let mut eta = Matrix::zeros(n, d);
    for j in 0..i {
        thetas.row_mut(j).copy_from_slice(traj.theta(j));
    }
    for j in 0..i - 1 {
        eta.row_mut(j).copy_from_slice(traj.eta.row(j));
    }
    let mut next = vec![0.0; d];
    let (mut x, mut e) = (vec![0.0; d], vec![0.0; d]);
    for j in i..=n {
        let raw = if j == i { fresh } else { traj.raw.row(j - 1) };
        problem.step(thetas.row(j - 1), raw, traj.schedule.ell(j), &mut next, &mut x, &mut e);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(AsgdError::Divergence { step: j });
        }
        thetas.row_mut(j).copy_from_slice(&next);
        eta.row_mut(j - 1).copy_from_slice(&e);
    }
    Ok(CoupledPath { i, thetas, eta })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooEntry {
    pub i: usize,
    pub zeta_norm: f64,
    pub delta2: f64,
    pub delta3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsgdDeltas {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Realized `λ_min(Σ_n)^{−1/2}`.
    pub c1: f64,
    pub l1: f64,
    pub loo: Vec<LooEntry>,
    /// Indices whose coupled path diverged.
    pub divergent: Vec<usize>,
}

impl AsgdDeltas {
    pub fn total(&self) -> f64 {
        self.delta1 + self.delta2 + self.delta3
    }

    pub fn loo_total(&self, e: &LooEntry) -> f64 {
        self.delta1 + e.delta2 + e.delta3
    }
}

// C₁ L₁ n^{−1/2} Σ_{i=1}^{n−1} p_i ‖θ_{i−1} − θ*‖².
fn delta3_of(thetas: &Matrix, star: &[f64], qs: &QSigma, l1: f64, n: usize) -> f64 {
    if l1 == 0.0 {
        return 0.0;
    }
    let s: f64 = (1..n).map(|i| qs.p[i] * dist(thetas.row(i - 1), star).powi(2)).sum();
    qs.c1() * l1 * s / (n as f64).sqrt()
}

/// `Δ₁ = ‖D₁‖`, `Δ₂ = ‖D₂‖`, `Δ₃`, and `(Δ₂^{(i)}, Δ₃^{(i)})` from coupled paths for `indices ⊂ 1..n−1`.
pub fn deltas_and_loo(
    traj: &SgdTrajectory,
    problem: &SgdProblem,
    qs: &QSigma,
    dec: &AsgdDecomposition,
    indices: &[usize],
    source: &mut RandomSource,
) -> Result<AsgdDeltas, AsgdError> {
    check_lengths(traj, qs)?;
    let n = traj.n();
    let l1 = problem.constants.l1();
    let fresh = problem.draw_raw(indices.len(), source)?;
    let results: Vec<Result<LooEntry, usize>> = indices
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let path = coupled_path(traj, problem, i, fresh.row(k)).map_err(|_| i)?;
            let d2 = norm(&weighted_sum(qs, n, |j| path.eta.row(j - 1).to_vec()));
            let d3 = delta3_of(&path.thetas, &problem.theta_star, qs, l1, n);
            Ok(LooEntry { i, zeta_norm: dec.zeta_norms[i], delta2: d2, delta3: d3 })
        })
        .collect();
    let mut loo = Vec::with_capacity(indices.len());
    let mut divergent = Vec::new();
    for r in results {
        match r {
            Ok(e) => loo.push(e),
            Err(i) => divergent.push(i),
        }
    }
    Ok(AsgdDeltas {
        delta1: norm(&dec.d1),
        delta2: norm(&dec.d2),
        delta3: delta3_of(&traj.thetas, &problem.theta_star, qs, l1, n),
        c1: qs.c1(),
        l1,
        loo,
        divergent,
    })
}

#[derive(Clone, Debug)]
pub struct AsgdReplication {
    pub decomposition: AsgdDecomposition,
    pub deltas: AsgdDeltas,
    pub coupling: Replication,
    pub recursion_residual: f64,
}

/// One run with its decomposition and (for `loo_k > 0`) a subsample of coupled paths.
pub fn asgd_replication(
    problem: &SgdProblem,
    schedule: &Schedule,
    qs: &QSigma,
    source: &mut RandomSource,
    loo_k: usize,
) -> Result<AsgdReplication, AsgdError> {
    let traj = run(problem, schedule, source)?;
    let dec = decompose(&traj, problem, qs)?;
    let n = traj.n();
    let indices: Vec<usize> = if loo_k == 0 {
        Vec::new()
    } else {
        loo_subsample(n - 1, loo_k, &mut source.substream(1)).into_iter().map(|i| i + 1).collect()
    };
    let deltas = deltas_and_loo(&traj, problem, qs, &dec, &indices, &mut source.substream(2))?;
    let coupling = Replication {
        n: n - 1,
        w_norm: norm(&dec.w),
        delta: deltas.total(),
        loo: deltas.loo.iter().map(|e| (e.zeta_norm, deltas.loo_total(e))).collect(),
        gamma: dec.gamma(),
        outside_o: false,
    };
    Ok(AsgdReplication { recursion_residual: traj.recursion_residual(problem), decomposition: dec, deltas, coupling })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asgd::{Multiplicative, ObjectiveConfig, SgdProblemConfig};
    use crate::linalg::SymMatrix;
    use crate::stats_core::{MeanAcc, NoiseSpec};

    fn quad() -> SgdProblem {
        SgdProblem::quadratic(SymMatrix::from_diag(&[1.0, 2.0]), vec![0.5, -0.5], NoiseSpec::standard_gaussian(2)).unwrap()
    }

    fn noisy_logistic(c1: f64) -> SgdProblem {
        SgdProblemConfig {
            objective: ObjectiveConfig::LogisticLike { mu: 1.0, w: 2.0 },
            theta_star: vec![0.0, 0.0],
            noise: NoiseSpec::standard_gaussian(2),
            multiplicative: Multiplicative::SignScaled { c1 },
            init: Default::default(),
            constants: Default::default(),
        }
        .build()
        .unwrap()
    }

    #[test]
    fn quadratic_has_zero_d2_d3() {
        let p = quad();
        let s = Schedule::new(1.0, 0.75, 256).unwrap();
        let qs = QSigma::new(&p.g, &s, &p.sigma_xi).unwrap();
        let rep = asgd_replication(&p, &s, &qs, &mut RandomSource::new(1, 0), 16).unwrap();
        let dec = &rep.decomposition;
        assert!(dec.d2.iter().chain(&dec.d3).all(|&v| v == 0.0));
        assert!(dec.residual <= 1e-10, "{}", dec.residual);
        assert_eq!(rep.deltas.delta2, 0.0);
        assert_eq!(rep.deltas.delta3, 0.0);
        assert!(rep.deltas.loo.iter().all(|e| e.delta2 == 0.0 && e.delta3 == 0.0));
        assert_eq!(rep.deltas.loo.len(), 16);
    }

    #[test]
    fn nonlinear_identity_and_bounds() {
        let p = noisy_logistic(0.3);
        let s = Schedule::new(0.5, 0.7, 400).unwrap();
        let qs = QSigma::new(&p.g, &s, &p.sigma_xi).unwrap();
        for seed in 0..5 {
            let rep = asgd_replication(&p, &s, &qs, &mut RandomSource::new(seed, 0), 8).unwrap();
            let dec = &rep.decomposition;
            assert!(dec.residual <= 1e-10, "{}", dec.residual);
            assert!(norm(&dec.d3) <= rep.deltas.delta3 * (1.0 + 1e-12));
            assert!(rep.deltas.delta2 > 0.0);
            assert!(rep.deltas.divergent.is_empty());
        }
    }

    #[test]
    fn coupled_prefix_is_bitwise() {
        let p = noisy_logistic(0.2);
        let s = Schedule::new(0.5, 0.75, 100).unwrap();
        let traj = run(&p, &s, &mut RandomSource::new(3, 0)).unwrap();
        let fresh = p.draw_raw(1, &mut RandomSource::new(4, 0)).unwrap();
        for i in [1, 17, 100] {
            let path = coupled_path(&traj, &p, i, fresh.row(0)).unwrap();
            for j in 0..i {
                assert_eq!(path.thetas.row(j), traj.theta(j));
            }
            assert_ne!(path.thetas.row(i), traj.theta(i));
        }
    }

    #[test]
    fn no_multiplicative_noise_means_zero_d2_loo() {
        let p = noisy_logistic(0.0);
        let s = Schedule::new(0.5, 0.75, 128).unwrap();
        let qs = QSigma::new(&p.g, &s, &p.sigma_xi).unwrap();
        let rep = asgd_replication(&p, &s, &qs, &mut RandomSource::new(5, 0), 10).unwrap();
        assert_eq!(rep.deltas.delta2, 0.0);
        assert!(rep.deltas.loo.iter().all(|e| e.delta2 == 0.0));
    }

    #[test]
    fn w_has_identity_covariance() {
        let p = quad();
        let s = Schedule::new(1.0, 0.75, 64).unwrap();
        let qs = QSigma::new(&p.g, &s, &p.sigma_xi).unwrap();
        let reps = 4000;
        let mut acc = vec![MeanAcc::default(); 3];
        for r in 0..reps {
            let traj = run(&p, &s, &mut RandomSource::new(21, r)).unwrap();
            let w = decompose(&traj, &p, &qs).unwrap().w;
            acc[0].push(w[0] * w[0]);
            acc[1].push(w[1] * w[1]);
            acc[2].push(w[0] * w[1]);
        }
        for (k, want) in [1.0, 1.0, 0.0].iter().enumerate() {
            let e = acc[k].estimate();
            assert!((e.value - want).abs() <= 5.0 * e.stderr, "{k}: {e:?}");
        }
    }
}
