//! Bound formulas evaluated from analytic or Monte Carlo ingredients.
//!
//! Every report stores its terms as `(name, coefficient, estimate)` triples and
//! its value is exactly `Σ coefficient · estimate.value`, so a consumer can
//! always recompute the number from the breakdown. Standard errors propagate
//! linearly (`Σ |coefficient| · stderr`), which is conservative for correlated
//! ingredients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats_core::{Estimate, MeanAcc, RandomSource};

/// Default leave-one-out subsample size cap.
pub const DEFAULT_LOO_SUBSAMPLE: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("{name} must be nonnegative and finite, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("oc_prob must lie in [0, 1], got {0}")]
    Probability(f64),
}

/// Ingredients of the leave-one-out bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingTerms {
    /// `E{‖W‖ Δ}`.
    pub wd_term: Estimate,
    /// `Σᵢ E{‖ξᵢ‖ |Δ − Δ^{(i)}|}`.
    pub loo_term: Estimate,
    /// `P(O^c)`; zero without truncation.
    pub oc_prob: Estimate,
    /// `Σᵢ E‖ξᵢ‖³`.
    pub gamma: Estimate,
}

impl CouplingTerms {
    pub fn validate(&self) -> Result<(), BoundError> {
        for (name, e) in [("wd_term", self.wd_term), ("loo_term", self.loo_term), ("gamma", self.gamma)] {
            check_nonneg(name, e)?;
        }
        check_nonneg("oc_prob", self.oc_prob)?;
        if self.oc_prob.value > 1.0 {
            return Err(BoundError::Probability(self.oc_prob.value));
        }
        Ok(())
    }

    fn is_analytic(&self) -> bool {
        [self.wd_term, self.loo_term, self.oc_prob, self.gamma].iter().all(|e| e.stderr == 0.0)
    }
}

fn check_nonneg(name: &'static str, e: Estimate) -> Result<(), BoundError> {
    if !(e.value >= 0.0) || !e.value.is_finite() || !(e.stderr >= 0.0) {
        return Err(BoundError::Negative { name, value: e.value });
    }
    Ok(())
}

/// Ingredients of the two-part remainder bound with `Δ = Δ₁ + Δ₂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCouplingTerms {
    pub gamma: Estimate,
    /// `E{‖W‖ (Δ₁ + Δ₂)}`.
    pub wd_term: Estimate,
    /// `Σᵢ E{‖ξᵢ‖ |Δ₁ − Δ₁^{(i)}|}`.
    pub loo_delta1: Estimate,
    /// `Σᵢ E{‖ξᵢ‖ |Δ₂ − Δ₂^{(i)}|}`.
    pub loo_delta2: Estimate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    Thm21,
    Cor22,
    Cor23,
    Prop41,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub name: String,
    pub coefficient: f64,
    pub estimate: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub formula: Formula,
    pub dim: usize,
    pub value: f64,
    pub stderr: f64,
    pub terms: Vec<BoundTerm>,
    /// True only when every ingredient is closed-form (zero stderr).
    pub analytic: bool,
    pub sigma_floor: Option<f64>,
    /// Solver tolerance behind per-replication Δ values, when Δ came from an optimizer.
    pub solver_tolerance: Option<f64>,
}

impl BoundReport {
    fn from_terms(formula: Formula, dim: usize, terms: Vec<BoundTerm>, analytic: bool) -> Self {
        let value = terms.iter().map(|t| t.coefficient * t.estimate.value).sum();
        let stderr = terms.iter().map(|t| t.coefficient.abs() * t.estimate.stderr).sum();
        Self { formula, dim, value, stderr, terms, analytic, sigma_floor: None, solver_tolerance: None }
    }

    /// Recomputes `Σ coefficient · value`; equals `self.value` by construction.
    pub fn recomputed(&self) -> f64 {
        self.terms.iter().map(|t| t.coefficient * t.estimate.value).sum()
    }

    pub fn with_solver_tolerance(mut self, tol: f64) -> Self {
        self.solver_tolerance = Some(tol);
        self
    }

    pub fn term(&self, name: &str) -> Option<&BoundTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

fn term(name: &str, coefficient: f64, estimate: Estimate) -> BoundTerm {
    BoundTerm { name: name.to_string(), coefficient, estimate }
}

/// `259 √d γ + 2 E{‖W‖Δ} + 2 Σᵢ E{‖ξᵢ‖ |Δ − Δ^{(i)}|}`.
pub fn thm21_bound(terms: &CouplingTerms, d: usize) -> Result<BoundReport, BoundError> {
    terms.validate()?;
    let sd = (d as f64).sqrt();
    Ok(BoundReport::from_terms(
        Formula::Thm21,
        d,
        vec![term("gamma", 259.0 * sd, terms.gamma), term("wd", 2.0, terms.wd_term), term("loo", 2.0, terms.loo_term)],
        terms.is_analytic(),
    ))
}

/// The leave-one-out bound plus `P(O^c)`.
pub fn cor22_bound(terms: &CouplingTerms, d: usize) -> Result<BoundReport, BoundError> {
    let mut r = thm21_bound(terms, d)?;
    r.terms.push(term("oc_prob", 1.0, terms.oc_prob));
    let mut out = BoundReport::from_terms(Formula::Cor22, d, r.terms, terms.is_analytic());
    out.solver_tolerance = r.solver_tolerance;
    Ok(out)
}

/// The leave-one-out bound for an unstandardized statistic with `λ_min(Σ) ≥ σ`.
pub fn cor23_bound(terms: &CouplingTerms, d: usize, sigma: f64) -> Result<BoundReport, BoundError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(BoundError::Sigma(sigma));
    }
    terms.validate()?;
    let sd = (d as f64).sqrt();
    let mut r = BoundReport::from_terms(
        Formula::Cor23,
        d,
        vec![
            term("gamma", 259.0 * sigma.powf(-1.5) * sd, terms.gamma),
            term("wd", 2.0 / sigma, terms.wd_term),
            term("loo", 2.0 / sigma, terms.loo_term),
        ],
        terms.is_analytic(),
    );
    r.sigma_floor = Some(sigma);
    Ok(r)
}

/// `19 √d γ + 2 E{‖W‖(Δ₁+Δ₂)} + 2 Σᵢ Σⱼ E{‖ξᵢ‖ |Δⱼ − Δⱼ^{(i)}|}`.
pub fn prop41_bound(terms: &SplitCouplingTerms, d: usize) -> Result<BoundReport, BoundError> {
    for (name, e) in [
        ("gamma", terms.gamma),
        ("wd_term", terms.wd_term),
        ("loo_delta1", terms.loo_delta1),
        ("loo_delta2", terms.loo_delta2),
    ] {
        check_nonneg(name, e)?;
    }
    let sd = (d as f64).sqrt();
    let analytic = [terms.gamma, terms.wd_term, terms.loo_delta1, terms.loo_delta2].iter().all(|e| e.stderr == 0.0);
    Ok(BoundReport::from_terms(
        Formula::Prop41,
        d,
        vec![
            term("gamma", 19.0 * sd, terms.gamma),
            term("wd", 2.0, terms.wd_term),
            term("loo_delta1", 2.0, terms.loo_delta1),
            term("loo_delta2", 2.0, terms.loo_delta2),
        ],
        analytic,
    ))
}

/// Shell-probability bound for a deterministic layer width: `2√d ε + 19√d γ`.
pub fn prop41_constant_eps(gamma: f64, d: usize, eps: f64) -> f64 {
    let sd = (d as f64).sqrt();
    2.0 * sd * eps + 19.0 * sd * gamma
}

/// One replication's contribution to the coupling expectations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub n: usize,
    pub w_norm: f64,
    pub delta: f64,
    /// `(‖ξᵢ‖, Δ^{(i)})` for the probed indices.
    pub loo: Vec<(f64, f64)>,
    /// `Σᵢ ‖ξᵢ‖³` of this replication.
    pub gamma: f64,
    /// Whether the truncation event failed.
    pub outside_o: bool,
}

impl Replication {
    /// `(n/k) Σ_{i∈S} ‖ξᵢ‖ |Δ − Δ^{(i)}|`, unbiased for the full sum under uniform sampling.
    pub fn loo_sum(&self) -> f64 {
        if self.loo.is_empty() {
            return 0.0;
        }
        let scale = self.n as f64 / self.loo.len() as f64;
        scale * self.loo.iter().map(|(xn, di)| xn * (self.delta - di).abs()).sum::<f64>()
    }
}

/// Mergeable replication averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingAccumulator {
    pub wd: MeanAcc,
    pub loo: MeanAcc,
    pub oc: MeanAcc,
    pub gamma: MeanAcc,
}

impl CouplingAccumulator {
    pub fn push(&mut self, r: &Replication) {
        self.wd.push(r.w_norm * r.delta);
        self.loo.push(r.loo_sum());
        self.oc.push(if r.outside_o { 1.0 } else { 0.0 });
        self.gamma.push(r.gamma);
    }

    pub fn merge(&mut self, other: &CouplingAccumulator) {
        self.wd.merge(&other.wd);
        self.loo.merge(&other.loo);
        self.oc.merge(&other.oc);
        self.gamma.merge(&other.gamma);
    }

    pub fn terms(&self) -> CouplingTerms {
        CouplingTerms {
            wd_term: self.wd.estimate(),
            loo_term: self.loo.estimate(),
            oc_prob: self.oc.estimate(),
            gamma: self.gamma.estimate(),
        }
    }
}

/// Runs `reps` replications (possibly in parallel) and averages in index order,
/// so the result does not depend on the thread count.
pub fn estimate_coupling<E, F>(reps: usize, generator: F) -> Result<(CouplingTerms, Vec<Replication>), E>
where
    E: Send,
    F: Fn(u64) -> Result<Replication, E> + Sync,
{
    let samples: Vec<Replication> = (0..reps as u64).into_par_iter().map(&generator).collect::<Result<_, E>>()?;
    let mut acc = CouplingAccumulator::default();
    for s in &samples {
        acc.push(s);
    }
    Ok((acc.terms(), samples))
}

/// `k` distinct indices from `0..n`, uniformly, in increasing order.
pub fn loo_subsample(n: usize, k: usize, source: &mut RandomSource) -> Vec<usize> {
    let k = k.min(n);
    if k == n {
        return (0..n).collect();
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for j in 0..k {
        let pick = j + source.below((n - j) as u64) as usize;
        pool.swap(j, pick);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

/// Soundness check: empirical distance within the bound plus three combined standard errors.
pub fn within_bound(distance: Estimate, bound: &BoundReport) -> bool {
    let combined = (distance.stderr.powi(2) + bound.stderr.powi(2)).sqrt();
    distance.value <= bound.value + 3.0 * combined
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(gamma: f64, wd: f64, loo: f64, oc: f64) -> CouplingTerms {
        CouplingTerms {
            gamma: Estimate::exact(gamma),
            wd_term: Estimate::exact(wd),
            loo_term: Estimate::exact(loo),
            oc_prob: Estimate::exact(oc),
        }
    }

    #[test]
    fn thm21_examples() {
        let r = thm21_bound(&terms(0.01, 0.0, 0.0, 0.0), 4).unwrap();
        assert!((r.value - 5.18).abs() < 1e-12);
        assert!(r.analytic);
        let r = thm21_bound(&terms(0.1, 0.2, 0.3, 0.0), 1).unwrap();
        assert!((r.value - (259.0 * 0.1 + 0.4 + 0.6)).abs() < 1e-12);
        assert_eq!(thm21_bound(&terms(0.0, 0.0, 0.0, 0.0), 3).unwrap().value, 0.0);
    }

    #[test]
    fn cor22_examples() {
        let t = terms(0.02, 0.1, 0.05, 0.0);
        assert_eq!(cor22_bound(&t, 2).unwrap().value, thm21_bound(&t, 2).unwrap().value);
        assert_eq!(cor22_bound(&terms(0.0, 0.0, 0.0, 1.0), 2).unwrap().value, 1.0);
        assert!(cor22_bound(&terms(0.0, 0.0, 0.0, 1.5), 2).is_err());
    }

    #[test]
    fn cor23_examples() {
        let t = terms(0.02, 0.1, 0.05, 0.0);
        assert_eq!(cor23_bound(&t, 3, 1.0).unwrap().value, thm21_bound(&t, 3).unwrap().value);
        let g = terms(0.02, 0.0, 0.0, 0.0);
        let ratio = cor23_bound(&g, 2, 4.0).unwrap().value / thm21_bound(&g, 2).unwrap().value;
        assert!((ratio - 0.125).abs() < 1e-15);
        let t = terms(0.013, 0.27, 0.41, 0.0);
        let hand = 259.0 * 0.25f64.powf(-1.5) * 2f64.sqrt() * 0.013 + 2.0 / 0.25 * 0.27 + 2.0 / 0.25 * 0.41;
        assert!((cor23_bound(&t, 2, 0.25).unwrap().value - hand).abs() < 1e-10);
        assert!(cor23_bound(&t, 2, 0.0).is_err());
    }

    #[test]
    fn prop41_examples() {
        assert!((prop41_constant_eps(0.02, 1, 0.1) - 0.58).abs() < 1e-12);
        assert_eq!(prop41_constant_eps(0.0, 3, 0.0), 0.0);
        let t = SplitCouplingTerms {
            gamma: Estimate::exact(0.01),
            wd_term: Estimate::new(0.2, 0.01),
            loo_delta1: Estimate::exact(0.0),
            loo_delta2: Estimate::exact(0.0),
        };
        let r = prop41_bound(&t, 4).unwrap();
        assert!((r.value - (19.0 * 2.0 * 0.01 + 0.4)).abs() < 1e-12);
        assert!(!r.analytic);
        assert!((r.stderr - 0.02).abs() < 1e-15);
    }

    #[test]
    fn replication_loo_scaling() {
        let r = Replication { n: 100, w_norm: 1.0, delta: 0.5, loo: vec![(2.0, 0.25), (1.0, 0.75)], ..Default::default() };
        assert!((r.loo_sum() - 50.0 * (2.0 * 0.25 + 1.0 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn subsample_distinct_and_sorted() {
        let mut src = RandomSource::new(1, 1);
        let s = loo_subsample(1000, 64, &mut src);
        assert_eq!(s.len(), 64);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(loo_subsample(10, 64, &mut src), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_estimator_unbiased() {
        // The subsampled sum averages to the full leave-one-out sum.
        let n = 50;
        let xi: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        let di: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let delta = 0.3;
        let full: f64 = (0..n).map(|i| xi[i] * (delta - di[i]).abs()).sum();
        let mut src = RandomSource::new(5, 0);
        let acc: MeanAcc = (0..20_000)
            .map(|_| {
                let idx = loo_subsample(n, 8, &mut src);
                Replication { n, delta, loo: idx.iter().map(|&i| (xi[i], di[i])).collect(), ..Default::default() }
                    .loo_sum()
            })
            .collect();
        let e = acc.estimate();
        assert!((e.value - full).abs() < 4.0 * e.stderr);
    }

    #[test]
    fn estimate_is_order_independent() {
        let gen = |i: u64| -> Result<Replication, ()> {
            let mut src = RandomSource::new(9, i);
            Ok(Replication { n: 4, w_norm: src.uniform(), delta: src.uniform(), gamma: src.uniform(), ..Default::default() })
        };
        let (a, _) = estimate_coupling(200, gen).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (b, _) = pool.install(|| estimate_coupling(200, gen)).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bounds_monotone(g in 0.0f64..1.0, wd in 0.0f64..1.0, loo in 0.0f64..1.0, oc in 0.0f64..0.5,
                               bump in 0.0f64..0.5, which in 0usize..4, d in 1usize..8, sigma in 0.1f64..4.0) {
                let base = terms(g, wd, loo, oc);
                let mut up = base;
                match which {
                    0 => up.gamma.value += bump,
                    1 => up.wd_term.value += bump,
                    2 => up.loo_term.value += bump,
                    _ => up.oc_prob.value += bump,
                }
                prop_assert!(thm21_bound(&up, d).unwrap().value >= thm21_bound(&base, d).unwrap().value);
                prop_assert!(cor22_bound(&up, d).unwrap().value >= cor22_bound(&base, d).unwrap().value);
                prop_assert!(cor23_bound(&up, d, sigma).unwrap().value >= cor23_bound(&base, d, sigma).unwrap().value);
                let r = cor22_bound(&base, d).unwrap();
                prop_assert_eq!(r.value, r.recomputed());
                prop_assert_eq!(cor23_bound(&base, d, 1.0).unwrap().value, thm21_bound(&base, d).unwrap().value);
            }
        }
    }
}
