//! Empirical convex-set distances over a finite test family, the shell event
//! check, and log-log rate fits.
//!
//! Every distance reported here is relative to the test family: the supremum
//! over all convex sets is bounded from below, never computed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex_geom::{ConvexBody, GeomError};
use crate::linalg::{dot, norm, Matrix};
use crate::stats_core::{chi_square_cdf, chi_square_ppf, norm_cdf, norm_ppf, Estimate, RandomSource};

/// Smallest sample size accepted by [`empirical_distance`].
pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistanceError {
    #[error("need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("test family is empty")]
    EmptyFamily,
    #[error("inradius {inradius} does not exceed gamma {gamma}")]
    Inradius { inradius: f64, gamma: f64 },
    #[error("rate fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("rate fit needs positive values; point n={n} has value {value}")]
    NonPositive { n: f64, value: f64 },
    #[error("per-sample Δ has length {found}, expected 1 or {expected}")]
    DeltaLength { expected: usize, found: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Sizes of the three test sub-families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestFamily {
    pub halfspace_directions: usize,
    pub offsets_per_direction: usize,
    pub centered_balls: usize,
    pub random_boxes: usize,
    pub seed: u64,
}

impl Default for TestFamily {
    fn default() -> Self {
        Self { halfspace_directions: 64, offsets_per_direction: 21, centered_balls: 21, random_boxes: 32, seed: 0 }
    }
}

/// One member of a built family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestBody {
    /// `{x : ⟨directions[direction], x⟩ ≤ offset}`.
    HalfSpace { direction: usize, offset: f64 },
    CenteredBall { radius: f64 },
    /// `{x : lower ≤ Rᵀx ≤ upper}` with `R = rotations[rotation]`.
    RotatedBox { rotation: usize, lower: Vec<f64>, upper: Vec<f64> },
}

/// A family instantiated in a fixed dimension.
#[derive(Clone, Debug)]
pub struct BuiltFamily {
    pub dim: usize,
    pub directions: Vec<Vec<f64>>,
    pub rotations: Vec<Matrix>,
    pub bodies: Vec<TestBody>,
}

/// Probability levels for offsets and radii: `k` points evenly spread over [0.025, 0.975].
pub fn quantile_levels(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.5];
    }
    (0..k).map(|i| 0.025 + 0.95 * i as f64 / (k - 1) as f64).collect()
}

/// Direction grid on the unit sphere.
pub fn direction_grid(d: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..m)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / m as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        3 => {
            // Fibonacci spiral.
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..m)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / m as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * k as f64;
                    vec![r * phi.cos(), r * phi.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut src = RandomSource::new(seed, 0x6469_7273);
            (0..m)
                .map(|_| loop {
                    let mut v = vec![0.0; d];
                    src.fill_normal(&mut v);
                    let r = norm(&v);
                    if r > 0.0 {
                        break v.iter().map(|x| x / r).collect();
                    }
                })
                .collect()
        }
    }
}

/// Haar-ish random rotation by Gram–Schmidt on a Gaussian matrix.
pub fn random_rotation(d: usize, src: &mut RandomSource) -> Matrix {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for _ in 0..d {
            let mut v = vec![0.0; d];
            src.fill_normal(&mut v);
            for c in &cols {
                let p = dot(&v, c);
                crate::linalg::axpy(-p, c, &mut v);
            }
            let r = norm(&v);
            if r < 1e-8 {
                ok = false;
                break;
            }
            cols.push(v.iter().map(|x| x / r).collect());
        }
        if ok {
            let mut m = Matrix::zeros(d, d);
            for (j, c) in cols.iter().enumerate() {
                for i in 0..d {
                    m[(i, j)] = c[i];
                }
            }
            return m;
        }
    }
}

impl TestFamily {
    pub fn build(&self, d: usize) -> BuiltFamily {
        let directions = if self.halfspace_directions == 0 {
            Vec::new()
        } else {
            direction_grid(d, self.halfspace_directions, self.seed)
        };
        let mut bodies = Vec::new();
        let levels = quantile_levels(self.offsets_per_direction.max(1));
        if self.offsets_per_direction > 0 {
            for k in 0..directions.len() {
                for &q in &levels {
                    bodies.push(TestBody::HalfSpace { direction: k, offset: norm_ppf(q) });
                }
            }
        }
        if self.centered_balls > 0 {
            for q in quantile_levels(self.centered_balls) {
                bodies.push(TestBody::CenteredBall { radius: chi_square_ppf(q, d).sqrt() });
            }
        }
        let mut rotations = Vec::new();
        let mut src = RandomSource::new(self.seed, 0x626f_7865);
        for r in 0..self.random_boxes {
            rotations.push(random_rotation(d, &mut src));
            let mut lower = Vec::with_capacity(d);
            let mut upper = Vec::with_capacity(d);
            for _ in 0..d {
                let a = norm_ppf(0.02 + 0.96 * src.uniform());
                let b = norm_ppf(0.02 + 0.96 * src.uniform());
                lower.push(a.min(b));
                upper.push(a.max(b));
            }
            bodies.push(TestBody::RotatedBox { rotation: r, lower, upper });
        }
        BuiltFamily { dim: d, directions, rotations, bodies }
    }
}

impl BuiltFamily {
    /// `P(Z ∈ A)` in closed form.
    pub fn gaussian_prob(&self, body: &TestBody) -> f64 {
        match body {
            TestBody::HalfSpace { offset, .. } => norm_cdf(*offset),
            TestBody::CenteredBall { radius } => chi_square_cdf(radius * radius, self.dim),
            // Rotation invariance of N(0, I) reduces to the axis-aligned product.
            TestBody::RotatedBox { lower, upper, .. } => {
                lower.iter().zip(upper).map(|(&l, &u)| if l > 0.0 { norm_cdf(-l) - norm_cdf(-u) } else { norm_cdf(u) - norm_cdf(l) }).product()
            }
        }
    }

    pub fn contains(&self, body: &TestBody, x: &[f64]) -> bool {
        match body {
            TestBody::HalfSpace { direction, offset } => dot(x, &self.directions[*direction]) <= *offset,
            TestBody::CenteredBall { radius } => norm(x) <= *radius,
            TestBody::RotatedBox { rotation, lower, upper } => {
                let r = &self.rotations[*rotation];
                (0..self.dim).all(|j| {
                    let y: f64 = (0..self.dim).map(|i| r[(i, j)] * x[i]).sum();
                    lower[j] <= y && y <= upper[j]
                })
            }
        }
    }

    /// The body as a [`ConvexBody`] when one exists (rotated boxes become polytopes).
    pub fn as_convex_body(&self, body: &TestBody) -> ConvexBody {
        match body {
            TestBody::HalfSpace { direction, offset } => ConvexBody::HalfSpace(crate::convex_geom::HalfSpace {
                normal: self.directions[*direction].clone(),
                offset: *offset,
            }),
            TestBody::CenteredBall { radius } => ConvexBody::Ball { center: vec![0.0; self.dim], radius: *radius },
            TestBody::RotatedBox { rotation, lower, upper } => {
                let r = &self.rotations[*rotation];
                let mut faces = Vec::new();
                for j in 0..self.dim {
                    let col = r.column(j);
                    faces.push(crate::convex_geom::HalfSpace { normal: col.clone(), offset: upper[j] });
                    faces.push(crate::convex_geom::HalfSpace { normal: col.iter().map(|v| -v).collect(), offset: -lower[j] });
                }
                ConvexBody::Polytope { faces }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub value: f64,
    pub argmax: TestBody,
    /// `√(p̂(1−p̂)/N)` of the maximizing body.
    pub argmax_stderr: f64,
    /// Largest per-body standard error across the family.
    pub max_stderr: f64,
    pub sample_size: usize,
    pub family_size: usize,
}

impl DistanceEstimate {
    pub fn as_estimate(&self) -> Estimate {
        Estimate::new(self.value, self.argmax_stderr)
    }
}

/// `max_A |P̂(T ∈ A) − P(Z ∈ A)|` over the family built for the sample dimension.
pub fn empirical_distance(samples: &Matrix, family: &TestFamily) -> Result<DistanceEstimate, DistanceError> {
    let built = family.build(samples.cols());
    empirical_distance_built(samples, &built)
}

/// As [`empirical_distance`] over an already built family (or a sub-family of one).
pub fn empirical_distance_built(samples: &Matrix, built: &BuiltFamily) -> Result<DistanceEstimate, DistanceError> {
    let n = samples.rows();
    if n < MIN_SAMPLES {
        return Err(DistanceError::TooFewSamples(n));
    }
    if built.bodies.is_empty() {
        return Err(DistanceError::EmptyFamily);
    }
    let nf = n as f64;
    let mut sorted_proj: Vec<Option<Vec<f64>>> = vec![None; built.directions.len()];
    let mut norms: Option<Vec<f64>> = None;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut max_se = 0.0f64;
    for (k, body) in built.bodies.iter().enumerate() {
        let count = match body {
            TestBody::HalfSpace { direction, offset } => {
                let proj = sorted_proj[*direction].get_or_insert_with(|| {
                    let u = &built.directions[*direction];
                    let mut p: Vec<f64> = (0..n).map(|i| dot(samples.row(i), u)).collect();
                    p.sort_by(f64::total_cmp);
                    p
                });
                proj.partition_point(|&v| v <= *offset)
            }
            TestBody::CenteredBall { radius } => {
                let r = norms.get_or_insert_with(|| {
                    let mut v: Vec<f64> = (0..n).map(|i| norm(samples.row(i))).collect();
                    v.sort_by(f64::total_cmp);
                    v
                });
                r.partition_point(|&v| v <= *radius)
            }
            TestBody::RotatedBox { .. } => (0..n).filter(|&i| built.contains(body, samples.row(i))).count(),
        };
        let p_hat = count as f64 / nf;
        let se = (p_hat * (1.0 - p_hat) / nf).sqrt();
        max_se = max_se.max(se);
        let disc = (p_hat - built.gaussian_prob(body)).abs();
        if best.map_or(true, |(b, _, _)| disc > b) {
            best = Some((disc, k, se));
        }
    }
    let (value, k, se) = best.expect("nonempty family");
    Ok(DistanceEstimate {
        value,
        argmax: built.bodies[k].clone(),
        argmax_stderr: se,
        max_stderr: max_se,
        sample_size: n,
        family_size: built.bodies.len(),
    })
}

/// Per-sample or constant widths.
fn broadcast<'a>(v: &'a [f64], n: usize) -> Result<impl Fn(usize) -> f64 + 'a, DistanceError> {
    if v.len() != 1 && v.len() != n {
        return Err(DistanceError::DeltaLength { expected: n, found: v.len() });
    }
    Ok(move |i: usize| if v.len() == 1 { v[0] } else { v[i] })
}

/// Frequency of `W ∈ A^{4γ+Δ₁} \ A^{4γ−Δ̄₂}` with `Δ̄₂ = Δ₂ ∧ (r(Ā) − γ)`.
///
/// `delta1` and `delta2` hold one value per sample or a single shared value;
/// the truncation of `Δ₂` happens here. Negative enlargements are erosions.
pub fn shell_event_probability(
    samples_w: &Matrix,
    body: &ConvexBody,
    gamma: f64,
    delta1: &[f64],
    delta2: &[f64],
) -> Result<Estimate, DistanceError> {
    let r = body.inradius()?;
    if !(r > gamma) {
        return Err(DistanceError::Inradius { inradius: r, gamma });
    }
    let n = samples_w.rows();
    let d1 = broadcast(delta1, n)?;
    let d2 = broadcast(delta2, n)?;
    let mut hits = 0usize;
    for i in 0..n {
        let x = samples_w.row(i);
        let outer = 4.0 * gamma + d1(i);
        let inner = 4.0 * gamma - d2(i).min(r - gamma);
        let dist = body.distance(x)?;
        let in_outer = dist <= outer;
        let in_inner = if inner >= 0.0 { dist <= inner } else { body.shrink(-inner).contains(x) };
        if in_outer && !in_inner {
            hits += 1;
        }
    }
    let p = hits as f64 / n as f64;
    Ok(Estimate::new(p, (p * (1.0 - p) / n as f64).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares of `log value` on `log n`.
pub fn rate_fit(points: &[(f64, f64)]) -> Result<RateFit, DistanceError> {
    if points.len() < 3 {
        return Err(DistanceError::TooFewPoints(points.len()));
    }
    if let Some(&(n, value)) = points.iter().find(|(n, v)| !(*v > 0.0) || !(*n > 0.0)) {
        return Err(DistanceError::NonPositive { n, value });
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| n.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit { slope, intercept, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_samples(n: usize, d: usize, shift: &[f64], seed: u64) -> Matrix {
        let mut src = RandomSource::new(seed, 0);
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            src.fill_normal(m.row_mut(i));
            for (v, s) in m.row_mut(i).iter_mut().zip(shift) {
                *v += s;
            }
        }
        m
    }

    #[test]
    fn levels_and_sizes() {
        let q = quantile_levels(21);
        assert!((q[0] - 0.025).abs() < 1e-15 && (q[20] - 0.975).abs() < 1e-15);
        let f = TestFamily::default().build(2);
        assert_eq!(f.bodies.len(), 64 * 21 + 21 + 32);
        assert!(f.directions.iter().all(|u| (norm(u) - 1.0).abs() < 1e-14));
        for d in [3, 5] {
            assert!(TestFamily::default().build(d).directions.iter().all(|u| (norm(u) - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn null_case() {
        let s = gaussian_samples(100_000, 2, &[0.0, 0.0], 1);
        let e = empirical_distance(&s, &TestFamily::default()).unwrap();
        assert!(e.value <= 4.0 * e.max_stderr, "{} vs {}", e.value, e.max_stderr);
    }

    #[test]
    fn shifted_normal_half_spaces() {
        let s = gaussian_samples(100_000, 2, &[1.0, 0.0], 2);
        let e = empirical_distance(&s, &TestFamily::default()).unwrap();
        let exact = 2.0 * norm_cdf(0.5) - 1.0;
        assert!((e.value - exact).abs() < 0.01, "{} vs {exact}", e.value);
    }

    #[test]
    fn single_body_all_inside() {
        let built = BuiltFamily {
            dim: 1,
            directions: vec![vec![1.0]],
            rotations: vec![],
            bodies: vec![TestBody::HalfSpace { direction: 0, offset: 0.0 }],
        };
        let s = Matrix::from_vec(200, 1, vec![-1.0; 200]);
        let e = empirical_distance_built(&s, &built).unwrap();
        assert_eq!(e.value, 0.5);
    }

    #[test]
    fn rejects_small_or_empty() {
        let s = Matrix::zeros(50, 2);
        assert_eq!(empirical_distance(&s, &TestFamily::default()), Err(DistanceError::TooFewSamples(50)));
        let empty = TestFamily { halfspace_directions: 0, centered_balls: 0, random_boxes: 0, ..Default::default() };
        assert_eq!(empirical_distance(&Matrix::zeros(200, 2), &empty), Err(DistanceError::EmptyFamily));
    }

    #[test]
    fn halfspace_counts_agree_with_membership() {
        let s = gaussian_samples(500, 3, &[0.2, -0.1, 0.0], 3);
        let built = TestFamily { halfspace_directions: 8, centered_balls: 0, random_boxes: 0, ..Default::default() }.build(3);
        for body in &built.bodies {
            let cb = built.as_convex_body(body);
            let by_member = (0..500).filter(|&i| cb.contains(s.row(i))).count();
            let single = BuiltFamily { bodies: vec![body.clone()], ..built.clone() };
            let e = empirical_distance_built(&s, &single).unwrap();
            let p_hat = by_member as f64 / 500.0;
            assert_eq!(e.value, (p_hat - built.gaussian_prob(body)).abs());
        }
    }

    #[test]
    fn rotated_box_matches_polytope() {
        let s = gaussian_samples(300, 2, &[0.0, 0.0], 4);
        let built = TestFamily { halfspace_directions: 0, centered_balls: 0, random_boxes: 4, ..Default::default() }.build(2);
        for body in &built.bodies {
            let poly = built.as_convex_body(body);
            for i in 0..300 {
                let x = s.row(i);
                let a = built.contains(body, x);
                let b = poly.contains(x);
                if a != b {
                    // Only boundary round-off may differ.
                    assert!(poly.distance(x).unwrap() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shell_examples() {
        let s = gaussian_samples(200_000, 1, &[0.0], 5);
        let a = ConvexBody::half_space(vec![1.0], 0.0).unwrap();
        assert_eq!(shell_event_probability(&s, &a, 0.01, &[0.0], &[0.0]).unwrap().value, 0.0);
        let (g, eps) = (0.01, 0.2);
        let e = shell_event_probability(&s, &a, g, &[eps], &[0.0]).unwrap();
        let exact = norm_cdf(4.0 * g + eps) - norm_cdf(4.0 * g);
        assert!((e.value - exact).abs() < 3.0 * e.stderr);
        let ball = ConvexBody::ball(vec![0.0], 0.005).unwrap();
        assert!(matches!(shell_event_probability(&s, &ball, 0.01, &[0.1], &[0.0]), Err(DistanceError::Inradius { .. })));
    }

    #[test]
    fn rate_fit_examples() {
        let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(-0.5))).collect();
        let f = rate_fit(&pts).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0].iter().map(|&n: &f64| (n, n.powf(-0.75))).collect();
        assert!((rate_fit(&pts).unwrap().slope + 0.75).abs() < 1e-12);
        let mut src = RandomSource::new(6, 0);
        let pts: Vec<(f64, f64)> =
            (6..14).map(|k| (2f64.powi(k), 2f64.powi(-k) * (1.0 + 0.05 * src.normal()))).collect();
        assert!((rate_fit(&pts).unwrap().slope + 1.0).abs() < 0.05);
        assert!(rate_fit(&pts[..2]).is_err());
        assert!(rate_fit(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn nested_families_monotone(seed in 0u64..1000, cut in 1usize..200) {
                let s = gaussian_samples(300, 2, &[0.3, 0.0], seed);
                let built = TestFamily { halfspace_directions: 8, ..Default::default() }.build(2);
                let cut = cut.min(built.bodies.len());
                let sub = BuiltFamily { bodies: built.bodies[..cut].to_vec(), ..built.clone() };
                let small = empirical_distance_built(&s, &sub).unwrap().value;
                let big = empirical_distance_built(&s, &built).unwrap().value;
                prop_assert!(small <= big);
            }

            #[test]
            fn shell_monotone(seed in 0u64..1000, e1 in 0.0f64..0.3, b1 in 0.0f64..0.3, e2 in 0.0f64..0.3, b2 in 0.0f64..0.3) {
                let s = gaussian_samples(400, 2, &[0.0, 0.0], seed);
                let body = ConvexBody::ball(vec![0.0, 0.0], 1.0).unwrap();
                let g = 0.02;
                let base = shell_event_probability(&s, &body, g, &[e1], &[e2]).unwrap().value;
                let more1 = shell_event_probability(&s, &body, g, &[e1 + b1], &[e2]).unwrap().value;
                let more2 = shell_event_probability(&s, &body, g, &[e1], &[e2 + b2]).unwrap().value;
                prop_assert!(base <= more1);
                prop_assert!(base <= more2);
            }
        }
    }
}
