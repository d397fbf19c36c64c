//! Convex bodies in R^d: projections, Minkowski enlargement and erosion,
//! inradius, and the projection-difference transport field.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dist, dot, norm};

/// Unit-normal tolerance for half-spaces.
pub const NORMAL_TOL: f64 = 1e-12;
/// Dykstra stops once a full sweep moves the iterate less than this.
pub const DYKSTRA_TOL: f64 = 1e-10;
pub const DYKSTRA_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("operation is undefined on the empty set")]
    EmptyBody,
    #[error("dimension mismatch: body has dimension {expected}, point has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("half-space normal must have unit norm, got {0}")]
    NotUnitNormal(f64),
    #[error("invalid body: {0}")]
    Invalid(String),
}

/// `{x : ⟨normal, x⟩ ≤ offset}` with a unit normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl HalfSpace {
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self, GeomError> {
        let n = norm(&normal);
        if normal.is_empty() || (n - 1.0).abs() > NORMAL_TOL {
            return Err(GeomError::NotUnitNormal(n));
        }
        if !offset.is_finite() && offset != f64::INFINITY {
            return Err(GeomError::Invalid(format!("half-space offset {offset}")));
        }
        Ok(Self { normal, offset })
    }

    /// Rescales an arbitrary nonzero normal (and the offset with it).
    pub fn normalized(normal: &[f64], offset: f64) -> Result<Self, GeomError> {
        let n = norm(normal);
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeomError::NotUnitNormal(n));
        }
        Ok(Self { normal: normal.iter().map(|a| a / n).collect(), offset: offset / n })
    }

    #[inline]
    fn excess(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) - self.offset
    }

    fn project_into(&self, x: &mut [f64]) {
        let e = self.excess(x);
        if e > 0.0 {
            for (xi, ui) in x.iter_mut().zip(&self.normal) {
                *xi -= e * ui;
            }
        }
    }
}

/// A closed convex subset of R^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "parameters", rename_all = "snake_case")]
#[serde(try_from = "RawBody")]
pub enum ConvexBody {
    Ball { center: Vec<f64>, radius: f64 },
    HalfSpace(HalfSpace),
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Polytope { faces: Vec<HalfSpace> },
    /// `A^eps` for a base body without a closed-form enlargement.
    Enlarged { base: Box<ConvexBody>, eps: f64 },
    Empty { dim: usize },
}

// Unvalidated mirror used for deserialization.
#[derive(Deserialize)]
#[serde(tag = "variant", content = "parameters", rename_all = "snake_case", deny_unknown_fields)]
enum RawBody {
    Ball { center: Vec<f64>, radius: f64 },
    HalfSpace { normal: Vec<f64>, offset: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Polytope { faces: Vec<HalfSpace> },
    Enlarged { base: Box<ConvexBody>, eps: f64 },
    Empty { dim: usize },
}

impl TryFrom<RawBody> for ConvexBody {
    type Error = GeomError;

    fn try_from(raw: RawBody) -> Result<Self, Self::Error> {
        match raw {
            RawBody::Ball { center, radius } => ConvexBody::ball(center, radius),
            RawBody::HalfSpace { normal, offset } => Ok(ConvexBody::HalfSpace(HalfSpace::new(normal, offset)?)),
            RawBody::Box { lower, upper } => ConvexBody::cuboid(lower, upper),
            RawBody::Polytope { faces } => ConvexBody::polytope(faces),
            RawBody::Enlarged { base, eps } => {
                if !(eps >= 0.0) {
                    return Err(GeomError::Invalid(format!("enlargement {eps} < 0")));
                }
                Ok(base.enlarge(eps))
            }
            RawBody::Empty { dim } => Ok(ConvexBody::Empty { dim }),
        }
    }
}

impl ConvexBody {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self, GeomError> {
        if center.is_empty() {
            return Err(GeomError::Invalid("ball center has dimension 0".into()));
        }
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(GeomError::Invalid(format!("ball radius {radius}")));
        }
        Ok(ConvexBody::Ball { center, radius })
    }

    pub fn half_space(normal: Vec<f64>, offset: f64) -> Result<Self, GeomError> {
        Ok(ConvexBody::HalfSpace(HalfSpace::new(normal, offset)?))
    }

    /// Axis-aligned box `[lower, upper]`.
    pub fn cuboid(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, GeomError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(GeomError::DimMismatch { expected: lower.len(), found: upper.len() });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(GeomError::Invalid("box lower bound exceeds upper bound".into()));
        }
        Ok(ConvexBody::Box { lower, upper })
    }

    /// Intersection of half-spaces; rejects an empty intersection.
    pub fn polytope(faces: Vec<HalfSpace>) -> Result<Self, GeomError> {
        let Some(first) = faces.first() else {
            return Err(GeomError::Invalid("polytope needs at least one face".into()));
        };
        let d = first.normal.len();
        if let Some(bad) = faces.iter().find(|h| h.normal.len() != d) {
            return Err(GeomError::DimMismatch { expected: d, found: bad.normal.len() });
        }
        for h in &faces {
            HalfSpace::new(h.normal.clone(), h.offset)?;
        }
        if chebyshev_radius(&faces) < -1e-9 {
            return Err(GeomError::EmptyBody);
        }
        Ok(ConvexBody::Polytope { faces })
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexBody::Ball { center, .. } => center.len(),
            ConvexBody::HalfSpace(h) => h.normal.len(),
            ConvexBody::Box { lower, .. } => lower.len(),
            ConvexBody::Polytope { faces } => faces[0].normal.len(),
            ConvexBody::Enlarged { base, .. } => base.dim(),
            ConvexBody::Empty { dim } => *dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, ConvexBody::Empty { .. })
    }

    fn check_point(&self, x: &[f64]) -> Result<(), GeomError> {
        if self.is_empty() {
            return Err(GeomError::EmptyBody);
        }
        if x.len() != self.dim() {
            return Err(GeomError::DimMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(())
    }

    /// Exact membership for the closed-form families; Polytope uses the face inequalities,
    /// Enlarged uses the projection distance.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            ConvexBody::Ball { center, radius } => dist(x, center) <= *radius,
            ConvexBody::HalfSpace(h) => dot(&h.normal, x) <= h.offset,
            ConvexBody::Box { lower, upper } => {
                x.iter().zip(lower.iter().zip(upper)).all(|(xi, (l, u))| *l <= *xi && *xi <= *u)
            }
            ConvexBody::Polytope { faces } => faces.iter().all(|h| dot(&h.normal, x) <= h.offset),
            ConvexBody::Enlarged { base, eps } => base.distance(x).map_or(false, |t| t <= *eps),
            ConvexBody::Empty { .. } => false,
        }
    }

    /// Nearest point of the closed body.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, GeomError> {
        self.check_point(x)?;
        Ok(match self {
            ConvexBody::Ball { center, radius } => {
                let r = dist(x, center);
                if r <= *radius {
                    x.to_vec()
                } else {
                    let s = radius / r;
                    center.iter().zip(x).map(|(c, xi)| c + s * (xi - c)).collect()
                }
            }
            ConvexBody::HalfSpace(h) => {
                let mut p = x.to_vec();
                h.project_into(&mut p);
                p
            }
            ConvexBody::Box { lower, upper } => {
                x.iter().zip(lower.iter().zip(upper)).map(|(xi, (l, u))| xi.clamp(*l, *u)).collect()
            }
            ConvexBody::Polytope { faces } => dykstra(faces, x),
            ConvexBody::Enlarged { base, eps } => {
                let p = base.project(x)?;
                let t = dist(x, &p);
                if t <= *eps {
                    x.to_vec()
                } else {
                    let s = (t - eps) / t;
                    x.iter().zip(&p).map(|(xi, pi)| xi - s * (xi - pi)).collect()
                }
            }
            ConvexBody::Empty { .. } => unreachable!("checked above"),
        })
    }

    /// `d(x, A)`.
    pub fn distance(&self, x: &[f64]) -> Result<f64, GeomError> {
        self.check_point(x)?;
        Ok(match self {
            ConvexBody::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
            ConvexBody::HalfSpace(h) => h.excess(x).max(0.0),
            ConvexBody::Enlarged { base, eps } => (base.distance(x)? - eps).max(0.0),
            _ => dist(x, &self.project(x)?),
        })
    }

    /// `A^eps`; closed forms for balls and half-spaces, a view otherwise.
    pub fn enlarge(&self, eps: f64) -> ConvexBody {
        assert!(eps >= 0.0, "enlargement must be nonnegative");
        if eps == 0.0 {
            return self.clone();
        }
        match self {
            ConvexBody::Ball { center, radius } => ConvexBody::Ball { center: center.clone(), radius: radius + eps },
            ConvexBody::HalfSpace(h) => {
                ConvexBody::HalfSpace(HalfSpace { normal: h.normal.clone(), offset: h.offset + eps })
            }
            ConvexBody::Enlarged { base, eps: e } => ConvexBody::Enlarged { base: base.clone(), eps: e + eps },
            ConvexBody::Empty { dim } => ConvexBody::Empty { dim: *dim },
            other => ConvexBody::Enlarged { base: Box::new(other.clone()), eps },
        }
    }

    /// `A^{-eps} = {x ∈ A : B(x, eps) ⊂ A}`, possibly `Empty`.
    pub fn shrink(&self, eps: f64) -> ConvexBody {
        assert!(eps >= 0.0, "erosion must be nonnegative");
        if eps == 0.0 {
            return self.clone();
        }
        let dim = self.dim();
        match self {
            ConvexBody::Ball { center, radius } => {
                if eps > *radius {
                    ConvexBody::Empty { dim }
                } else {
                    ConvexBody::Ball { center: center.clone(), radius: radius - eps }
                }
            }
            ConvexBody::HalfSpace(h) => {
                ConvexBody::HalfSpace(HalfSpace { normal: h.normal.clone(), offset: h.offset - eps })
            }
            ConvexBody::Box { lower, upper } => {
                if lower.iter().zip(upper).any(|(l, u)| u - l < 2.0 * eps) {
                    ConvexBody::Empty { dim }
                } else {
                    ConvexBody::Box {
                        lower: lower.iter().map(|l| l + eps).collect(),
                        upper: upper.iter().map(|u| u - eps).collect(),
                    }
                }
            }
            ConvexBody::Polytope { faces } => {
                let shifted: Vec<HalfSpace> =
                    faces.iter().map(|h| HalfSpace { normal: h.normal.clone(), offset: h.offset - eps }).collect();
                ConvexBody::polytope(shifted).unwrap_or(ConvexBody::Empty { dim })
            }
            // For closed convex A, (A + eB) ⊖ sB = A ⊖ (s − e)B when s ≥ e and A^{e−s} otherwise.
            ConvexBody::Enlarged { base, eps: e } => {
                if eps <= *e {
                    base.enlarge(e - eps)
                } else {
                    base.shrink(eps - e)
                }
            }
            ConvexBody::Empty { .. } => ConvexBody::Empty { dim },
        }
    }

    /// `r(Ā)`, the largest radius of a ball inside the body.
    pub fn inradius(&self) -> Result<f64, GeomError> {
        match self {
            ConvexBody::Ball { radius, .. } => Ok(*radius),
            ConvexBody::HalfSpace(_) => Ok(f64::INFINITY),
            ConvexBody::Box { lower, upper } => {
                Ok(lower.iter().zip(upper).map(|(l, u)| 0.5 * (u - l)).fold(f64::INFINITY, f64::min))
            }
            ConvexBody::Polytope { faces } => Ok(chebyshev_radius(faces).max(0.0)),
            ConvexBody::Enlarged { base, eps } => Ok(base.inradius()? + eps),
            ConvexBody::Empty { .. } => Err(GeomError::EmptyBody),
        }
    }
}

fn dykstra(faces: &[HalfSpace], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut y = x.to_vec();
    let mut corrections = vec![vec![0.0; d]; faces.len()];
    let mut z = vec![0.0; d];
    for _ in 0..DYKSTRA_MAX_SWEEPS {
        let start = y.clone();
        for (h, c) in faces.iter().zip(corrections.iter_mut()) {
            for k in 0..d {
                z[k] = y[k] + c[k];
            }
            y.copy_from_slice(&z);
            h.project_into(&mut y);
            for k in 0..d {
                c[k] = z[k] - y[k];
            }
        }
        if dist(&start, &y) < DYKSTRA_TOL {
            break;
        }
    }
    y
}

/// Radius of the largest ball inside `∩ {⟨a_i, x⟩ ≤ b_i}` (unit normals): the LP
/// `max r s.t. ⟨a_i, x⟩ + r ≤ b_i` with free `x` and `r`. Negative means empty,
/// `+∞` means unbounded radius.
pub fn chebyshev_radius(faces: &[HalfSpace]) -> f64 {
    let d = faces[0].normal.len();
    let r0 = faces.iter().map(|h| h.offset).fold(f64::INFINITY, f64::min);
    if r0 == f64::INFINITY {
        return f64::INFINITY;
    }
    // Variables x⁺, x⁻ and s ≥ 0 with r = r0 + s. The point x = 0 already achieves
    // r = r0, so restricting s ≥ 0 loses nothing and makes the origin a feasible basis.
    let m = faces.len();
    let nv = 2 * d + 1;
    let mut a = vec![vec![0.0; nv]; m];
    let mut b = vec![0.0; m];
    for (i, h) in faces.iter().enumerate() {
        for k in 0..d {
            a[i][k] = h.normal[k];
            a[i][d + k] = -h.normal[k];
        }
        a[i][2 * d] = 1.0;
        b[i] = h.offset - r0;
    }
    let mut c = vec![0.0; nv];
    c[2 * d] = 1.0;
    match simplex_max(&a, &b, &c) {
        Some(v) => r0 + v,
        None => f64::INFINITY,
    }
}

/// Dense tableau simplex for `max cᵀx s.t. Ax ≤ b, x ≥ 0` with `b ≥ 0`, Bland's rule.
/// Returns `None` when unbounded.
fn simplex_max(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let m = a.len();
    let n = c.len();
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][width - 1] = b[i];
    }
    for j in 0..n {
        t[m][j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    loop {
        let Some(col) = (0..n + m).find(|&j| t[m][j] < -EPS) else {
            return Some(t[m][width - 1]);
        };
        let mut row = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if t[i][col] > EPS {
                let ratio = t[i][width - 1] / t[i][col];
                let better = ratio < best - EPS
                    || (ratio <= best + EPS && row.map_or(true, |r: usize| basis[i] < basis[r]));
                if better {
                    best = ratio;
                    row = Some(i);
                }
            }
        }
        let r = row?;
        let piv = t[r][col];
        for v in t[r].iter_mut() {
            *v /= piv;
        }
        let pivot_row = t[r].clone();
        for (i, ti) in t.iter_mut().enumerate() {
            if i != r {
                let f = ti[col];
                if f != 0.0 {
                    for (v, p) in ti.iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
        basis[r] = col;
    }
}

/// The transport field `f_{A,ε}` with `epsilon` the full layer width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinTransportSpec {
    pub body: ConvexBody,
    pub epsilon: f64,
}

impl SteinTransportSpec {
    pub fn new(body: ConvexBody, epsilon: f64) -> Result<Self, GeomError> {
        if body.is_empty() {
            return Err(GeomError::EmptyBody);
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(GeomError::Invalid(format!("transport width {epsilon}")));
        }
        Ok(Self { body, epsilon })
    }
}

/// Zero on Ā, `x − P_Ā(x)` on `A^ε \ Ā`, and `P_{A^ε}(x) − P_Ā(x)` beyond.
pub fn stein_transport(spec: &SteinTransportSpec, x: &[f64]) -> Result<Vec<f64>, GeomError> {
    let p = spec.body.project(x)?;
    let t = dist(x, &p);
    if t == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    // Beyond the layer the enlarged projection sits at distance ε along the same ray.
    let s = if t <= spec.epsilon { 1.0 } else { spec.epsilon / t };
    Ok(x.iter().zip(&p).map(|(xi, pi)| s * (xi - pi)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        dist(a, b) <= tol
    }

    #[test]
    fn project_examples() {
        let ball = ConvexBody::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert!(close(&ball.project(&[3.0, 0.0]).unwrap(), &[1.0, 0.0], 1e-15));
        let hs = ConvexBody::half_space(vec![1.0, 0.0], 0.0).unwrap();
        assert_eq!(hs.project(&[-2.0, 5.0]).unwrap(), vec![-2.0, 5.0]);
        let quad = ConvexBody::polytope(vec![
            HalfSpace::new(vec![1.0, 0.0], 0.0).unwrap(),
            HalfSpace::new(vec![0.0, 1.0], 0.0).unwrap(),
        ])
        .unwrap();
        assert!(close(&quad.project(&[1.0, 1.0]).unwrap(), &[0.0, 0.0], 1e-12));
    }

    #[test]
    fn dykstra_matches_analytic_wedge() {
        // Wedge {x₂ ≤ 0, x₁ + x₂ ≤ 0}: points above the apex project to the origin,
        // points in the normal cone of one face project onto that face.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let wedge = ConvexBody::polytope(vec![
            HalfSpace::new(vec![0.0, 1.0], 0.0).unwrap(),
            HalfSpace::new(vec![s, s], 0.0).unwrap(),
        ])
        .unwrap();
        assert!(close(&wedge.project(&[0.5, 2.0]).unwrap(), &[0.0, 0.0], 1e-9));
        assert!(close(&wedge.project(&[-3.0, 1.0]).unwrap(), &[-3.0, 0.0], 1e-9));
        assert!(close(&wedge.project(&[3.0, -1.0]).unwrap(), &[2.0, -2.0], 1e-9));
    }

    #[test]
    fn distance_examples() {
        let ball = ConvexBody::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert!((ball.distance(&[3.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        let cube = ConvexBody::cuboid(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!((cube.distance(&[2.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let tri = ConvexBody::polytope(vec![
            HalfSpace::new(vec![-1.0, 0.0], 0.0).unwrap(),
            HalfSpace::new(vec![0.0, -1.0], 0.0).unwrap(),
            HalfSpace::normalized(&[1.0, 1.0], 1.0).unwrap(),
        ])
        .unwrap();
        let x = [2.0, 0.3];
        let p = tri.project(&x).unwrap();
        assert!((tri.distance(&x).unwrap() - dist(&x, &p)).abs() < 1e-10);
    }

    #[test]
    fn enlarge_examples() {
        let ball = ConvexBody::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(ball.enlarge(0.5), ConvexBody::ball(vec![0.0, 0.0], 1.5).unwrap());
        assert_eq!(ball.enlarge(0.0), ball);
        let cube = ConvexBody::cuboid(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let big = cube.enlarge(0.5);
        let p = big.project(&[2.0, 0.5]).unwrap();
        assert!(close(&p, &[1.5, 0.5], 1e-15));
        assert!((cube.distance(&p).unwrap() - 0.5).abs() < 1e-15);
        assert!(big.contains(&[1.3, 1.3]));
        assert!(!big.contains(&[1.4, 1.4]));
    }

    #[test]
    fn shrink_examples() {
        let ball = ConvexBody::ball(vec![0.0, 0.0], 1.0).unwrap();
        match ball.shrink(0.4) {
            ConvexBody::Ball { radius, .. } => assert!((radius - 0.6).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        assert!(ball.shrink(1.2).is_empty());
        let cube = ConvexBody::cuboid(vec![0.0, 0.0], vec![2.0, 4.0]).unwrap();
        assert_eq!(cube.shrink(0.5), ConvexBody::cuboid(vec![0.5, 0.5], vec![1.5, 3.5]).unwrap());
        assert!(cube.shrink(1.5).is_empty());
    }

    #[test]
    fn inradius_examples() {
        assert_eq!(ConvexBody::ball(vec![0.0, 0.0], 2.5).unwrap().inradius().unwrap(), 2.5);
        assert_eq!(ConvexBody::cuboid(vec![0.0, 0.0], vec![2.0, 4.0]).unwrap().inradius().unwrap(), 1.0);
        assert_eq!(ConvexBody::half_space(vec![0.0, 1.0], 3.0).unwrap().inradius().unwrap(), f64::INFINITY);
        assert_eq!(ConvexBody::Empty { dim: 2 }.inradius(), Err(GeomError::EmptyBody));
    }

    #[test]
    fn chebyshev_lp() {
        // Box [0,2]×[0,4] as a polytope.
        let faces = vec![
            HalfSpace::new(vec![-1.0, 0.0], 0.0).unwrap(),
            HalfSpace::new(vec![1.0, 0.0], 2.0).unwrap(),
            HalfSpace::new(vec![0.0, -1.0], 0.0).unwrap(),
            HalfSpace::new(vec![0.0, 1.0], 4.0).unwrap(),
        ];
        let poly = ConvexBody::polytope(faces).unwrap();
        assert!((poly.inradius().unwrap() - 1.0).abs() < 1e-9);
        // Right triangle with legs 1: inradius (2 − √2)/2.
        let tri = ConvexBody::polytope(vec![
            HalfSpace::new(vec![-1.0, 0.0], 0.0).unwrap(),
            HalfSpace::new(vec![0.0, -1.0], 0.0).unwrap(),
            HalfSpace::normalized(&[1.0, 1.0], 1.0).unwrap(),
        ])
        .unwrap();
        assert!((tri.inradius().unwrap() - (2.0 - 2f64.sqrt()) / 2.0).abs() < 1e-9);
        // Slab of width 2 is unbounded but has inradius 1.
        let slab = ConvexBody::polytope(vec![
            HalfSpace::new(vec![0.0, 1.0], 1.0).unwrap(),
            HalfSpace::new(vec![0.0, -1.0], 1.0).unwrap(),
        ])
        .unwrap();
        assert!((slab.inradius().unwrap() - 1.0).abs() < 1e-9);
        // Disjoint half-planes.
        let empty = ConvexBody::polytope(vec![
            HalfSpace::new(vec![1.0, 0.0], -1.0).unwrap(),
            HalfSpace::new(vec![-1.0, 0.0], -1.0).unwrap(),
        ]);
        assert_eq!(empty, Err(GeomError::EmptyBody));
    }

    #[test]
    fn transport_examples() {
        let spec = SteinTransportSpec::new(ConvexBody::ball(vec![0.0, 0.0], 1.0).unwrap(), 1.0).unwrap();
        assert_eq!(stein_transport(&spec, &[0.3, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(close(&stein_transport(&spec, &[1.5, 0.0]).unwrap(), &[0.5, 0.0], 1e-15));
        assert!(close(&stein_transport(&spec, &[3.0, 0.0]).unwrap(), &[1.0, 0.0], 1e-15));
    }

    #[test]
    fn json_round_trip() {
        let body = ConvexBody::cuboid(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let s = serde_json::to_string(&body).unwrap();
        assert!(s.contains("\"variant\":\"box\""));
        let back: ConvexBody = serde_json::from_str(&s).unwrap();
        assert_eq!(back, body);
        let hs: ConvexBody =
            serde_json::from_str(r#"{"variant":"half_space","parameters":{"normal":[0.0,1.0],"offset":2.0}}"#).unwrap();
        assert_eq!(hs.inradius().unwrap(), f64::INFINITY);
        let bad = serde_json::from_str::<ConvexBody>(r#"{"variant":"ball","parameters":{"center":[0.0],"radius":-1}}"#);
        assert!(bad.is_err());
    }
}
