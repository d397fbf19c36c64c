//! Generators shared by the property and acceptance suites.
#![allow(dead_code)]

use nclt::convex_geom::{stein_transport, ConvexBody, SteinTransportSpec};
use nclt::linalg::{dot, norm, Matrix, SymMatrix};
use nclt::stats_core::RandomSource;

/// Ball, half-space or box in dimension `d`, chosen by `kind % 3`.
pub fn exact_body(kind: usize, d: usize, src: &mut RandomSource) -> ConvexBody {
    match kind % 3 {
        0 => {
            let c: Vec<f64> = (0..d).map(|_| src.normal()).collect();
            ConvexBody::ball(c, 0.1 + 2.0 * src.uniform()).unwrap()
        }
        1 => ConvexBody::half_space(unit_vector(d, src), src.normal()).unwrap(),
        _ => {
            let lo: Vec<f64> = (0..d).map(|_| src.normal() - 0.5).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + 0.1 + 2.0 * src.uniform()).collect();
            ConvexBody::cuboid(lo, hi).unwrap()
        }
    }
}

pub fn unit_vector(d: usize, src: &mut RandomSource) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| src.normal()).collect();
        let r = norm(&v);
        if r > 1e-3 {
            return v.iter().map(|x| x / r).collect();
        }
    }
}

pub fn gaussian_point(d: usize, scale: f64, src: &mut RandomSource) -> Vec<f64> {
    (0..d).map(|_| scale * src.normal()).collect()
}

/// Random symmetric positive definite matrix with eigenvalues in `[lo, hi]`.
pub fn random_spd(d: usize, lo: f64, hi: f64, src: &mut RandomSource) -> SymMatrix {
    // Gram–Schmidt on a Gaussian matrix gives an orthogonal basis.
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v = gaussian_point(d, 1.0, src);
        for u in &q {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let r = norm(&v);
        if r > 1e-6 {
            q.push(v.iter().map(|x| x / r).collect());
        }
    }
    let lams: Vec<f64> = (0..d).map(|_| lo + (hi - lo) * src.uniform()).collect();
    let mut m = Matrix::zeros(d, d);
    for (u, l) in q.iter().zip(&lams) {
        m.add_scaled(*l, &Matrix::outer(u, u));
    }
    SymMatrix::from_symmetric_part(&m)
}

/// Margins by which the three transport properties hold on one random instance.
/// Each is `>= 0` when the property holds exactly.
#[derive(Clone, Copy, Debug)]
pub struct TransportMargins {
    pub norm_bound: f64,
    pub monotone: f64,
    pub curvature: f64,
}

/// One instance: body, `ε`, `γ`, and the points for each property.
pub fn transport_instance(kind: usize, d: usize, src: &mut RandomSource) -> TransportMargins {
    let body = exact_body(kind, d, src);
    let eps = 0.01 + src.uniform();
    let gamma = 0.005 + 0.2 * src.uniform();
    let width = eps + 8.0 * gamma;
    let spec = SteinTransportSpec::new(body.clone(), width).unwrap();
    let f = |x: &[f64]| stein_transport(&spec, x).unwrap();

    let x = gaussian_point(d, 3.0, src);
    let norm_bound = width - norm(&f(&x));

    let eta = gaussian_point(d, 3.0, src);
    let xi = gaussian_point(d, 0.5 + 2.0 * src.uniform(), src);
    let shifted: Vec<f64> = eta.iter().zip(&xi).map(|(a, b)| a + b).collect();
    let df: Vec<f64> = f(&shifted).iter().zip(f(&eta)).map(|(a, b)| a - b).collect();
    let monotone = dot(&xi, &df);

    // w at distance t ∈ (4γ, 4γ+ε] outside A along an outward normal, ‖x‖ ≤ 4γ.
    let w = loop {
        let y = gaussian_point(d, 4.0, src);
        let p = body.project(&y).unwrap();
        let r = nclt::linalg::dist(&y, &p);
        if r > 1e-6 {
            let t = 4.0 * gamma + eps * (1.0 - src.uniform());
            break p.iter().zip(&y).map(|(pi, yi)| pi + t * (yi - pi) / r).collect::<Vec<f64>>();
        }
    };
    let w0 = body.project(&w).unwrap();
    let r0 = nclt::linalg::dist(&w0, &w);
    let h1: Vec<f64> = w0.iter().zip(&w).map(|(a, b)| (a - b) / r0).collect();
    let dir = unit_vector(d, src);
    let len = 4.0 * gamma * src.uniform().sqrt();
    let xv: Vec<f64> = dir.iter().map(|v| v * len).collect();
    let wx: Vec<f64> = w.iter().zip(&xv).map(|(a, b)| a - b).collect();
    let df: Vec<f64> = f(&w).iter().zip(f(&wx)).map(|(a, b)| a - b).collect();
    let curvature = dot(&xv, &df) - 0.75 * dot(&xv, &h1).powi(2);

    TransportMargins { norm_bound, monotone, curvature }
}
