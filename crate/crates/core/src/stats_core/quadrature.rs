//! Gauss–Legendre rules and composite integration.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Nodes and weights of the `n`-point rule on [−1, 1], by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

// (P_n(x), P_n'(x)) by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Cached 16-point rule.
pub fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

/// 16-point rule mapped to [0, 1]: `(t_k, w_k)` with `Σ w_k = 1`.
pub fn gl16_unit() -> impl Iterator<Item = (f64, f64)> {
    let (x, w) = gl16();
    x.iter().zip(w).map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
}

/// Composite 16-point Gauss–Legendre over `panels` equal pieces of [a, b].
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let (x, w) = gl16();
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(w) {
            s += wi * f(mid + 0.5 * h * xi);
        }
        total += 0.5 * h * s;
    }
    total
}

/// `E g(Z)` for `Z ~ N(0, 1)`, integrating over [−12, 12].
pub fn gaussian_expectation(g: impl Fn(f64) -> f64) -> f64 {
    integrate(|z| g(z) * super::special::norm_pdf(z), -12.0, 12.0, 96)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(16);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        for deg in 0..32 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg)).sum();
            let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-13, "degree {deg}");
        }
    }

    #[test]
    fn unit_rule_weights() {
        let s: f64 = gl16_unit().map(|(_, w)| w).sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_moments() {
        assert!((gaussian_expectation(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!((gaussian_expectation(|z| z * z) - 1.0).abs() < 1e-13);
        let m3 = 2.0 * (2.0 / PI).sqrt();
        assert!((gaussian_expectation(|z| z.abs().powi(3)) - m3).abs() < 1e-10);
    }
}
