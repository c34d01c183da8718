//! Gaussian tail, its inverse, and the exponential integral.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Gaussian tail probability `P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Inverse of [`q_function`] on `(0, 1)`.
///
/// Bisection on the monotone tail to full double precision, then one
/// Newton polish step.
pub fn q_inverse(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("Q^-1 argument {p} not in (0,1)")));
    }
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if q_function(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * mid.abs().max(1.0) {
            break;
        }
    }
    let x = 0.5 * (lo + hi);
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if density > 0.0 {
        let step = (q_function(x) - p) / density;
        if step.is_finite() && step.abs() < hi - lo + 1e-12 {
            return Ok(x + step);
        }
    }
    Ok(x)
}

/// Exponential integral `E1(x) = ∫_x^∞ e^{-t}/t dt` for `x > 0`.
pub fn exp_integral_e1(x: f64) -> Result<f64> {
    if !(x > 0.0) || x.is_nan() {
        return Err(Error::Domain(format!("E1 requires x > 0, got {x}")));
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    const EULER: f64 = 0.577_215_664_901_532_9;
    if x <= 1.0 {
        // Power series: -γ - ln x - Σ (-x)^k / (k k!)
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..200 {
            term *= -x / k as f64;
            let contrib = term / k as f64;
            sum += contrib;
            if contrib.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        Ok(-EULER - x.ln() - sum)
    } else {
        // Modified Lentz continued fraction.
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let a = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        Ok(h * (-x).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson on the substituted integrand e^{-t}/t, t = x + u/(1-u).
    fn e1_quadrature(x: f64) -> f64 {
        let n = 200_000;
        let h = 1.0 / n as f64;
        let f = |u: f64| {
            if u >= 1.0 {
                return 0.0;
            }
            let t = x + u / (1.0 - u);
            (-t).exp() / t / ((1.0 - u) * (1.0 - u))
        };
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        s * h / 3.0
    }

    /// Composite Simpson on the Gaussian density over [x, x + 40].
    fn tail_quadrature(x: f64) -> f64 {
        let n = 400_000;
        let h = 40.0 / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(x) + pdf(x + 40.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(x + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn q_known_values() {
        assert_eq!(q_function(0.0), 0.5);
        assert!((q_function(1.96) - 0.0249979).abs() < 1e-7);
        assert!((q_function(1.96) - tail_quadrature(1.96)).abs() < 1e-10);
        assert!((q_function(-0.7) - tail_quadrature(-0.7)).abs() < 1e-10);
    }

    #[test]
    fn q_symmetry() {
        for &x in &[0.1, 0.5, 1.3, 2.7, 5.0] {
            assert!((q_function(-x) - (1.0 - q_function(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn q_inverse_residual() {
        for &p in &[1e-12, 1e-6, 0.01, 0.3, 0.5, 0.77, 0.999] {
            let x = q_inverse(p).unwrap();
            assert!((q_function(x) - p).abs() <= 1e-10, "p={p}");
        }
        assert!(q_inverse(0.5).unwrap().abs() < 1e-12);
        assert!(q_inverse(0.0).is_err());
        assert!(q_inverse(1.0).is_err());
        assert!(q_inverse(f64::NAN).is_err());
    }

    #[test]
    fn e1_against_quadrature() {
        for &x in &[0.05, 0.1054, 0.5, 1.0, 1.5, 3.0, 10.0] {
            let a = exp_integral_e1(x).unwrap();
            let b = e1_quadrature(x);
            assert!((a - b).abs() < 1e-8, "x={x}: {a} vs {b}");
        }
        assert!((exp_integral_e1(1.0).unwrap() - 0.2193839).abs() < 1e-7);
    }

    #[test]
    fn e1_shape_and_domain() {
        let a = exp_integral_e1(0.1).unwrap();
        let b = exp_integral_e1(1.0).unwrap();
        let c = exp_integral_e1(10.0).unwrap();
        assert!(a > b && b > c && c > 0.0);
        assert!(exp_integral_e1(700.0).unwrap() < 1e-300);
        assert!(exp_integral_e1(0.0).is_err());
        assert!(exp_integral_e1(-1.0).is_err());
    }
}
