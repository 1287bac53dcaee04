//! Scalar root finding and minimization.

use crate::error::{Error, Result};

/// Root of `f` in `[a, b]` where `f(a)` and `f(b)` differ in sign.
///
/// Takes secant (regula falsi) steps inside the bracket and falls back to
/// bisection whenever two consecutive steps fail to halve the bracket.
pub fn bracketed_root<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, xtol: f64) -> Result<f64> {
    let (mut lo, mut hi) = if a < b { (a, b) } else { (b, a) };
    let mut flo = f(lo);
    let mut fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() || flo.is_nan() || fhi.is_nan() {
        return Err(Error::NotApplicable {
            method: "bracketed root",
            reason: format!("no sign change on [{a}, {b}]"),
        });
    }
    let mut reference = hi - lo;
    let mut stalled = 0;
    for _ in 0..2000 {
        let width = hi - lo;
        if width <= xtol * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        let mut x = hi - fhi * (hi - lo) / (fhi - flo);
        if stalled >= 2 || !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
            stalled = 0;
        }
        if x <= lo || x >= hi {
            break;
        }
        let fx = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
        } else {
            hi = x;
            fhi = fx;
        }
        if hi - lo <= 0.5 * reference {
            reference = hi - lo;
            stalled = 0;
        } else {
            stalled += 1;
        }
    }
    Ok(if flo.abs() < fhi.abs() { lo } else { hi })
}

/// Minimizer of a unimodal `f` on `[a, b]` by golden-section search.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, xtol: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > xtol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_sqrt_two() {
        let r = bracketed_root(|x| x * x - 2.0, 0.0, 2.0, 1e-15).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn handles_flat_functions() {
        // secant stalls on this one, bisection has to take over
        let r = bracketed_root(|x: f64| (x - 0.3).powi(9), 0.0, 1.0, 1e-14).unwrap();
        assert!((r - 0.3).abs() < 1e-6);
    }

    #[test]
    fn rejects_missing_bracket() {
        assert!(bracketed_root(|x| x * x + 1.0, -1.0, 1.0, 1e-12).is_err());
    }

    #[test]
    fn golden_minimum() {
        let (x, fx) = golden_section(|x| (x - 1.25).powi(2) + 3.0, -4.0, 5.0, 1e-10);
        // a quadratic minimum is only resolvable to ~sqrt(eps)
        assert!((x - 1.25).abs() < 1e-7);
        assert!((fx - 3.0).abs() < 1e-15);
    }
}
