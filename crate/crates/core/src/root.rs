//! Bracketed scalar root finding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Finds a root of `f` in `[lo, hi]` with the Illinois variant of regula falsi,
/// falling back to bisection steps when the secant stalls. `f(lo)` and `f(hi)`
/// must have opposite signs (or one of them be zero).
pub fn find_root<T: Scalar, F: Fn(T) -> T>(f: F, lo: T, hi: T, x_tol: T) -> Result<T> {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == T::zero() {
        return Ok(a);
    }
    if fb == T::zero() {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::NoConvergence(format!(
            "root not bracketed: f({})={}, f({})={}",
            a, fa, b, fb
        )));
    }
    let mut side = 0i8;
    for iter in 0..400 {
        if (b - a).abs() <= x_tol {
            return Ok((a + b) * T::c(0.5));
        }
        // Every fourth step is a plain bisection so the bracket keeps shrinking.
        let c = if iter % 4 == 3 {
            (a + b) * T::c(0.5)
        } else {
            let c = (a * fb - b * fa) / (fb - fa);
            if c <= a.min(b) || c >= a.max(b) || !c.is_finite() {
                (a + b) * T::c(0.5)
            } else {
                c
            }
        };
        let fc = f(c);
        if fc == T::zero() {
            return Ok(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa = fa * T::c(0.5);
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb = fb * T::c(0.5);
            }
            side = 1;
        }
    }
    Err(Error::NoConvergence(format!(
        "bracket [{a}, {b}] did not shrink below {x_tol}"
    )))
}
