//! Error-function helpers.
//!
//! `erf`/`erfc` come from `libm` (a port of the musl implementations, which
//! keep relative accuracy in the far tail). `ln_erfc` extends `erfc` to
//! arguments where it underflows.

use std::f64::consts::PI;

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `ln(erfc(x))`, finite for every finite `x`.
pub fn ln_erfc(x: f64) -> f64 {
    if x < 26.0 {
        return erfc(x).ln();
    }
    // Asymptotic series; the first omitted term is below 4e-11 for x >= 26.
    let inv2 = 1.0 / (x * x);
    let series = 1.0 - 0.5 * inv2 + 0.75 * inv2 * inv2 - 1.875 * inv2 * inv2 * inv2;
    -x * x - (x * PI.sqrt()).ln() + series.ln()
}

/// `ln(exp(a) + exp(b))` without overflow.
#[inline]
pub fn ln_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
