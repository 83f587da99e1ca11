//! Deterministic expectations over standard normal variables.
//!
//! Every expectation in the crate goes through a [`QuadratureGrid`]: a
//! probabilists' Gauss–Hermite rule normalized so that its weights sum to one,
//! plus a half-line Gauss–Legendre companion used for integrands with a kink
//! at the origin (such as `max(x, 0)^2`), where the Hermite rule loses its
//! spectral convergence.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::special::erf;

pub const MIN_ORDER: usize = 2;
pub const MAX_ORDER: usize = 512;

/// Truncation point of the half-line rule; the normal density at 12 is 5e-32.
const HALF_LINE_CUTOFF: f64 = 12.0;

/// Neumaier-compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Gauss–Hermite rule for the standard normal measure.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    half_nodes: Vec<f64>,
    half_weights: Vec<f64>,
    half_lebesgue: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(order: usize) -> Result<Self> {
        gauss_hermite(order)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes on `[0, 12]` of the half-line rule; weights already include the
    /// normal density, so `Σ w = 1/2`.
    pub fn half_line(&self) -> (&[f64], &[f64]) {
        (&self.half_nodes, &self.half_weights)
    }

    /// Plain Gauss–Legendre weights on the same half-line nodes.
    pub fn half_line_lebesgue_weights(&self) -> &[f64] {
        &self.half_lebesgue
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    /// `E f(g)`, failing on any non-finite integrand value.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        expect1(f, self)
    }

    /// `E f(g)` for integrands smooth on each half line but not across 0.
    pub fn expect_split<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = CompensatedSum::new();
        for (&x, &w) in self.half_nodes.iter().zip(&self.half_weights) {
            let a = f(x);
            let b = f(-x);
            if !a.is_finite() {
                return Err(Error::NonFinite { node: x, value: a });
            }
            if !b.is_finite() {
                return Err(Error::NonFinite { node: -x, value: b });
            }
            acc.add(w * (a + b));
        }
        Ok(acc.value())
    }

    /// Same sum as [`expect`](Self::expect) without the finiteness check;
    /// for hot loops whose integrands are finite by construction.
    #[inline]
    pub fn expect_unchecked<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.iter()
            .map(|(x, w)| w * f(x))
            .collect::<CompensatedSum>()
            .value()
    }
}

/// Probabilists' Gauss–Hermite rule with `order` nodes, rescaled to the
/// standard normal weight.
pub fn gauss_hermite(order: usize) -> Result<QuadratureGrid> {
    if !(MIN_ORDER..=MAX_ORDER).contains(&order) {
        return Err(Error::OrderOutOfRange(order));
    }
    let (t, w) = physicists_hermite(order);
    // exp(-t^2) rule -> standard normal: x = sqrt(2) t, w / sqrt(pi).
    let nodes: Vec<f64> = t.iter().map(|t| SQRT_2 * t).collect();
    let mut weights: Vec<f64> = w.iter().map(|w| w / PI.sqrt()).collect();
    // Absorb the last few ulps of normalization error.
    let total: f64 = weights.iter().copied().collect::<CompensatedSum>().value();
    for w in &mut weights {
        *w /= total;
    }

    let (gl_x, gl_w) = gauss_legendre(order, 0.0, HALF_LINE_CUTOFF);
    let half_weights = gl_x
        .iter()
        .zip(&gl_w)
        .map(|(x, w)| w * (-0.5 * x * x).exp() / (2.0 * PI).sqrt())
        .collect();

    Ok(QuadratureGrid {
        order,
        nodes,
        weights,
        half_nodes: gl_x,
        half_weights,
        half_lebesgue: gl_w,
    })
}

/// Nodes (ascending) and weights for `∫ f(t) e^{-t²} dt`: Golub–Welsch
/// eigenvalues as starting points, polished by Newton iteration on the
/// orthonormal Hermite recurrence.
fn physicists_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut guesses: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    guesses.sort_by(f64::total_cmp);
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    // (p_n(z), p_{n-1}(z)) of the orthonormal recurrence.
    let eval = |z: f64| {
        let mut p1 = pim4;
        let mut p2 = 0.0;
        for j in 0..n {
            let p3 = p2;
            p2 = p1;
            let jf = j as f64;
            p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
        }
        (p1, p2)
    };
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Polish the nonnegative half and mirror it.
        let mut z = guesses[n - 1 - i].abs();
        for _ in 0..20 {
            let (p1, p2) = eval(z);
            let step = p1 / ((2.0 * nf).sqrt() * p2);
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let (_, p2) = eval(z);
        let pp = (2.0 * nf).sqrt() * p2;
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / (pp * pp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[m - 1] = 0.0;
    }
    (x, w)
}

/// Gauss–Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    const EPS: f64 = 1e-15;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mid = 0.5 * (b + a);
    let half = 0.5 * (b - a);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= EPS {
                break;
            }
        }
        x[i] = mid - half * z;
        x[n - 1 - i] = mid + half * z;
        w[i] = 2.0 * half / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `Σᵢ wᵢ f(xᵢ)`.
pub fn expect1<F: Fn(f64) -> f64>(f: F, grid: &QuadratureGrid) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for (x, w) in grid.iter() {
        let v = f(x);
        if !v.is_finite() {
            return Err(Error::NonFinite { node: x, value: v });
        }
        acc.add(w * v);
    }
    Ok(acc.value())
}

/// `Σⱼ wⱼ reducer(Σᵢ wᵢ inner(xᵢ, yⱼ))`, outer over `y`, inner over `x`.
///
/// The reducer signals a domain violation by returning a non-finite value
/// (e.g. `ln` of a non-positive inner mean).
pub fn expect2_nested<I, R>(inner: I, reducer: R, grid: &QuadratureGrid) -> Result<f64>
where
    I: Fn(f64, f64) -> f64,
    R: Fn(f64) -> f64,
{
    let mut outer = CompensatedSum::new();
    for (y, wy) in grid.iter() {
        let mut acc = CompensatedSum::new();
        for (x, wx) in grid.iter() {
            let v = inner(x, y);
            if !v.is_finite() {
                return Err(Error::NonFinite { node: x, value: v });
            }
            acc.add(wx * v);
        }
        let mean = acc.value();
        let r = reducer(mean);
        if !r.is_finite() {
            return Err(Error::ReducerDomain(format!(
                "reducer({mean}) = {r} at outer node {y}"
            )));
        }
        outer.add(wy * r);
    }
    Ok(outer.value())
}

/// `E erf(a g + b) = erf(b / sqrt(1 + 2 a²))` for `g ~ N(0, 1)`.
pub fn erf_mean_identity(a: f64, b: f64) -> f64 {
    erf(b / (1.0 + 2.0 * a * a).sqrt())
}

/// `E f(g)` for an integrand with a single kink at `kink`, integrating each
/// side with its own Gauss–Legendre rule over `[-13, 13]`.
pub fn expect1_kinked<F: Fn(f64) -> f64>(f: F, kink: f64, order: usize) -> f64 {
    const SPAN: f64 = 13.0;
    let density = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    let mut acc = CompensatedSum::new();
    let mut segment = |a: f64, b: f64| {
        if b > a {
            let (xs, ws) = gauss_legendre(order, a, b);
            for (x, w) in xs.into_iter().zip(ws) {
                acc.add(w * density(x) * f(x));
            }
        }
    };
    let k = kink.clamp(-SPAN, SPAN);
    segment(-SPAN, k);
    segment(k, SPAN);
    acc.value()
}
