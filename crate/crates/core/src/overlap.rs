//! The normalized overlap curve `p̄(p)` and the effective field coefficients.
//!
//! `p̄(p) = E_h[(E_g f(√(1-p) g + √p h))²] / E[f'(g)²]`, i.e. the correlation
//! of `f` at two Gaussian arguments with correlation `p`, normalized by the
//! derivative moment.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::activation::{ActivationKind, ActivationSpec, MomentSet};
use crate::error::{Error, Result};
use crate::quadrature::{expect2_nested, CompensatedSum, QuadratureGrid};
use crate::special::erfc;

/// Number of memoized points, uniform in `t = √(1-p)`.
pub const LATTICE_POINTS: usize = 2001;

/// Step of the central difference used by [`OverlapCurve::slope`].
pub const SLOPE_STEP: f64 = 5e-4;

/// Slack accepted on `p ∈ [0, 1]` before reporting an out-of-range overlap.
const RANGE_SLACK: f64 = 1e-12;

fn check_unit(p: f64) -> Result<f64> {
    if !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&p) || p.is_nan() {
        return Err(Error::OverlapOutOfRange(p));
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Direct evaluation of `p̄(p)`: closed forms for the quadratic, erf and ReLU
/// activations, nested quadrature otherwise.
pub fn pbar(act: &ActivationSpec, p: f64, grid: &QuadratureGrid) -> Result<f64> {
    match act.kind() {
        ActivationKind::Relu => pbar_relu_closed(p, grid),
        ActivationKind::Quadratic => pbar_quadratic_closed(p),
        ActivationKind::Erf => pbar_erf_closed(p),
        ActivationKind::Tanh | ActivationKind::Custom => pbar_nested(act, p, grid),
    }
}

/// `(1 + 2p²) / 4`.
pub fn pbar_quadratic_closed(p: f64) -> Result<f64> {
    let p = check_unit(p)?;
    Ok((1.0 + 2.0 * p * p) / 4.0)
}

/// `(√5 π / 4) (2/π) asin(2c² / (1 + 2c²))` with `c² = p / (1 + 2(1-p))`.
pub fn pbar_erf_closed(p: f64) -> Result<f64> {
    let p = check_unit(p)?;
    let c2 = p / (1.0 + 2.0 * (1.0 - p));
    let outer = 2.0 / PI * (2.0 * c2 / (1.0 + 2.0 * c2)).asin();
    Ok(5f64.sqrt() * PI / 4.0 * outer)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `φ(u) - u (1 - Φ(u))`, the lower branch of `E max(u + g, 0)` reflected.
fn relu_tail(u: f64) -> f64 {
    std_normal_pdf(u) - u * 0.5 * erfc(u / SQRT_2)
}

/// ReLU overlap from the analytic inner mean
/// `E_g max(a g + b, 0) = a ψ(b/a)`, `ψ(s) = s Φ(s) + φ(s)`, `a = √(1-p)`,
/// `b = √p h`, squared and averaged over `h` by one-dimensional quadrature.
///
/// For `√p / a > 1` the outer average is taken in the variable `s = b/a`,
/// where `ψ(s)² - max(s, 0)²` is integrated against the wide `N(0, p/a²)`
/// density and the `max(s, 0)²` part is exact; this keeps full accuracy as
/// `p → 1`, where the inner mean degenerates to `max(h, 0)`.
pub fn pbar_relu_closed(p: f64, grid: &QuadratureGrid) -> Result<f64> {
    let p = check_unit(p)?;
    let a = (1.0 - p).sqrt();
    if a == 0.0 {
        return Ok(1.0);
    }
    let sigma = p.sqrt() / a;
    // dm2 = 1/2 for ReLU.
    if sigma <= 1.0 {
        let mean_sq = grid.expect_unchecked(|h| {
            let s = sigma * h;
            (a * (s * std_normal_cdf(s) + std_normal_pdf(s))).powi(2)
        });
        return Ok(2.0 * mean_sq);
    }
    let (nodes, _) = grid.half_line();
    let weights = grid.half_line_lebesgue_weights();
    let correction: CompensatedSum = nodes
        .iter()
        .zip(weights)
        .map(|(&u, &w)| {
            let r = relu_tail(u);
            w * 2.0 * r * (r + u) * std_normal_pdf(u / sigma) / sigma
        })
        .collect();
    Ok(p + 2.0 * a * a * correction.value())
}

/// Generic nested-quadrature `p̄(p)`.
pub fn pbar_nested(act: &ActivationSpec, p: f64, grid: &QuadratureGrid) -> Result<f64> {
    let p = check_unit(p)?;
    let dm2 = act.moments(grid)?.dm2;
    if dm2 <= 0.0 {
        return Err(Error::DegenerateActivation(dm2));
    }
    let (a, b) = ((1.0 - p).sqrt(), p.sqrt());
    let v = expect2_nested(|x, y| act.eval(a * x + b * y), |m| m * m, grid)?;
    Ok(v / dm2)
}

/// `p̄` for one activation, with fast repeated evaluation.
#[derive(Debug, Clone)]
pub struct OverlapCurve {
    activation: ActivationSpec,
    moments: MomentSet,
    pbar_top: f64,
    pbar_bottom: f64,
    // Values at p = 1 - (i / (N - 1))², built on first interior lookup.
    // `None` when a closed form is cheap.
    table: Option<Lattice>,
}

#[derive(Debug, Clone)]
struct Lattice {
    grid: QuadratureGrid,
    values: OnceLock<Result<Vec<f64>>>,
}

impl Lattice {
    fn values(&self, act: &ActivationSpec) -> Result<&[f64]> {
        let n = LATTICE_POINTS - 1;
        let built = self.values.get_or_init(|| {
            (0..=n)
                .map(|i| {
                    let t = i as f64 / n as f64;
                    pbar(act, 1.0 - t * t, &self.grid)
                })
                .collect()
        });
        match built {
            Ok(v) => Ok(v),
            Err(e) => Err(e.clone()),
        }
    }
}

impl OverlapCurve {
    pub fn new(act: &ActivationSpec, grid: &QuadratureGrid) -> Result<Self> {
        let moments = act.moments(grid)?;
        if moments.dm2 <= 0.0 {
            return Err(Error::DegenerateActivation(moments.dm2));
        }
        let table = match act.kind() {
            ActivationKind::Quadratic | ActivationKind::Erf => None,
            _ => Some(Lattice {
                grid: grid.clone(),
                values: OnceLock::new(),
            }),
        };
        Ok(OverlapCurve {
            activation: act.clone(),
            moments,
            pbar_top: moments.m2 / moments.dm2,
            pbar_bottom: moments.m1 * moments.m1 / moments.dm2,
            table,
        })
    }

    pub fn activation(&self) -> &ActivationSpec {
        &self.activation
    }

    pub fn moments(&self) -> MomentSet {
        self.moments
    }

    /// `p̄(1) = m2 / dm2`.
    pub fn pbar_top(&self) -> f64 {
        self.pbar_top
    }

    /// `p̄(0) = m1² / dm2`.
    pub fn pbar_bottom(&self) -> f64 {
        self.pbar_bottom
    }

    pub fn is_memoized(&self) -> bool {
        self.table.is_some()
    }

    /// `p̄(p)`, interpolated from the lattice when one is stored.
    pub fn eval(&self, p: f64) -> Result<f64> {
        let p = check_unit(p)?;
        match &self.table {
            None => match self.activation.kind() {
                ActivationKind::Quadratic => pbar_quadratic_closed(p),
                _ => pbar_erf_closed(p),
            },
            // The lattice ends are exact nodes, so they skip the build.
            Some(lattice) if p == 0.0 || p == 1.0 => pbar(&self.activation, p, &lattice.grid),
            Some(lattice) => Ok(interpolate(
                lattice.values(&self.activation)?,
                (1.0 - p).sqrt(),
            )),
        }
    }

    /// Bypasses the lattice.
    pub fn eval_direct(&self, p: f64, grid: &QuadratureGrid) -> Result<f64> {
        pbar(&self.activation, p, grid)
    }

    /// `dp̄/dp` by central differences, one-sided at the ends of `[0, 1]`.
    pub fn slope(&self, p: f64) -> Result<f64> {
        let p = check_unit(p)?;
        let lo = (p - SLOPE_STEP).max(0.0);
        let hi = (p + SLOPE_STEP).min(1.0);
        Ok((self.eval(hi)? - self.eval(lo)?) / (hi - lo))
    }
}

/// Four-point Lagrange interpolation on the uniform `t` lattice.
fn interpolate(values: &[f64], t: f64) -> f64 {
    let n = values.len() - 1;
    let x = t.clamp(0.0, 1.0) * n as f64;
    let i = (x.floor() as usize).clamp(1, n - 2);
    let u = x - i as f64;
    let (y0, y1, y2, y3) = (values[i - 1], values[i], values[i + 1], values[i + 2]);
    // Nodes at -1, 0, 1, 2.
    let l0 = -u * (u - 1.0) * (u - 2.0) / 6.0;
    let l1 = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
    let l2 = -(u + 1.0) * u * (u - 2.0) / 2.0;
    let l3 = (u + 1.0) * u * (u - 1.0) / 6.0;
    l0 * y0 + l1 * y1 + l2 * y2 + l3 * y3
}

/// `b̄ₖ = √(p̄(pₖ₋₁) - p̄(pₖ))` for `k = 2..=r+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveFieldCoeffs {
    pub bbar: Vec<f64>,
}

impl EffectiveFieldCoeffs {
    /// `b̄₂²`, the variance of the innermost field component.
    pub fn gap(&self) -> f64 {
        self.bbar[0] * self.bbar[0]
    }

    pub fn total_variance(&self) -> f64 {
        self.bbar.iter().map(|b| b * b).sum()
    }
}

/// Radicands down to this negative value are treated as rounding noise.
const RADICAND_SLACK: f64 = 1e-12;

/// Coefficients for the full overlap vector `1 = p₁ ≥ p₂ ≥ … ≥ p_{r+1} = 0`.
pub fn effective_coeffs(curve: &OverlapCurve, p_vec: &[f64]) -> Result<EffectiveFieldCoeffs> {
    if p_vec.len() < 2 {
        return Err(Error::InvalidOverlapVector(format!(
            "need at least the endpoints 1 and 0, got {p_vec:?}"
        )));
    }
    if p_vec[0] != 1.0 || p_vec[p_vec.len() - 1] != 0.0 {
        return Err(Error::InvalidOverlapVector(format!(
            "endpoints must be 1 and 0, got {p_vec:?}"
        )));
    }
    if p_vec.windows(2).any(|w| !(w[0] >= w[1])) {
        return Err(Error::InvalidOverlapVector(format!(
            "not descending: {p_vec:?}"
        )));
    }
    let values = p_vec
        .iter()
        .map(|&p| curve.eval(p))
        .collect::<Result<Vec<f64>>>()?;
    let bbar = values
        .windows(2)
        .map(|w| {
            let d = w[0] - w[1];
            if d < -RADICAND_SLACK {
                Err(Error::InvalidOverlapVector(format!(
                    "overlap curve decreases between {} and {} (by {})",
                    w[0], w[1], -d
                )))
            } else {
                Ok(d.max(0.0).sqrt())
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EffectiveFieldCoeffs { bbar })
}
