//! Hidden-layer activations and their standard-Gaussian moments.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_hermite, QuadratureGrid, MAX_ORDER};
use crate::special::erf;

/// Agreement demanded between two quadrature orders before a moment is
/// trusted.
pub const MOMENT_TOLERANCE: f64 = 1e-7;

/// `E f(g)`, `E f(g)²`, `E f'(g)²` for `g ~ N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub m1: f64,
    pub m2: f64,
    pub dm2: f64,
}

impl MomentSet {
    pub fn variance(&self) -> f64 {
        self.m2 - self.m1 * self.m1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Quadratic,
    Erf,
    Tanh,
    Custom,
}

type RealMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// An activation `f` with its derivative.
#[derive(Clone)]
pub struct ActivationSpec {
    kind: ActivationKind,
    name: String,
    value: RealMap,
    derivative: RealMap,
    closed_form_moments: Option<MomentSet>,
    kinked: bool,
}

impl fmt::Debug for ActivationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActivationSpec")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("closed_form_moments", &self.closed_form_moments)
            .finish_non_exhaustive()
    }
}

impl PartialEq for ActivationSpec {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.name == other.name
            && (self.kind != ActivationKind::Custom
                || (Arc::ptr_eq(&self.value, &other.value)
                    && Arc::ptr_eq(&self.derivative, &other.derivative)))
    }
}

// tanh has no elementary moments; these are order-120 Gauss–Hermite values
// (confirmed to 1e-15 at order 240).
const TANH_M2: f64 = 0.394_294_490_397_841_2;
const TANH_DM2: f64 = 0.464_402_902_448_268_2;

impl ActivationSpec {
    pub fn relu() -> Self {
        Self::builtin(
            ActivationKind::Relu,
            |x| x.max(0.0),
            |x| if x > 0.0 { 1.0 } else { 0.0 },
            MomentSet {
                m1: 0.5 * (2.0 / PI).sqrt(),
                m2: 0.5,
                dm2: 0.5,
            },
            true,
        )
    }

    pub fn quadratic() -> Self {
        Self::builtin(
            ActivationKind::Quadratic,
            |x| x * x,
            |x| 2.0 * x,
            MomentSet {
                m1: 1.0,
                m2: 3.0,
                dm2: 4.0,
            },
            false,
        )
    }

    pub fn erf() -> Self {
        Self::builtin(
            ActivationKind::Erf,
            erf,
            |x| 2.0 / PI.sqrt() * (-x * x).exp(),
            MomentSet {
                m1: 0.0,
                m2: 2.0 / PI * (2.0f64 / 3.0).asin(),
                dm2: 4.0 / (5f64.sqrt() * PI),
            },
            false,
        )
    }

    pub fn tanh() -> Self {
        Self::builtin(
            ActivationKind::Tanh,
            f64::tanh,
            |x| 1.0 - x.tanh().powi(2),
            MomentSet {
                m1: 0.0,
                m2: TANH_M2,
                dm2: TANH_DM2,
            },
            false,
        )
    }

    /// A user-supplied activation; its moments always come from quadrature.
    pub fn custom<F, D>(name: impl Into<String>, value: F, derivative: D) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        ActivationSpec {
            kind: ActivationKind::Custom,
            name: name.into(),
            value: Arc::new(value),
            derivative: Arc::new(derivative),
            closed_form_moments: None,
            kinked: false,
        }
    }

    /// Marks the activation as non-smooth at 0, so Gaussian moments are split
    /// at the origin.
    pub fn with_kink_at_zero(mut self) -> Self {
        self.kinked = true;
        self
    }

    fn builtin(
        kind: ActivationKind,
        value: fn(f64) -> f64,
        derivative: fn(f64) -> f64,
        moments: MomentSet,
        kinked: bool,
    ) -> Self {
        ActivationSpec {
            kind,
            name: kind.id().to_string(),
            value: Arc::new(value),
            derivative: Arc::new(derivative),
            closed_form_moments: Some(moments),
            kinked,
        }
    }

    /// Looks up `relu`, `quadratic`, `erf` or `tanh`.
    pub fn from_id(id: &str) -> Result<Self> {
        match id.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::relu()),
            "quadratic" => Ok(Self::quadratic()),
            "erf" => Ok(Self::erf()),
            "tanh" => Ok(Self::tanh()),
            _ => Err(Error::UnknownActivation(id.to_string())),
        }
    }

    pub fn all_builtin() -> [ActivationSpec; 4] {
        [Self::relu(), Self::quadratic(), Self::erf(), Self::tanh()]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn is_kinked(&self) -> bool {
        self.kinked
    }

    pub fn closed_form_moments(&self) -> Option<MomentSet> {
        self.closed_form_moments
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.value)(x)
    }

    /// ReLU takes `f′(0) = 0`.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        (self.derivative)(x)
    }

    /// Closed-form moments when available, quadrature otherwise.
    pub fn moments(&self, grid: &QuadratureGrid) -> Result<MomentSet> {
        match self.closed_form_moments {
            Some(m) => Ok(m),
            None => self.checked_quadrature_moments(grid),
        }
    }

    /// Moments at `grid`, rejected unless a second order agrees to
    /// [`MOMENT_TOLERANCE`].
    pub fn checked_quadrature_moments(&self, grid: &QuadratureGrid) -> Result<MomentSet> {
        let n = grid.order();
        let other_order = if 2 * n <= MAX_ORDER { 2 * n } else { n / 2 };
        let other = gauss_hermite(other_order)?;
        let a = self.quadrature_moments(grid)?;
        let b = self.quadrature_moments(&other)?;
        let diff = (a.m1 - b.m1)
            .abs()
            .max((a.m2 - b.m2).abs())
            .max((a.dm2 - b.dm2).abs());
        if diff.is_nan() || diff > MOMENT_TOLERANCE {
            return Err(Error::QuadratureNonConvergence {
                low: n.min(other_order),
                high: n.max(other_order),
                diff,
            });
        }
        let best = if other_order > n { b } else { a };
        if best.dm2 <= 0.0 {
            return Err(Error::DegenerateActivation(best.dm2));
        }
        Ok(best)
    }

    /// Moments by quadrature on a single grid, ignoring any closed form.
    pub fn quadrature_moments(&self, grid: &QuadratureGrid) -> Result<MomentSet> {
        let e = |h: &dyn Fn(f64) -> f64| {
            if self.kinked {
                grid.expect_split(h)
            } else {
                grid.expect(h)
            }
        };
        Ok(MomentSet {
            m1: e(&|x| self.eval(x))?,
            m2: e(&|x| self.eval(x).powi(2))?,
            dm2: e(&|x| self.deriv(x).powi(2))?,
        })
    }
}

impl ActivationKind {
    pub fn id(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Quadratic => "quadratic",
            ActivationKind::Erf => "erf",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ActivationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}
