//! Stationarity solves and capacity root finding.
//!
//! The free unknowns at a full level `r` are `(p₂..p_r, q₂..q_r, γ)`; the
//! sphere multiplier `γ^(p)` and the `c` vector follow from the closed-form
//! relations in [`closed_form_gamma_c`], which make `∂ψ/∂q` and `∂ψ/∂γ^(p)`
//! vanish identically.  The remaining equations `∂ψ/∂p = ∂ψ/∂c = ∂ψ/∂γ = 0`
//! are solved by Newton's method on finite-difference derivatives, with a
//! Levenberg–Marquardt phase to reach Newton's basin when needed.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activation::ActivationSpec;
use crate::error::{Error, Result};
use crate::free_energy::{net_term, psi, LiftParams, MAX_LEVEL};
use crate::overlap::OverlapCurve;
use crate::quadrature::{gauss_hermite, QuadratureGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Partial,
    Full,
}

/// Lifting level selector: `1`, `2-partial`, `2-full`, `3-full`, `r-full:N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Level {
    One,
    TwoPartial,
    Full(usize),
}

impl Level {
    pub fn r(self) -> usize {
        match self {
            Level::One => 1,
            Level::TwoPartial => 2,
            Level::Full(r) => r,
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Level::TwoPartial => Variant::Partial,
            _ => Variant::Full,
        }
    }

    /// The level this one is warm-started from.
    pub fn previous(self) -> Option<Level> {
        match self {
            Level::One | Level::Full(1) => None,
            Level::TwoPartial => Some(Level::One),
            Level::Full(2) => Some(Level::TwoPartial),
            Level::Full(r) => Some(Level::Full(r - 1)),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::One | Level::Full(1) => f.write_str("1"),
            Level::TwoPartial => f.write_str("2-partial"),
            Level::Full(r @ (2 | 3)) => write!(f, "{r}-full"),
            Level::Full(r) => write!(f, "r-full:{r}"),
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let level = match s {
            "1" => Level::One,
            "2-partial" => Level::TwoPartial,
            "2-full" => Level::Full(2),
            "3-full" => Level::Full(3),
            _ => {
                let n = s
                    .strip_prefix("r-full:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::InvalidLevel(s.to_string()))?;
                match n {
                    1 => Level::One,
                    2..=MAX_LEVEL => Level::Full(n),
                    _ => return Err(Error::InvalidLevel(s.to_string())),
                }
            }
        };
        Ok(level)
    }
}

impl From<Level> for String {
    fn from(level: Level) -> String {
        level.to_string()
    }
}

impl TryFrom<String> for Level {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative step of the central differences giving `∂ψ`.
    pub fd_step: f64,
    /// Relative step of the central differences giving the Jacobian of the
    /// stationarity residual.
    pub jacobian_step: f64,
    /// Initial Newton step fraction.
    pub damping: f64,
    pub max_iters: usize,
    pub alpha_bracket: (f64, f64),
    /// Target on `max |∂ψ|` at a stationary point.
    pub stationarity_tol: f64,
    /// Target on `|ψ|` at `α_c`.
    pub psi_tol: f64,
    pub grid_order: usize,
    pub nested_order: usize,
    pub init_p2: f64,
    pub init_q2: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            fd_step: 1e-5,
            jacobian_step: 1e-4,
            damping: 1.0,
            max_iters: 40,
            alpha_bracket: (1.5, 5.0),
            stationarity_tol: 1e-9,
            psi_tol: 1e-11,
            grid_order: 120,
            nested_order: 80,
            init_p2: 0.5,
            init_q2: 0.3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(1e-7..=1e-4).contains(&self.fd_step) {
            return bad(format!("fd_step {} outside [1e-7, 1e-4]", self.fd_step));
        }
        if !(1e-7..=1e-3).contains(&self.jacobian_step) {
            return bad(format!(
                "jacobian_step {} outside [1e-7, 1e-3]",
                self.jacobian_step
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping {} outside (0, 1]", self.damping));
        }
        let (lo, hi) = self.alpha_bracket;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return bad(format!("alpha bracket [{lo}, {hi}]"));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.stationarity_tol > 0.0 && self.psi_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if !(0.0 < self.init_q2 && self.init_q2 < 1.0 && 0.0 < self.init_p2 && self.init_p2 < 1.0) {
            return bad("initial overlaps must lie in (0, 1)".into());
        }
        gauss_hermite(self.grid_order)?;
        gauss_hermite(self.nested_order)?;
        Ok(())
    }

    /// Quadrature grid for the net term at level `r`.
    pub fn grid_for(&self, r: usize) -> Result<QuadratureGrid> {
        gauss_hermite(if r <= 2 {
            self.grid_order
        } else {
            self.nested_order
        })
    }
}

/// `(γ^(p), [c₂, …, c_r])` from the stationarity relations in `q` and `γ^(p)`.
///
/// With `Pₖ`, `Qₖ` the full vectors (`P₁ = Q₁ = 1`) and
/// `Aᵢ = Π_{k=i,i+2,…≤r-1} (Pₖ-Pₖ₊₁)/(Qₖ-Qₖ₊₁) · Π_{k=i,i+2,…≤r-2} (Qₖ₊₁-Qₖ₊₂)/(Pₖ₊₁-Pₖ₊₂)`,
/// `s = √(Q_r/P_r)`:
///
/// - `γ^(p) = ½ (Q₁-Q₂)/(P₁-P₂) · A₂ · s^{(-1)^{r+1}}`
/// - `cᵢ = Aᵢ s^{σᵢ}/(Pᵢ₋₁-Pᵢ) - s^{-σᵢ}/(Aᵢ (Qᵢ₋₁-Qᵢ))`, `σᵢ = (-1)^{r+i+1}`.
pub fn closed_form_gamma_c(r: usize, p: &[f64], q: &[f64]) -> Result<(f64, Vec<f64>)> {
    if r < 2 || p.len() != r - 1 || q.len() != r - 1 {
        return Err(Error::InvalidLevel(format!(
            "closed forms need r ≥ 2 and r - 1 overlaps (r = {r}, |p| = {}, |q| = {})",
            p.len(),
            q.len()
        )));
    }
    let pf: Vec<f64> = std::iter::once(1.0).chain(p.iter().copied()).collect();
    let qf: Vec<f64> = std::iter::once(1.0).chain(q.iter().copied()).collect();
    // 1-based accessors.
    let pk = |k: usize| pf[k - 1];
    let qk = |k: usize| qf[k - 1];
    for k in 2..=r {
        if !(pk(k - 1) > pk(k) && qk(k - 1) > qk(k)) {
            return Err(Error::Inadmissible(format!(
                "closed forms need strictly decreasing overlaps: p = {p:?}, q = {q:?}"
            )));
        }
    }
    if !(pk(r) > 0.0 && qk(r) > 0.0) {
        return Err(Error::Inadmissible(format!(
            "closed forms need p_r, q_r > 0: p = {p:?}, q = {q:?}"
        )));
    }
    let a = |i: usize| {
        let mut v = 1.0;
        let mut k = i;
        while k < r {
            v *= (pk(k) - pk(k + 1)) / (qk(k) - qk(k + 1));
            if k + 2 <= r {
                v *= (qk(k + 1) - qk(k + 2)) / (pk(k + 1) - pk(k + 2));
            }
            k += 2;
        }
        v
    };
    let s = (qk(r) / pk(r)).sqrt();
    let sign_pow = |e: i32| if e % 2 == 0 { s } else { 1.0 / s };
    let gamma_p = 0.5 * (1.0 - qk(2)) / (1.0 - pk(2)) * a(2) * sign_pow(r as i32 + 1);
    let c = (2..=r)
        .map(|i| {
            let ai = a(i);
            let e = (r + i + 1) as i32;
            ai * sign_pow(e) / (pk(i - 1) - pk(i)) - sign_pow(e + 1) / (ai * (qk(i - 1) - qk(i)))
        })
        .collect();
    Ok((gamma_p, c))
}

/// `γ^(p) = (c₂ + √(c₂² + 4))/4`, the sphere stationarity relation at
/// `p₂ = q₂ = 0`.
pub fn partial2_relation(c2: f64) -> f64 {
    (c2 + (c2 * c2 + 4.0).sqrt()) / 4.0
}

/// Coordinates of [`LiftParams`] that derivatives are taken in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// `p_k`, `k ≥ 2`.
    P(usize),
    Q(usize),
    C(usize),
    Gamma,
    GammaP,
}

impl Var {
    fn get(self, params: &LiftParams) -> f64 {
        match self {
            Var::P(k) => params.p[k - 2],
            Var::Q(k) => params.q[k - 2],
            Var::C(k) => params.c[k - 2],
            Var::Gamma => params.gamma_sq,
            Var::GammaP => params.gamma_sq_p,
        }
    }

    fn slot(self, params: &mut LiftParams) -> &mut f64 {
        match self {
            Var::P(k) => &mut params.p[k - 2],
            Var::Q(k) => &mut params.q[k - 2],
            Var::C(k) => &mut params.c[k - 2],
            Var::Gamma => &mut params.gamma_sq,
            Var::GammaP => &mut params.gamma_sq_p,
        }
    }
}

/// Evaluates `ψ` for one activation at one level.
#[derive(Debug, Clone)]
pub struct FreeEnergy<'a> {
    pub curve: &'a OverlapCurve,
    pub grid: &'a QuadratureGrid,
}

impl FreeEnergy<'_> {
    pub fn psi(&self, params: &LiftParams, alpha: f64) -> Result<f64> {
        psi(params, alpha, self.curve, self.grid)
    }

    /// `∂ψ/∂α = (I_net - γ)/α`, exact because `I_net - γ` is linear in `α`.
    pub fn dpsi_dalpha(&self, params: &LiftParams, alpha: f64) -> Result<f64> {
        Ok((net_term(params, self.curve, alpha, self.grid)? - params.gamma_sq) / alpha)
    }

    /// Central difference `∂ψ/∂v` with step `rel · max(1, |v|)`.
    pub fn partial(&self, params: &LiftParams, alpha: f64, var: Var, rel: f64) -> Result<f64> {
        let h = rel * var.get(params).abs().max(1.0);
        let mut up = params.clone();
        *var.slot(&mut up) += h;
        let mut down = params.clone();
        *var.slot(&mut down) -= h;
        Ok((self.psi(&up, alpha)? - self.psi(&down, alpha)?) / (2.0 * h))
    }

    /// Forward difference, for coordinates sitting on a boundary.
    pub fn partial_forward(
        &self,
        params: &LiftParams,
        alpha: f64,
        var: Var,
        rel: f64,
    ) -> Result<f64> {
        let h = rel * var.get(params).abs().max(1.0);
        let mut up = params.clone();
        *var.slot(&mut up) += h;
        let mut up2 = params.clone();
        *var.slot(&mut up2) += 2.0 * h;
        let f0 = self.psi(params, alpha)?;
        Ok((-3.0 * f0 + 4.0 * self.psi(&up, alpha)? - self.psi(&up2, alpha)?) / (2.0 * h))
    }

    pub fn gradient(
        &self,
        params: &LiftParams,
        alpha: f64,
        vars: &[Var],
        rel: f64,
    ) -> Result<Vec<f64>> {
        vars.iter()
            .map(|&v| self.partial(params, alpha, v, rel))
            .collect()
    }
}

/// Which reduced system is being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    /// Unknowns `(p₂..p_r, q₂..q_r, γ)` with closed-form `γ^(p)`, `c`.
    Full(usize),
    /// Unknowns `(c₂, γ)` at `p₂ = q₂ = 0`, `γ^(p)` from [`partial2_relation`].
    Partial,
    /// Unknowns `(c₂, γ, γ^(p))` at `p₂ = q₂ = 0`, nothing substituted.
    FullPinnedAtZeroOverlap,
    /// Unknowns `(γ, γ^(p))` at `p₂ = q₂ = 0`, `c₂ = 0`.
    PartialPinnedAtZeroC,
}

impl System {
    pub fn dim(self) -> usize {
        match self {
            System::Full(r) => 2 * (r - 1) + 1,
            System::Partial | System::PartialPinnedAtZeroC => 2,
            System::FullPinnedAtZeroOverlap => 3,
        }
    }

    /// Coordinates whose `ψ`-derivatives form the residual.
    pub fn residual_vars(self) -> Vec<Var> {
        match self {
            System::Full(r) => (2..=r)
                .map(Var::P)
                .chain((2..=r).map(Var::C))
                .chain([Var::Gamma])
                .collect(),
            System::Partial => vec![Var::C(2), Var::Gamma],
            System::FullPinnedAtZeroOverlap => vec![Var::C(2), Var::Gamma, Var::GammaP],
            System::PartialPinnedAtZeroC => vec![Var::Gamma, Var::GammaP],
        }
    }

    /// Coordinates eliminated by closed forms; their derivatives vanish at a
    /// stationary point.
    pub fn eliminated_vars(self) -> Vec<Var> {
        match self {
            System::Full(r) => (2..=r).map(Var::Q).chain([Var::GammaP]).collect(),
            System::Partial => vec![Var::GammaP],
            _ => vec![],
        }
    }

    pub fn expand(self, x: &[f64]) -> Result<LiftParams> {
        if x.len() != self.dim() {
            return Err(Error::InvalidLevel(format!(
                "{self:?} expects {} unknowns, got {}",
                self.dim(),
                x.len()
            )));
        }
        match self {
            System::Full(r) => {
                let n = r - 1;
                let (p, q) = (x[..n].to_vec(), x[n..2 * n].to_vec());
                let (gamma_p, c) = closed_form_gamma_c(r, &p, &q)?;
                LiftParams::new(r, p, q, c, x[2 * n], gamma_p)
            }
            System::Partial => LiftParams::new(
                2,
                vec![0.0],
                vec![0.0],
                vec![x[0]],
                x[1],
                partial2_relation(x[0]),
            ),
            System::FullPinnedAtZeroOverlap => {
                LiftParams::new(2, vec![0.0], vec![0.0], vec![x[0]], x[1], x[2])
            }
            System::PartialPinnedAtZeroC => {
                LiftParams::new(2, vec![0.0], vec![0.0], vec![0.0], x[0], x[1])
            }
        }
    }

    pub fn reduce(self, params: &LiftParams) -> Vec<f64> {
        match self {
            System::Full(_) => params
                .p
                .iter()
                .chain(&params.q)
                .copied()
                .chain([params.gamma_sq])
                .collect(),
            System::Partial => vec![params.c[0], params.gamma_sq],
            System::FullPinnedAtZeroOverlap => {
                vec![params.c[0], params.gamma_sq, params.gamma_sq_p]
            }
            System::PartialPinnedAtZeroC => vec![params.gamma_sq, params.gamma_sq_p],
        }
    }
}

/// Iteration counters of a solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Iterations {
    pub newton: usize,
    pub levenberg_marquardt: usize,
    pub alpha_steps: usize,
    pub restarts: usize,
}

impl Iterations {
    fn absorb(&mut self, other: Iterations) {
        self.newton += other.newton;
        self.levenberg_marquardt += other.levenberg_marquardt;
        self.restarts += other.restarts;
    }
}

/// Smallest `c` accepted at a full-level solution; below it the solve has
/// collapsed onto the trivial `p = q` branch.
const C_FLOOR: f64 = 1e-6;

struct Stationary<'a> {
    fe: FreeEnergy<'a>,
    system: System,
    cfg: &'a SolverConfig,
}

impl Stationary<'_> {
    fn residual(&self, x: &[f64], alpha: f64) -> Result<DVector<f64>> {
        let params = self.system.expand(x)?;
        params.check_admissible()?;
        if matches!(self.system, System::Full(_)) && params.c.iter().any(|&c| c < C_FLOOR) {
            return Err(Error::Inadmissible(format!(
                "c = {:?} at the floor",
                params.c
            )));
        }
        let g = self.fe.gradient(
            &params,
            alpha,
            &self.system.residual_vars(),
            self.cfg.fd_step,
        )?;
        Ok(DVector::from_vec(g))
    }

    fn jacobian(&self, x: &[f64], alpha: f64) -> Result<DMatrix<f64>> {
        let n = x.len();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = self.cfg.jacobian_step * x[j].abs().max(1.0);
            let mut up = x.to_vec();
            up[j] += h;
            let mut down = x.to_vec();
            down[j] -= h;
            let col = (self.residual(&up, alpha)? - self.residual(&down, alpha)?) / (2.0 * h);
            jac.set_column(j, &col);
        }
        Ok(jac)
    }

    fn converged(&self, f: &DVector<f64>) -> bool {
        f.amax() < self.cfg.stationarity_tol
    }

    /// Newton iterations damped only to stay admissible.
    fn newton(&self, x0: &[f64], alpha: f64, it: &mut Iterations) -> Option<Vec<f64>> {
        let mut x = x0.to_vec();
        for _ in 0..self.cfg.max_iters {
            let f = self.residual(&x, alpha).ok()?;
            if self.converged(&f) {
                return Some(x);
            }
            let jac = self.jacobian(&x, alpha).ok()?;
            let dx = jac.lu().solve(&(-f))?;
            let mut t = self.cfg.damping;
            loop {
                let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + t * d).collect();
                if self.residual(&trial, alpha).is_ok() {
                    x = trial;
                    break;
                }
                t *= 0.5;
                if t < 1e-4 {
                    return None;
                }
            }
            it.newton += 1;
        }
        let f = self.residual(&x, alpha).ok()?;
        self.converged(&f).then_some(x)
    }

    /// Levenberg–Marquardt on `½|F|²` until `max |F| < target`.
    fn levenberg_marquardt(
        &self,
        x0: &[f64],
        alpha: f64,
        target: f64,
        it: &mut Iterations,
    ) -> Result<Vec<f64>> {
        let mut x = x0.to_vec();
        let mut f = self.residual(&x, alpha)?;
        let mut lambda = 1e-3;
        for _ in 0..100 {
            if f.amax() < target {
                break;
            }
            let jac = self.jacobian(&x, alpha)?;
            let jtj = jac.transpose() * &jac;
            let grad = jac.transpose() * &f;
            let mut improved = false;
            while lambda < 1e12 {
                let mut a = jtj.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
                }
                if let Some(dx) = a.lu().solve(&(-&grad)) {
                    let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + d).collect();
                    if let Ok(ft) = self.residual(&trial, alpha) {
                        if ft.norm_squared() < f.norm_squared() {
                            x = trial;
                            f = ft;
                            lambda = (lambda / 10.0).max(1e-12);
                            improved = true;
                            break;
                        }
                    }
                }
                lambda *= 10.0;
            }
            it.levenberg_marquardt += 1;
            if !improved {
                break;
            }
        }
        Ok(x)
    }

    fn solve(&self, x0: &[f64], alpha: f64, it: &mut Iterations) -> Result<Vec<f64>> {
        self.residual(x0, alpha)?;
        if let Some(x) = self.newton(x0, alpha, it) {
            return Ok(x);
        }
        let mut x = x0.to_vec();
        for target in [1e-3, 1e-4, 1e-5, 1e-6] {
            it.restarts += 1;
            x = self.levenberg_marquardt(&x, alpha, target, it)?;
            if let Some(sol) = self.newton(&x, alpha, it) {
                return Ok(sol);
            }
        }
        let residual = self
            .residual(&x, alpha)
            .map(|f| f.amax())
            .unwrap_or(f64::NAN);
        Err(Error::NonConvergence {
            iters: it.newton + it.levenberg_marquardt,
            residual,
        })
    }
}

/// Stationary point of `level` at `α`, started from `init`.
pub fn solve_stationary(
    level: Level,
    curve: &OverlapCurve,
    alpha: f64,
    init: &LiftParams,
    cfg: &SolverConfig,
) -> Result<LiftParams> {
    cfg.validate()?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha}")));
    }
    let grid = cfg.grid_for(level.r())?;
    let fe = FreeEnergy { curve, grid: &grid };
    let mut it = Iterations::default();
    match level {
        Level::One | Level::Full(1) => {
            let z = 0.5 * (curve.pbar_top() - curve.pbar_bottom());
            Ok(LiftParams::level1(0.5 * (alpha * z).sqrt(), 0.5))
        }
        Level::TwoPartial => {
            let sol = partial_profile(&fe, alpha, init.gamma_sq, cfg)?;
            Ok(sol.params)
        }
        Level::Full(r) => {
            check_full_level(r)?;
            if init.r != r {
                return Err(Error::InvalidLevel(format!(
                    "initial point has r = {}, level needs r = {r}",
                    init.r
                )));
            }
            let system = System::Full(r);
            let st = Stationary { fe, system, cfg };
            let x = st.solve(&system.reduce(init), alpha, &mut it)?;
            system.expand(&x)
        }
    }
}

fn check_full_level(r: usize) -> Result<()> {
    if !(2..=MAX_LEVEL).contains(&r) {
        return Err(Error::InvalidLevel(format!("r-full:{r}")));
    }
    Ok(())
}

struct PartialSolution {
    params: LiftParams,
    collapsed: bool,
}

/// Stationary point of the partial level via the profile `c ↦ ψ(c, γ*(c))`.
///
/// `γ*(c)` minimizes `ψ` in `γ`; the stationary `c` is the first maximum of
/// the profile scanning up from `c = 0`.  When the profile decreases at
/// `c = 0` the point collapses onto the first level (`c = 0`).
fn partial_profile(
    fe: &FreeEnergy,
    alpha: f64,
    gamma_hint: f64,
    cfg: &SolverConfig,
) -> Result<PartialSolution> {
    let system = System::Partial;
    let z = 0.5 * (fe.curve.pbar_top() - fe.curve.pbar_bottom());
    let mut gamma = if gamma_hint > 0.0 {
        gamma_hint
    } else {
        0.5 * (alpha * z).sqrt()
    };
    let profile_slope = |c: f64, gamma: &mut f64| -> Result<f64> {
        *gamma = optimal_gamma(fe, alpha, c, *gamma, cfg)?;
        let params = system.expand(&[c, *gamma])?;
        if c == 0.0 {
            fe.partial_forward(&params, alpha, Var::C(2), cfg.fd_step)
        } else {
            fe.partial(&params, alpha, Var::C(2), cfg.fd_step)
        }
    };

    let at_zero = profile_slope(0.0, &mut gamma)?;
    let level_one_gamma = 0.5 * (alpha * z).sqrt();
    if at_zero <= 0.0 {
        return Ok(PartialSolution {
            params: System::PartialPinnedAtZeroC.expand(&[level_one_gamma, 0.5])?,
            collapsed: true,
        });
    }
    const SCAN: [f64; 14] = [
        0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0,
    ];
    let (mut lo, mut lo_gamma) = (0.0, gamma);
    let mut bracket = None;
    for &c in &SCAN {
        let mut g = lo_gamma;
        let s = profile_slope(c, &mut g)?;
        if s < 0.0 {
            bracket = Some((lo, lo_gamma, c, g));
            break;
        }
        lo = c;
        lo_gamma = g;
    }
    let (mut a, mut ga, mut b, _) = bracket.ok_or(Error::NonConvergence {
        iters: SCAN.len(),
        residual: f64::NAN,
    })?;
    // Bisection refined by secant steps on the profile slope.
    let mut sa = profile_slope(a.max(0.0), &mut ga)?;
    let mut gb = ga;
    let mut sb = profile_slope(b, &mut gb)?;
    let mut c = 0.5 * (a + b);
    let mut gamma_c = ga;
    for _ in 0..200 {
        let secant = b - sb * (b - a) / (sb - sa);
        c = if secant > a && secant < b && (b - a) < 0.5 {
            secant
        } else {
            0.5 * (a + b)
        };
        gamma_c = 0.5 * (ga + gb);
        let s = profile_slope(c, &mut gamma_c)?;
        if s.abs() < cfg.stationarity_tol || (b - a) < 1e-13 * b {
            break;
        }
        if s > 0.0 {
            a = c;
            sa = s;
            ga = gamma_c;
        } else {
            b = c;
            sb = s;
            gb = gamma_c;
        }
        // Keep a slowly moving endpoint from stalling the secant.
        if (b - a) > 1e-3 && ((c - a).abs() < 1e-3 * (b - a) || (b - c).abs() < 1e-3 * (b - a)) {
            let mid = 0.5 * (a + b);
            let mut gm = 0.5 * (ga + gb);
            let sm = profile_slope(mid, &mut gm)?;
            if sm > 0.0 {
                a = mid;
                sa = sm;
                ga = gm;
            } else {
                b = mid;
                sb = sm;
                gb = gm;
            }
        }
    }
    Ok(PartialSolution {
        params: system.expand(&[c, gamma_c])?,
        collapsed: false,
    })
}

/// Root of `∂ψ/∂γ` at fixed partial-level `c`, by Newton's method in `ln γ`.
fn optimal_gamma(
    fe: &FreeEnergy,
    alpha: f64,
    c: f64,
    gamma0: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let system = System::Partial;
    let slope = |lg: f64| -> Result<f64> {
        let params = system.expand(&[c, lg.exp()])?;
        fe.partial(&params, alpha, Var::Gamma, cfg.fd_step)
    };
    let mut lg = gamma0.ln();
    let h = 1e-4;
    for _ in 0..cfg.max_iters {
        let s = slope(lg)?;
        if s.abs() < 0.1 * cfg.stationarity_tol {
            return Ok(lg.exp());
        }
        let ds = (slope(lg + h)? - slope(lg - h)?) / (2.0 * h);
        let step = if ds > 0.0 { -s / ds } else { -s.signum() * 0.5 };
        lg += step.clamp(-1.0, 1.0);
        if step.abs() < 1e-10 {
            return Ok(lg.exp());
        }
    }
    Err(Error::NonConvergence {
        iters: cfg.max_iters,
        residual: slope(lg)?.abs(),
    })
}

/// Solved capacity at one level with its stationary point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacityReport {
    pub activation: String,
    pub level: Level,
    pub variant: Variant,
    pub alpha_c: f64,
    pub params: LiftParams,
    /// `max |∂ψ|` over the solved equations.
    pub stationarity_residual: f64,
    /// `max |∂ψ|` over the coordinates eliminated by closed forms.
    pub eliminated_residual: f64,
    /// Largest change of `γ^(p)` or `c` when re-derived from the solved
    /// overlaps by the closed-form relations.
    pub closed_form_residual: f64,
    /// `|ψ(params, α_c)|`.
    pub psi_residual: f64,
    /// The partial level made no progress over the first level.
    pub collapsed: bool,
    pub iterations: Iterations,
    pub wall_time: f64,
}

impl PartialEq for CapacityReport {
    fn eq(&self, other: &Self) -> bool {
        self.activation == other.activation
            && self.level == other.level
            && self.variant == other.variant
            && self.alpha_c == other.alpha_c
            && self.params == other.params
            && self.stationarity_residual == other.stationarity_residual
            && self.eliminated_residual == other.eliminated_residual
            && self.closed_form_residual == other.closed_form_residual
            && self.psi_residual == other.psi_residual
            && self.collapsed == other.collapsed
            && self.iterations == other.iterations
    }
}

/// Capacity at `level`, warm-started through the lower levels.
pub fn capacity(level: Level, act: &ActivationSpec, cfg: &SolverConfig) -> Result<CapacityReport> {
    cfg.validate()?;
    let grid = gauss_hermite(cfg.grid_order)?;
    let curve = OverlapCurve::new(act, &grid)?;
    capacity_with_curve(level, &curve, cfg)
}

/// [`capacity`] with a prebuilt overlap curve.
pub fn capacity_with_curve(
    level: Level,
    curve: &OverlapCurve,
    cfg: &SolverConfig,
) -> Result<CapacityReport> {
    if let Level::Full(r) = level {
        check_full_level(r)?;
    }
    let mut chain = Vec::new();
    let mut l = Some(level);
    while let Some(cur) = l {
        chain.push(cur);
        l = cur.previous();
    }
    let mut prev: Option<CapacityReport> = None;
    for &cur in chain.iter().rev() {
        prev = Some(capacity_from(cur, curve, cfg, prev.as_ref())?);
    }
    Ok(prev.expect("chain is never empty"))
}

/// Capacity at `level` continuing from the report of `level.previous()`.
pub fn capacity_from(
    level: Level,
    curve: &OverlapCurve,
    cfg: &SolverConfig,
    previous: Option<&CapacityReport>,
) -> Result<CapacityReport> {
    cfg.validate()?;
    let start = Instant::now();
    let activation = curve.activation().name().to_string();
    let mut report = match level {
        Level::One | Level::Full(1) => {
            let z = 0.5 * (curve.pbar_top() - curve.pbar_bottom());
            if !(z > 0.0) {
                return Err(Error::DegenerateActivation(z));
            }
            CapacityReport {
                activation,
                level: Level::One,
                variant: Variant::Full,
                alpha_c: 1.0 / z,
                params: LiftParams::level1(0.5, 0.5),
                stationarity_residual: 0.0,
                eliminated_residual: 0.0,
                closed_form_residual: 0.0,
                psi_residual: 0.0,
                collapsed: false,
                iterations: Iterations::default(),
                wall_time: 0.0,
            }
        }
        Level::TwoPartial => {
            let grid = cfg.grid_for(2)?;
            let fe = FreeEnergy { curve, grid: &grid };
            let alpha0 = match previous {
                Some(p) => p.alpha_c,
                None => 1.0 / (0.5 * (curve.pbar_top() - curve.pbar_bottom())),
            };
            let mut gamma_hint = 0.5;
            let mut collapsed = false;
            let mut solve = |alpha: f64, _: &LiftParams| -> Result<(LiftParams, Iterations)> {
                let sol = partial_profile(&fe, alpha, gamma_hint, cfg)?;
                gamma_hint = sol.params.gamma_sq;
                collapsed = sol.collapsed;
                Ok((sol.params, Iterations::default()))
            };
            let init = LiftParams::level1(0.5, 0.5);
            let (alpha, params, it) = find_alpha(&fe, alpha0, &init, cfg, &mut solve)?;
            let system = if collapsed {
                System::PartialPinnedAtZeroC
            } else {
                System::Partial
            };
            finish(
                &fe,
                System::Partial,
                system,
                activation,
                level,
                alpha,
                params,
                it,
                collapsed,
                cfg,
            )?
        }
        Level::Full(r) => {
            check_full_level(r)?;
            let grid = cfg.grid_for(r)?;
            let fe = FreeEnergy { curve, grid: &grid };
            let owned;
            let previous = match previous {
                Some(p) => p,
                None => {
                    owned = capacity_with_curve(level.previous().expect("r ≥ 2"), curve, cfg)?;
                    &owned
                }
            };
            let alpha0 = previous.alpha_c;
            let system = System::Full(r);
            let starts = initial_points(r, previous, curve, cfg)?;
            let st = Stationary {
                fe: fe.clone(),
                system,
                cfg,
            };
            // First start that converges at alpha0 fixes the branch.
            let mut it = Iterations::default();
            let mut first = None;
            let mut last_err = None;
            for s in &starts {
                match st.solve(&system.reduce(s), alpha0, &mut it) {
                    Ok(x) => {
                        first = Some(system.expand(&x)?);
                        break;
                    }
                    Err(e) => {
                        it.restarts += 1;
                        last_err = Some(e);
                    }
                }
            }
            let init = match first {
                Some(p) => p,
                None => return Err(last_err.expect("at least one start")),
            };
            let mut solve = |alpha: f64, from: &LiftParams| -> Result<(LiftParams, Iterations)> {
                let mut it = Iterations::default();
                let x = st.solve(&system.reduce(from), alpha, &mut it)?;
                Ok((system.expand(&x)?, it))
            };
            let (alpha, params, mut it2) = find_alpha(&fe, alpha0, &init, cfg, &mut solve)?;
            it2.absorb(it);
            finish(
                &fe, system, system, activation, level, alpha, params, it2, false, cfg,
            )?
        }
    };
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Candidate starting points for a full level, in order of preference.
fn initial_points(
    r: usize,
    previous: &CapacityReport,
    curve: &OverlapCurve,
    cfg: &SolverConfig,
) -> Result<Vec<LiftParams>> {
    let z = 0.5 * (curve.pbar_top() - curve.pbar_bottom());
    let gamma_one = 0.5 * (previous.alpha_c * z).sqrt();
    let mut out = Vec::new();
    let mut push = |p: Vec<f64>, q: Vec<f64>, gamma: f64| {
        if let Ok(params) = System::Full(r).expand(
            &p.iter()
                .chain(&q)
                .copied()
                .chain([gamma])
                .collect::<Vec<f64>>(),
        ) {
            if params.c.iter().all(|&c| c > C_FLOOR) {
                out.push(params);
            }
        }
    };
    if r == 2 {
        let gamma = if previous.collapsed || !(previous.params.gamma_sq > 0.0) {
            gamma_one
        } else {
            previous.params.gamma_sq
        };
        let mut pairs = vec![(cfg.init_p2, cfg.init_q2)];
        pairs.extend([(0.5, 0.1), (0.7, 0.4), (0.6, 0.2), (0.8, 0.5)]);
        for g in [gamma, gamma_one] {
            for &(p2, q2) in &pairs {
                push(vec![p2], vec![q2], g);
            }
        }
    } else {
        // Split the top block of the previous level's solution.
        let prev = &previous.params;
        let gamma = prev.gamma_sq;
        let (p_top, q_top) = (prev.p[0], prev.q[0]);
        let with_head = |head: f64, tail: &[f64], scale: f64| {
            std::iter::once(head)
                .chain(tail.iter().map(|v| v * scale))
                .collect::<Vec<f64>>()
        };
        push(
            with_head(1.0 - (1.0 - p_top) / 8.0, &prev.p, 1.0),
            with_head(0.5 * (1.0 + q_top), &prev.q, 1.0),
            gamma,
        );
        push(
            with_head(1.0 - (1.0 - p_top) / 4.0, &prev.p, 0.95),
            with_head(0.5 * (1.0 + q_top), &prev.q, 0.9),
            0.8 * gamma,
        );
        push(
            with_head(1.0 - (1.0 - p_top) / 16.0, &prev.p, 1.0),
            with_head(0.25 * (1.0 + 3.0 * q_top), &prev.q, 1.0),
            0.7 * gamma,
        );
        // New block inserted after position `pos` of the full vectors, a
        // fraction of the way down each interval.
        let insert = |v: &[f64], pos: usize, frac: f64| {
            let full: Vec<f64> = std::iter::once(1.0)
                .chain(v.iter().copied())
                .chain([0.0])
                .collect();
            let mut out = v.to_vec();
            out.insert(pos, full[pos] - frac * (full[pos] - full[pos + 1]));
            out
        };
        for (pos, fp, fq) in [
            (0, 0.125, 0.25),
            (0, 0.05, 0.125),
            (0, 0.05, 0.25),
            (1, 0.125, 0.25),
            (1, 0.25, 0.5),
        ] {
            push(insert(&prev.p, pos, fp), insert(&prev.q, pos, fq), gamma);
        }
    }
    if out.is_empty() {
        return Err(Error::Inadmissible(format!(
            "no admissible starting point for r = {r}"
        )));
    }
    Ok(out)
}

type SolveAt<'a> = dyn FnMut(f64, &LiftParams) -> Result<(LiftParams, Iterations)> + 'a;

/// Root of `Φ(α) = ψ(stationary(α), α)` by safeguarded Newton steps, using
/// `Φ'(α) = ∂ψ/∂α` at the stationary point.
fn find_alpha(
    fe: &FreeEnergy,
    alpha0: f64,
    init: &LiftParams,
    cfg: &SolverConfig,
    solve: &mut SolveAt,
) -> Result<(f64, LiftParams, Iterations)> {
    let (lo_lim, hi_lim) = cfg.alpha_bracket;
    let mut alpha = alpha0.clamp(lo_lim, hi_lim);
    let mut from = init.clone();
    let mut it = Iterations::default();
    let mut below: Option<f64> = None; // Φ < 0
    let mut above: Option<f64> = None; // Φ > 0
    let mut last_good: Option<(f64, LiftParams)> = None;
    let mut failures = 0;
    for _ in 0..4 * cfg.max_iters {
        it.alpha_steps += 1;
        match solve(alpha, &from) {
            Ok((params, sub)) => {
                it.absorb(sub);
                let phi = fe.psi(&params, alpha)?;
                if phi.abs() < cfg.psi_tol {
                    return Ok((alpha, params, it));
                }
                let dphi = fe.dpsi_dalpha(&params, alpha)?;
                if phi < 0.0 {
                    below = Some(alpha);
                } else {
                    above = Some(alpha);
                }
                let mut next = alpha - phi / dphi;
                if let (Some(b), Some(a)) = (below, above) {
                    let (lo, hi) = (a.min(b), a.max(b));
                    if !(next > lo && next < hi) {
                        next = 0.5 * (lo + hi);
                    }
                    if hi - lo < 1e-14 * hi {
                        return Ok((alpha, params, it));
                    }
                }
                if next <= lo_lim || next >= hi_lim {
                    if alpha <= lo_lim || alpha >= hi_lim {
                        return Err(Error::BracketFailure {
                            lo: lo_lim,
                            hi: hi_lim,
                        });
                    }
                    next = next.clamp(lo_lim, hi_lim);
                }
                from = params.clone();
                last_good = Some((alpha, params));
                alpha = next;
            }
            Err(e) => {
                failures += 1;
                let Some((good, params)) = &last_good else {
                    return Err(e);
                };
                if failures > 12 {
                    return Err(e);
                }
                from = params.clone();
                alpha = 0.5 * (alpha + good);
            }
        }
    }
    Err(Error::NonConvergence {
        iters: it.alpha_steps,
        residual: f64::NAN,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    fe: &FreeEnergy,
    diag_system: System,
    system: System,
    activation: String,
    level: Level,
    alpha: f64,
    params: LiftParams,
    iterations: Iterations,
    collapsed: bool,
    cfg: &SolverConfig,
) -> Result<CapacityReport> {
    let amax = |v: Vec<f64>| v.into_iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let solved = if collapsed {
        // c sits on its boundary; only the multiplier equations apply.
        system.residual_vars()
    } else {
        diag_system.residual_vars()
    };
    let stationarity = amax(fe.gradient(&params, alpha, &solved, cfg.fd_step)?);
    let eliminated = if collapsed {
        0.0
    } else {
        amax(fe.gradient(&params, alpha, &diag_system.eliminated_vars(), cfg.fd_step)?)
    };
    let psi_residual = fe.psi(&params, alpha)?.abs();
    let closed_form_residual = closed_form_residual(&params)?;
    Ok(CapacityReport {
        activation,
        level,
        variant: level.variant(),
        alpha_c: alpha,
        params,
        stationarity_residual: stationarity,
        eliminated_residual: eliminated,
        closed_form_residual,
        psi_residual,
        collapsed,
        iterations,
        wall_time: 0.0,
    })
}

/// Distance between `(γ^(p), c)` and the closed forms evaluated at `(p, q)`.
pub fn closed_form_residual(params: &LiftParams) -> Result<f64> {
    if params.r == 1 {
        return Ok((params.gamma_sq_p - 0.5).abs());
    }
    if params.p[0] == 0.0 && params.q[0] == 0.0 {
        return Ok((params.gamma_sq_p - partial2_relation(params.c[0])).abs());
    }
    let (gamma_p, c) = closed_form_gamma_c(params.r, &params.p, &params.q)?;
    Ok(c.iter()
        .zip(&params.c)
        .map(|(a, b)| (a - b).abs())
        .fold((gamma_p - params.gamma_sq_p).abs(), f64::max))
}

/// Capacity of a pinned system, for level-collapse checks.
pub fn capacity_pinned(
    system: System,
    curve: &OverlapCurve,
    alpha0: f64,
    init: &LiftParams,
    cfg: &SolverConfig,
) -> Result<CapacityReport> {
    if !matches!(
        system,
        System::FullPinnedAtZeroOverlap | System::PartialPinnedAtZeroC
    ) {
        return Err(Error::InvalidLevel(format!(
            "{system:?} is not a pinned system"
        )));
    }
    let grid = cfg.grid_for(2)?;
    let fe = FreeEnergy { curve, grid: &grid };
    let st = Stationary {
        fe: fe.clone(),
        system,
        cfg,
    };
    let mut solve = |alpha: f64, from: &LiftParams| -> Result<(LiftParams, Iterations)> {
        let mut it = Iterations::default();
        let x = st.solve(&system.reduce(from), alpha, &mut it)?;
        Ok((system.expand(&x)?, it))
    };
    let (alpha, params, it) = find_alpha(&fe, alpha0, init, cfg, &mut solve)?;
    let level = match system {
        System::PartialPinnedAtZeroC => Level::One,
        _ => Level::TwoPartial,
    };
    let mut report = finish(
        &fe,
        system,
        system,
        curve.activation().name().to_string(),
        level,
        alpha,
        params,
        it,
        false,
        cfg,
    )?;
    report.variant = Variant::Partial;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_parsing_round_trips() {
        for s in ["1", "2-partial", "2-full", "3-full", "r-full:4"] {
            let level: Level = s.parse().unwrap();
            assert_eq!(level.to_string(), s);
        }
        assert_eq!("r-full:3".parse::<Level>().unwrap(), Level::Full(3));
        assert_eq!("r-full:1".parse::<Level>().unwrap(), Level::One);
        for bad in ["0", "4-full", "r-full:5", "r-full:x", "partial", ""] {
            assert!(bad.parse::<Level>().is_err(), "{bad}");
        }
    }

    #[test]
    fn closed_form_examples() {
        let (gp, c) = closed_form_gamma_c(2, &[0.7571], &[0.3822]).unwrap();
        assert!((gp - 1.7899).abs() < 1e-3, "{gp}");
        assert!((c[0] - 4.645).abs() < 2e-3, "{}", c[0]);
        let (_, c) = closed_form_gamma_c(2, &[0.4], &[0.4]).unwrap();
        assert!(c[0].abs() < 1e-15);
        let (_, c) = closed_form_gamma_c(3, &[0.9756, 0.6961], &[0.7026, 0.3331]).unwrap();
        assert!((c[1] - 3.3).abs() < 0.1, "{c:?}");
        assert!((c[0] - 15.0).abs() < 1.0, "{c:?}");
    }

    #[test]
    fn closed_forms_reject_degenerate_overlaps() {
        assert!(closed_form_gamma_c(3, &[0.8, 0.8], &[0.7, 0.3]).is_err());
        assert!(closed_form_gamma_c(2, &[0.0], &[0.3]).is_err());
        assert!(closed_form_gamma_c(2, &[0.5, 0.1], &[0.3]).is_err());
    }

    #[test]
    fn partial_relation_examples() {
        assert!((partial2_relation(0.8295) - 0.7487).abs() < 1e-4);
        assert_eq!(partial2_relation(0.0), 0.5);
        assert!((partial2_relation(2.1364) - 1.2657).abs() < 1e-4);
    }

    /// The relations solve `∂ψ/∂q = ∂ψ/∂γ^(p) = 0` for any `p, q`, since the
    /// net term depends on neither.
    #[test]
    fn closed_forms_zero_the_eliminated_derivatives() {
        let g = gauss_hermite(12).unwrap();
        let curve = OverlapCurve::new(&ActivationSpec::erf(), &g).unwrap();
        let fe = FreeEnergy {
            curve: &curve,
            grid: &g,
        };
        let cases: [(usize, &[f64], &[f64]); 5] = [
            (2, &[0.7], &[0.4]),
            (2, &[0.3], &[0.6]),
            (3, &[0.95, 0.7], &[0.8, 0.5]),
            (4, &[0.97, 0.91, 0.44], &[0.73, 0.61, 0.26]),
            (4, &[0.89, 0.7, 0.44], &[0.52, 0.24, 0.1]),
        ];
        let mut checked = [0usize; 5];
        for (r, p, q) in cases {
            let system = System::Full(r);
            let x: Vec<f64> = p.iter().chain(q).copied().chain([0.3]).collect();
            let Ok(params) = system.expand(&x) else {
                continue;
            };
            if params.c.iter().any(|&c| c <= 0.0) {
                continue;
            }
            for v in system.eliminated_vars() {
                let d = fe.partial(&params, 2.4, v, 1e-5).unwrap();
                assert!(d.abs() < 1e-6, "r={r} {v:?}: {d}");
            }
            checked[r] += 1;
        }
        assert!(
            checked[2] > 0 && checked[3] > 0 && checked[4] > 0,
            "{checked:?}"
        );
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let mut cfg = SolverConfig {
            fd_step: 1e-3,
            ..SolverConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.fd_step = 1e-5;
        cfg.alpha_bracket = (3.0, 2.0);
        assert!(cfg.validate().is_err());
        cfg.alpha_bracket = (1.5, 5.0);
        cfg.grid_order = 1;
        assert_eq!(cfg.validate(), Err(Error::OrderOutOfRange(1)));
    }
}
