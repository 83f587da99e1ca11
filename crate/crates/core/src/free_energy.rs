//! The lifted free energy `ψ(p, q, c, γ, γ^(p); α)`.
//!
//! `ψ = ½ Σₖ (pₖ₋₁qₖ₋₁ - pₖqₖ) cₖ - I_sph + I_net`, summed over `k = 2..=r`
//! with the conventions `p₁ = q₁ = 1`, `p_{r+1} = q_{r+1} = 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationSpec;
use crate::error::{Error, Result};
use crate::overlap::{effective_coeffs, OverlapCurve};
use crate::quadrature::{CompensatedSum, QuadratureGrid};
use crate::special::{ln_add_exp, ln_erfc};

/// Deepest lifting level the nested net term supports.
pub const MAX_LEVEL: usize = 4;

/// Parameters of one lifting level.
///
/// `p`, `q` and `c` hold the free entries `x₂..x_r`; the fixed endpoints
/// (`p₁ = q₁ = 1`, `p_{r+1} = q_{r+1} = 0`) are implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftParams {
    pub r: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub c: Vec<f64>,
    pub gamma_sq: f64,
    pub gamma_sq_p: f64,
}

impl LiftParams {
    pub fn new(
        r: usize,
        p: Vec<f64>,
        q: Vec<f64>,
        c: Vec<f64>,
        gamma_sq: f64,
        gamma_sq_p: f64,
    ) -> Result<Self> {
        let params = LiftParams {
            r,
            p,
            q,
            c,
            gamma_sq,
            gamma_sq_p,
        };
        params.check_shape()?;
        Ok(params)
    }

    pub fn level1(gamma_sq: f64, gamma_sq_p: f64) -> Self {
        LiftParams {
            r: 1,
            p: vec![],
            q: vec![],
            c: vec![],
            gamma_sq,
            gamma_sq_p,
        }
    }

    fn check_shape(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidLevel("r = 0".into()));
        }
        let n = self.r - 1;
        if self.p.len() != n || self.q.len() != n || self.c.len() != n {
            return Err(Error::InvalidLevel(format!(
                "r = {} needs {n} entries in p, q and c (got {}, {}, {})",
                self.r,
                self.p.len(),
                self.q.len(),
                self.c.len()
            )));
        }
        Ok(())
    }

    /// `[1, p₂, …, p_r, 0]`.
    pub fn p_full(&self) -> Vec<f64> {
        with_endpoints(&self.p)
    }

    /// `[1, q₂, …, q_r, 0]`.
    pub fn q_full(&self) -> Vec<f64> {
        with_endpoints(&self.q)
    }

    /// Shape, ordering, sign and finiteness checks; the `Θ > 0` condition is
    /// enforced by [`sphere_term`].
    pub fn check_admissible(&self) -> Result<()> {
        self.check_shape()?;
        let all = self
            .p
            .iter()
            .chain(&self.q)
            .chain(&self.c)
            .chain([&self.gamma_sq, &self.gamma_sq_p]);
        if all.clone().any(|x| !x.is_finite()) {
            return Err(Error::Inadmissible(format!(
                "non-finite parameter in {self:?}"
            )));
        }
        if !(self.gamma_sq > 0.0 && self.gamma_sq_p > 0.0) {
            return Err(Error::Inadmissible(format!(
                "γ = {}, γ^(p) = {} must be positive",
                self.gamma_sq, self.gamma_sq_p
            )));
        }
        for (name, v) in [("p", self.p_full()), ("q", self.q_full())] {
            if v.windows(2).any(|w| !(w[0] >= w[1])) {
                return Err(Error::Inadmissible(format!(
                    "{name} not in [0, 1] descending: {v:?}"
                )));
            }
        }
        if self.c.iter().any(|&c| c < 0.0) {
            return Err(Error::Inadmissible(format!("negative c: {:?}", self.c)));
        }
        Ok(())
    }
}

fn with_endpoints(inner: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(inner.len() + 2);
    v.push(1.0);
    v.extend_from_slice(inner);
    v.push(0.0);
    v
}

/// Inputs of the closed-form innermost integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FztInputs {
    pub h_eff: f64,
    pub b: f64,
    pub c: f64,
    pub gap: f64,
}

impl FztInputs {
    /// Inputs for field `√gap · g + c`, with `h_eff = -c/√gap`.
    pub fn from_field(b: f64, c: f64, gap: f64) -> Self {
        FztInputs {
            h_eff: -c / gap.sqrt(),
            b,
            c,
            gap,
        }
    }
}

/// `f_zt = E_g exp(-B max(√gap g + C, 0)²) = f_zd + f_zu`.
pub fn fzt_kernel(inp: &FztInputs) -> f64 {
    ln_fzt(inp.h_eff, inp.b, inp.c, inp.gap).exp()
}

/// `ln f_zt`, finite wherever `f_zt` underflows.
#[inline]
pub fn ln_fzt(h_eff: f64, b: f64, c: f64, gap: f64) -> f64 {
    if b == 0.0 {
        return 0.0;
    }
    if gap == 0.0 {
        return -b * c.max(0.0).powi(2);
    }
    let a = 2.0 * gap * b + 1.0;
    let ln_zd = -b * c * c / a - (2.0 * a.sqrt()).ln() + ln_erfc(h_eff / (2.0 * a).sqrt());
    let ln_zu = -std::f64::consts::LN_2 + ln_erfc(-h_eff / std::f64::consts::SQRT_2);
    ln_add_exp(ln_zd, ln_zu)
}

/// `½ Σₖ (pₖ₋₁qₖ₋₁ - pₖqₖ) cₖ`.
pub fn coupling_term(params: &LiftParams) -> f64 {
    let (p, q) = (params.p_full(), params.q_full());
    (2..=params.r)
        .map(|k| 0.5 * (p[k - 2] * q[k - 2] - p[k - 1] * q[k - 1]) * params.c[k - 2])
        .sum()
}

/// `I_sph = γ^(p) - Σₖ (1/(2cₖ)) ln(Θₖ/Θₖ₋₁) + q_r/(2Θ_r)` with
/// `Θ₁ = 2γ^(p)`, `Θₖ = Θₖ₋₁ - cₖ(qₖ₋₁ - qₖ)`.
pub fn sphere_term(params: &LiftParams) -> Result<f64> {
    let q = params.q_full();
    let gp = params.gamma_sq_p;
    let mut theta = 2.0 * gp;
    if !(theta > 0.0) {
        return Err(Error::Inadmissible(format!("Θ₁ = {theta}")));
    }
    let mut value = gp;
    for k in 2..=params.r {
        let ck = params.c[k - 2];
        let dq = q[k - 2] - q[k - 1];
        let next = theta - ck * dq;
        if !(next > 0.0) {
            return Err(Error::Inadmissible(format!("Θ{k} = {next}")));
        }
        value -= if ck == 0.0 {
            -dq / (2.0 * theta)
        } else {
            (-ck * dq / theta).ln_1p() / (2.0 * ck)
        };
        theta = next;
    }
    Ok(value + q[params.r - 1] / (2.0 * theta))
}

/// `I_net = γ - (α/c_r) E log(E(… E f_zt^{c₃/c₂} …)^{c_r/c_{r-1}})`.
///
/// The innermost Gaussian is integrated in closed form by [`ln_fzt`]; the
/// remaining `r - 1` are nested quadratures over `grid`.
pub fn net_term(
    params: &LiftParams,
    curve: &OverlapCurve,
    alpha: f64,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let r = params.r;
    if r > MAX_LEVEL {
        return Err(Error::InvalidLevel(format!(
            "net term supports r ≤ {MAX_LEVEL}, got {r}"
        )));
    }
    let gamma = params.gamma_sq;
    if !(gamma > 0.0) {
        return Err(Error::Inadmissible(format!("γ = {gamma}")));
    }
    if r == 1 {
        let z = 0.5 * (curve.pbar_top() - curve.pbar_bottom());
        return Ok(gamma + alpha * z / (4.0 * gamma));
    }
    let coeffs = effective_coeffs(curve, &params.p_full())?;
    let c = &params.c;
    if c.contains(&0.0) {
        if r == 2 {
            // c₂ → 0: log E e^{-c₂ z} / c₂ → -E z with E max(field, 0)² = var/2.
            let z = 0.5 * coeffs.total_variance();
            return Ok(gamma + alpha * z / (4.0 * gamma));
        }
        return Err(Error::Inadmissible(format!(
            "c must be positive for r = {r}: {c:?}"
        )));
    }
    let b2 = coeffs.bbar[0];
    let ctx = NetContext {
        b: c[0] / (4.0 * gamma),
        b2,
        gap: b2 * b2,
        outer: &coeffs.bbar[1..],
        ratios: c.windows(2).map(|w| w[1] / w[0]).collect(),
        grid,
    };
    let inner = ctx.final_mean()?;
    Ok(gamma - alpha / c[r - 2] * inner)
}

struct NetContext<'a> {
    b: f64,
    b2: f64,
    gap: f64,
    // b̄₃..b̄_{r+1}, innermost first.
    outer: &'a [f64],
    // c₃/c₂, …, c_r/c_{r-1}.
    ratios: Vec<f64>,
    grid: &'a QuadratureGrid,
}

impl NetContext<'_> {
    fn ln_kernel(&self, c: f64) -> f64 {
        let h = if self.b2 > 0.0 { -c / self.b2 } else { 0.0 };
        ln_fzt(h, self.b, c, self.gap)
    }

    /// `Λ_j(C) = ln E_v exp(ρ_j Λ_{j-1}(C + b̄ v))`, `Λ₀ = ln f_zt`.
    fn lambda(&self, j: usize, c: f64) -> Result<f64> {
        if j == 0 {
            return Ok(self.ln_kernel(c));
        }
        let rho = self.ratios[j - 1];
        let coef = self.outer[j - 1];
        let mut terms = Vec::with_capacity(self.grid.order());
        let mut top = f64::NEG_INFINITY;
        for (v, w) in self.grid.iter() {
            let t = rho * self.lambda(j - 1, c + coef * v)?;
            top = top.max(t);
            terms.push((w, t));
        }
        if !top.is_finite() {
            return Err(Error::ReducerDomain(format!(
                "log of non-positive inner mean at level {j} (C = {c})"
            )));
        }
        let sum: CompensatedSum = terms.iter().map(|&(w, t)| w * (t - top).exp()).collect();
        let mean = sum.value();
        if !(mean > 0.0) {
            return Err(Error::ReducerDomain(format!(
                "inner mean {mean} at level {j}"
            )));
        }
        Ok(top + mean.ln())
    }

    fn final_mean(&self) -> Result<f64> {
        let depth = self.outer.len();
        let coef = self.outer[depth - 1];
        let eval = |v: f64| self.lambda(depth - 1, coef * v);
        // Nested levels are evaluated in parallel; the sum stays in node order.
        let values: Vec<Result<f64>> = if depth >= 2 {
            self.grid.nodes().par_iter().map(|&v| eval(v)).collect()
        } else {
            self.grid.nodes().iter().map(|&v| eval(v)).collect()
        };
        let mut acc = CompensatedSum::new();
        for ((v, w), l) in self.grid.iter().zip(values) {
            let l = l?;
            if !l.is_finite() {
                return Err(Error::NonFinite { node: v, value: l });
            }
            acc.add(w * l);
        }
        Ok(acc.value())
    }
}

/// Full free energy at `α`.
pub fn psi(
    params: &LiftParams,
    alpha: f64,
    curve: &OverlapCurve,
    grid: &QuadratureGrid,
) -> Result<f64> {
    params.check_admissible()?;
    let sph = sphere_term(params)?;
    let net = net_term(params, curve, alpha, grid)?;
    let value = coupling_term(params) - sph + net;
    if !value.is_finite() {
        return Err(Error::NonFinite { node: alpha, value });
    }
    Ok(value)
}

/// `z∞ = (m2 - m1²) / (2 dm2)`, the wide-limit mean of the first-level
/// projection value.
pub fn z_infinity(act: &ActivationSpec, grid: &QuadratureGrid) -> Result<f64> {
    let m = act.moments(grid)?;
    if !(m.dm2 > 0.0) {
        return Err(Error::DegenerateActivation(m.dm2));
    }
    Ok(m.variance() / (2.0 * m.dm2))
}

/// Level-1 free energy at its optimal multipliers: `-1 + √(α z∞)`.
pub fn psi_level1(alpha: f64, act: &ActivationSpec, grid: &QuadratureGrid) -> Result<f64> {
    Ok(-1.0 + (alpha * z_infinity(act, grid)?).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{expect1_kinked, gauss_hermite};
    use std::f64::consts::PI;

    fn relu_curve() -> (OverlapCurve, QuadratureGrid) {
        let g = gauss_hermite(120).unwrap();
        (OverlapCurve::new(&ActivationSpec::relu(), &g).unwrap(), g)
    }

    #[test]
    fn fzt_examples() {
        for h in [-3.0, 0.0, 2.5] {
            assert_eq!(
                fzt_kernel(&FztInputs {
                    h_eff: h,
                    b: 0.0,
                    c: -h,
                    gap: 1.0
                }),
                1.0
            );
        }
        let gap = 1.0 - 1.0 / PI;
        let v = fzt_kernel(&FztInputs::from_field(1.0, 0.0, gap));
        let exact = 0.5 + 1.0 / (2.0 * (2.0 * gap + 1.0).sqrt());
        assert!((v - exact).abs() < 1e-15);
        let oracle = expect1_kinked(|g| (-(gap.sqrt() * g).max(0.0).powi(2)).exp(), 0.0, 200);
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn fzt_tail_limits() {
        // Field far below zero: everything sits in the up branch.
        let low = FztInputs::from_field(2.0, -40.0, 1.0);
        assert!((fzt_kernel(&low) - 1.0).abs() < 1e-15);
        // Field far above zero: the kernel follows exp(-B C²/a)/√a.
        let (b, c, gap): (f64, f64, f64) = (0.5, 30.0, 1.0);
        let a = 2.0 * gap * b + 1.0;
        let ln = ln_fzt(-c / gap.sqrt(), b, c, gap);
        assert!((ln - (-b * c * c / a - 0.5 * a.ln())).abs() < 1e-9);
        assert!(ln_fzt(-1e3, 10.0, 1e3, 1.0).is_finite());
    }

    #[test]
    fn sphere_term_examples() {
        let lim =
            sphere_term(&LiftParams::new(2, vec![0.0], vec![0.0], vec![0.0], 1.0, 0.8).unwrap())
                .unwrap();
        assert!((lim - (0.8 + 1.0 / 3.2)).abs() < 1e-15);
        let tiny =
            sphere_term(&LiftParams::new(2, vec![0.0], vec![0.0], vec![1e-9], 1.0, 0.8).unwrap())
                .unwrap();
        assert!((tiny - lim).abs() < 1e-8);
        let table =
            LiftParams::new(2, vec![0.7571], vec![0.3822], vec![4.6457], 0.1396, 1.7903).unwrap();
        let v = sphere_term(&table).unwrap();
        assert!(v.is_finite() && v > 0.0);
        let flat =
            LiftParams::new(3, vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0], 1.0, 0.9).unwrap();
        let q_one =
            LiftParams::new(3, vec![0.5, 0.2], vec![1.0, 1.0], vec![2.0, 1.0], 1.0, 0.9).unwrap();
        assert!((sphere_term(&q_one).unwrap() - (0.9 + 1.0 / 3.6)).abs() < 1e-15);
        assert!((sphere_term(&flat).unwrap() - (0.9 + 1.0 / 3.6)).abs() < 1e-15);
    }

    #[test]
    fn sphere_term_matches_explicit_level_two_expression() {
        for (gp, q2, c2) in [(1.7903, 0.3822, 4.6457), (0.9, 0.1, 0.5), (2.5, 0.75, 12.0)] {
            let params = LiftParams::new(2, vec![0.5], vec![q2], vec![c2], 1.0, gp).unwrap();
            let th2 = 2.0 * gp - c2 * (1.0 - q2);
            let explicit = gp - (1.0 / (2.0 * c2)) * (th2 / (2.0 * gp)).ln() + q2 / (2.0 * th2);
            assert!((sphere_term(&params).unwrap() - explicit).abs() < 1e-12);
        }
    }

    #[test]
    fn inadmissible_theta_is_reported() {
        let params = LiftParams::new(2, vec![0.5], vec![0.2], vec![10.0], 1.0, 1.0).unwrap();
        assert!(matches!(sphere_term(&params), Err(Error::Inadmissible(_))));
        let params = LiftParams::new(2, vec![0.2], vec![0.5], vec![1.0], 1.0, 1.0).unwrap();
        let (curve, g) = relu_curve();
        assert!(psi(&params, 2.0, &curve, &g).is_ok());
        let unordered =
            LiftParams::new(3, vec![0.2, 0.5], vec![0.5, 0.2], vec![1.0, 1.0], 1.0, 1.0).unwrap();
        assert!(matches!(
            psi(&unordered, 2.0, &curve, &g),
            Err(Error::Inadmissible(_))
        ));
        assert!(LiftParams::new(2, vec![], vec![0.5], vec![1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn level_one_reductions() {
        let (curve, g) = relu_curve();
        let alpha = 2.5;
        let z = z_infinity(&ActivationSpec::relu(), &g).unwrap();
        assert!((z - (PI - 1.0) / (2.0 * PI)).abs() < 1e-15);
        let net = net_term(&LiftParams::level1(0.7, 0.5), &curve, alpha, &g).unwrap();
        assert!((net - (0.7 + alpha * z / 2.8)).abs() < 1e-14);

        let gamma = 0.5 * (alpha * z).sqrt();
        let at_opt = psi(&LiftParams::level1(gamma, 0.5), alpha, &curve, &g).unwrap();
        let closed = psi_level1(alpha, &ActivationSpec::relu(), &g).unwrap();
        assert!((at_opt - closed).abs() < 1e-12);

        let pinned = LiftParams::new(2, vec![0.0], vec![0.0], vec![0.0], gamma, 0.5).unwrap();
        assert!((psi(&pinned, alpha, &curve, &g).unwrap() - closed).abs() < 1e-12);
        let near = LiftParams::new(2, vec![0.0], vec![0.0], vec![1e-6], gamma, 0.5).unwrap();
        assert!((psi(&near, alpha, &curve, &g).unwrap() - closed).abs() < 1e-5);
    }

    #[test]
    fn level_one_capacity_zeros() {
        let g = gauss_hermite(40).unwrap();
        let relu_alpha = 2.0 * PI / (PI - 1.0);
        assert!(
            psi_level1(relu_alpha, &ActivationSpec::relu(), &g)
                .unwrap()
                .abs()
                < 1e-15
        );
        assert_eq!(
            psi_level1(4.0, &ActivationSpec::quadratic(), &g).unwrap(),
            0.0
        );
        for act in ActivationSpec::all_builtin() {
            assert!(psi_level1(1.0, &act, &g).unwrap() < 0.0);
        }
    }

    #[test]
    fn small_c2_is_first_order_close_to_level_one() {
        let (curve, g) = relu_curve();
        let (alpha, gamma, gp) = (2.7, 0.4, 0.6);
        let base = psi(
            &LiftParams::new(2, vec![0.0], vec![0.0], vec![0.0], gamma, gp).unwrap(),
            alpha,
            &curve,
            &g,
        )
        .unwrap();
        let gap_at = |eps: f64| {
            let p = LiftParams::new(2, vec![0.0], vec![0.0], vec![eps], gamma, gp).unwrap();
            (psi(&p, alpha, &curve, &g).unwrap() - base).abs()
        };
        let ratio = gap_at(1e-3) / gap_at(1e-4);
        assert!((ratio - 10.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn table_points_are_near_zero() {
        let (curve, g) = relu_curve();
        let partial =
            LiftParams::new(2, vec![0.0], vec![0.0], vec![0.8295], 0.3339, 0.7487).unwrap();
        assert!(psi(&partial, 2.8503, &curve, &g).unwrap().abs() < 2e-3);
        let full =
            LiftParams::new(2, vec![0.7571], vec![0.3822], vec![4.6457], 0.1396, 1.7903).unwrap();
        assert!(psi(&full, 2.6643, &curve, &g).unwrap().abs() < 2e-3);

        let g80 = gauss_hermite(80).unwrap();
        let tanh = OverlapCurve::new(&ActivationSpec::tanh(), &g80).unwrap();
        let third = LiftParams::new(
            3,
            vec![0.9660, 0.7685],
            vec![0.8479, 0.5682],
            vec![7.2524, 2.8276],
            0.1824,
            1.3731,
        )
        .unwrap();
        assert!(psi(&third, 2.3058, &tanh, &g80).unwrap().abs() < 5e-3);
    }

    #[test]
    fn level_four_is_supported_and_level_five_is_not() {
        let g = gauss_hermite(16).unwrap();
        let curve = OverlapCurve::new(&ActivationSpec::erf(), &g).unwrap();
        let four = LiftParams::new(
            4,
            vec![0.98, 0.9, 0.7],
            vec![0.9, 0.7, 0.5],
            vec![10.0, 5.0, 2.5],
            0.17,
            1.5,
        )
        .unwrap();
        assert!(psi(&four, 2.37, &curve, &g).unwrap().is_finite());
        let five = LiftParams::new(
            5,
            vec![0.99, 0.98, 0.9, 0.7],
            vec![0.95, 0.9, 0.7, 0.5],
            vec![20.0, 10.0, 5.0, 2.5],
            0.17,
            1.5,
        )
        .unwrap();
        assert!(matches!(
            net_term(&five, &curve, 2.37, &g),
            Err(Error::InvalidLevel(_))
        ));
    }
}
