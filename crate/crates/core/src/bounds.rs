//! Maximum allowable sampling interval (MASI) formulas.
//!
//! Four families of bounds live here:
//!
//! * the generic two-function impulsive bound `τ̂(q̂) = −ln q̂ / (α₂α̃₁/(α₁q̂) + α̃₂)`
//!   together with its maximizer `q̂*`;
//! * the single quadratic Lyapunov function emulation bound, where the free
//!   weights `b₁, b₂` are eliminated in closed form by the stationarity
//!   conditions and `q*` is the root of a scalar transcendental equation
//!   (also available in the `r̄ = ᾱ√q` parameterization);
//! * the two-function emulation bound `τ̂(q) = −ᾱ²q ln q / (ᾱ_bγ₁ + γ₂ᾱ²q)`;
//! * the discrete-time-approximation bound, which maps an Euler–Maruyama
//!   design `(c̄, h, ᾱ_u)` onto the decay rate `2ᾱ = c̄/h + ᾱ_u h` and reuses
//!   the single-function bound.
//!
//! Every `tau_max` is a strict upper bound: a sampling schedule is certified
//! only if its largest gap is strictly smaller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{find_root, Bracket, ROOT_TOL};

/// Lowest `ln q` searched for roots on `(0, e⁻¹)`.
const LN_Q_FLOOR: f64 = -700.0;

/// Scalar constants of the generic two-function stability conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainConstants {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alphat1: f64,
    pub alphat2: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: f64,
    #[serde(default)]
    pub beta3: f64,
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_p() -> f64 {
    2.0
}

impl GainConstants {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("alpha1", self.alpha1, true),
            ("alpha2", self.alpha2, false),
            ("alphat1", self.alphat1, false),
            ("alphat2", self.alphat2, true),
            ("beta1", self.beta1, false),
            ("beta2", self.beta2, false),
            ("beta3", self.beta3, false),
            ("p", self.p, true),
        ];
        for (name, v, strict) in checks {
            let bad = !v.is_finite() || if strict { v <= 0.0 } else { v < 0.0 };
            if bad {
                let need = if strict { "> 0" } else { ">= 0" };
                return Err(Error::validation(name, format!("must be finite and {need}, got {v}")));
            }
        }
        Ok(())
    }
}

/// Constants of the single-function emulation bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulationConstants {
    pub alpha_bar: f64,
    pub alpha_b: f64,
    pub alpha_f: f64,
}

/// Constants of the two-function emulation bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoFunctionConstants {
    pub alpha_bar: f64,
    pub alpha_b: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

fn require_positive(fields: &[(&str, f64)]) -> Result<()> {
    for &(name, v) in fields {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::validation(name, format!("must be finite and > 0, got {v}")));
        }
    }
    Ok(())
}

impl EmulationConstants {
    pub fn validate(&self) -> Result<()> {
        require_positive(&[
            ("alpha_bar", self.alpha_bar),
            ("alpha_b", self.alpha_b),
            ("alpha_f", self.alpha_f),
        ])
    }
}

impl TwoFunctionConstants {
    pub fn validate(&self) -> Result<()> {
        require_positive(&[
            ("alpha_bar", self.alpha_bar),
            ("alpha_b", self.alpha_b),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ])
    }
}

/// Which bound produced a [`SamplingBoundResult`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Generic,
    /// Generic bound with `α₂α̃₁ = 0`: the denominator is `α̃₂` alone.
    GenericIssFree,
    SingleLyapunov,
    SingleLyapunovRate,
    TwoLyapunov,
    DiscreteApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingBoundResult {
    pub kind: BoundKind,
    pub q_star: f64,
    pub tau_max: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b1_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b2_star: Option<f64>,
    /// Lower end `q̂₀` of the admissible interval for the generic bound.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q_hat0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_star: Option<f64>,
    /// Decay rate used, when it was derived rather than given.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_bar: Option<f64>,
}

impl SamplingBoundResult {
    fn new(kind: BoundKind, q_star: f64, tau_max: f64) -> Self {
        SamplingBoundResult {
            kind,
            q_star,
            tau_max,
            b1_star: None,
            b2_star: None,
            q_hat0: None,
            r_star: None,
            alpha_bar: None,
        }
    }
}

fn check_unit_open(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::domain(format!("q must lie in (0, 1), got {q}")));
    }
    Ok(())
}

/// Solves `f(ln q) = 0` for `ln q` in `[lo, hi]`.
fn solve_log(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Result<f64> {
    let br = Bracket::new(&f, lo, hi)?;
    find_root(&f, br, ROOT_TOL)
}

// ---------------------------------------------------------------------------
// generic bound

/// `τ̂(q̂) = −ln q̂ / (α₂α̃₁/(α₁q̂) + α̃₂)`.
pub fn htau_generic(q: f64, g: &GainConstants) -> Result<f64> {
    check_unit_open(q)?;
    let denom = g.alpha2 * g.alphat1 / (g.alpha1 * q) + g.alphat2;
    Ok(-q.ln() / denom)
}

/// Value of `α₂β̃₁/α₁ + β̃₂ + β̃₃` and whether it is usable (`< 1`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionIii {
    pub value: f64,
    pub ok: bool,
    /// `value == 0`: the jump resets the cyber state exactly, as in
    /// sampled-data loops, so the sum may be taken arbitrarily small.
    pub degenerate: bool,
}

pub fn check_condition_iii(g: &GainConstants) -> ConditionIii {
    let value = g.alpha2 * g.beta1 / g.alpha1 + g.beta2 + g.beta3;
    ConditionIii {
        value,
        ok: value < 1.0,
        degenerate: value == 0.0,
    }
}

/// Derivative factor `τ′(q̂) = k(1 + ln q̂) + q̂` with `k = α₂α̃₁/(α₁α̃₂)`.
pub fn generic_stationarity(q: f64, g: &GainConstants) -> f64 {
    let k = g.alpha2 * g.alphat1 / (g.alpha1 * g.alphat2);
    k * (1.0 + q.ln()) + q
}

/// Maximizes the generic bound over the admissible interval `(q̂₀, 1)`.
///
/// When `α₂α̃₁ = 0` the bound `−ln q̂/α̃₂` is decreasing in `q̂`; its supremum
/// is attained at `q̂₀` if that is positive, and otherwise the caller has to
/// pick `q̂` (`q_fallback`).
pub fn solve_qhat_star(g: &GainConstants, q_fallback: Option<f64>) -> Result<SamplingBoundResult> {
    g.validate()?;
    let cond = check_condition_iii(g);
    if !cond.ok {
        return Err(Error::Infeasible(format!(
            "jump-contraction sum α₂β̃₁/α₁ + β̃₂ + β̃₃ = {} is not below 1",
            cond.value
        )));
    }
    let coupling = g.alpha2 * g.alphat1;
    if coupling == 0.0 {
        let q = match (cond.value > 0.0, q_fallback) {
            (_, Some(q)) => {
                check_unit_open(q)?;
                if q <= cond.value {
                    return Err(Error::domain(format!(
                        "q = {q} is not above the admissible lower end {}",
                        cond.value
                    )));
                }
                q
            }
            (true, None) => cond.value,
            (false, None) => {
                return Err(Error::domain(
                    "bound is unbounded as q → 0 when α₂α̃₁ = 0 and β̃ = 0; supply q",
                ))
            }
        };
        let mut r = SamplingBoundResult::new(BoundKind::GenericIssFree, q, -q.ln() / g.alphat2);
        r.q_hat0 = Some(cond.value);
        return Ok(r);
    }
    let k = coupling / (g.alpha1 * g.alphat2);
    let ln_lo = -(1.0 + 1.0 / k);
    let ln_q = solve_log(|u| k * (1.0 + u) + u.exp(), ln_lo, 0.0)?;
    let q_star = ln_q.exp();
    let q_hat0 = cond.value.max(ln_lo.exp());
    let q = q_star.max(q_hat0);
    let mut r = SamplingBoundResult::new(BoundKind::Generic, q, htau_generic(q, g)?);
    r.q_hat0 = Some(q_hat0);
    Ok(r)
}

// ---------------------------------------------------------------------------
// single Lyapunov function emulation bound

/// Objective `τ̄(q, b₁, b₂)` before the weights are optimized.
pub fn btau_single(q: f64, b1: f64, b2: f64, c: &EmulationConstants) -> f64 {
    let EmulationConstants {
        alpha_bar: a,
        alpha_b: ab,
        alpha_f: af,
    } = *c;
    let num = -a * a * q * q.ln();
    let den = (2.0 * ab.sqrt() + b1 + (b1 + a) * b2) * a * a * q + ab * (b1 + af / b1 + (b1 + a) / b2);
    num / den
}

/// Stationarity function whose root on `(0, e⁻¹)` is `q*`.
pub fn single_stationarity(q: f64, c: &EmulationConstants) -> f64 {
    single_stationarity_ln(q.ln(), c)
}

fn single_stationarity_ln(ln_q: f64, c: &EmulationConstants) -> f64 {
    let a = c.alpha_bar;
    let saf = c.alpha_f.sqrt();
    let s = a * (0.5 * ln_q).exp();
    2.0 * s * s + (a + saf) * s + ((a + saf) * s + 2.0 * (c.alpha_b * c.alpha_f).sqrt()) * (ln_q + 1.0)
}

/// Optimal weights `(b₁*, b₂*)` for a given `q`.
pub fn single_optimal_weights(q: f64, c: &EmulationConstants) -> (f64, f64) {
    let s = c.alpha_bar * q.sqrt();
    let sab = c.alpha_b.sqrt();
    ((c.alpha_b * c.alpha_f).sqrt() / (s + sab), sab / s)
}

/// `τ̂(q)` with the weights frozen at their optimum for `q*`.
pub fn htau_single(q: f64, q_star: f64, c: &EmulationConstants) -> Result<f64> {
    check_unit_open(q)?;
    let a = c.alpha_bar;
    let saf = c.alpha_f.sqrt();
    let s = a * q.sqrt();
    let ss = a * q_star.sqrt();
    let num = -ss * s * s * q.ln();
    let den = c.alpha_b.sqrt()
        * ((2.0 * ss + a + saf) * s * s + (a + saf) * ss * ss + 2.0 * (c.alpha_b * c.alpha_f).sqrt() * ss);
    Ok(num / den)
}

pub fn emulation_bound_single(c: &EmulationConstants) -> Result<SamplingBoundResult> {
    c.validate()?;
    let ln_q = solve_log(|u| single_stationarity_ln(u, c), LN_Q_FLOOR, -1.0)?;
    let q_star = ln_q.exp();
    let (b1, b2) = single_optimal_weights(q_star, c);
    let mut r = SamplingBoundResult::new(BoundKind::SingleLyapunov, q_star, btau_single(q_star, b1, b2, c));
    r.b1_star = Some(b1);
    r.b2_star = Some(b2);
    r.r_star = Some(c.alpha_bar * q_star.sqrt());
    Ok(r)
}

/// Stationarity function in the rate variable `r̄ = ᾱ√q`.
pub fn rate_stationarity(r: f64, c: &EmulationConstants) -> f64 {
    let a = c.alpha_bar;
    let saf = c.alpha_f.sqrt();
    2.0 * r * r
        + (a + saf) * r
        + 2.0 * ((a + saf) * r + 2.0 * (c.alpha_b * c.alpha_f).sqrt()) * (r.ln() - (a.ln() - 0.5))
}

/// `τ̂(r̄)` in the rate parameterization.
pub fn htau_rate(r: f64, r_star: f64, c: &EmulationConstants) -> f64 {
    let a = c.alpha_bar;
    let saf = c.alpha_f.sqrt();
    let num = -2.0 * r_star * r * r * (r.ln() - a.ln());
    let den = c.alpha_b.sqrt()
        * ((2.0 * r_star + a + saf) * r * r
            + (a + saf) * r_star * r_star
            + 2.0 * (c.alpha_b * c.alpha_f).sqrt() * r_star);
    num / den
}

/// Same bound as [`emulation_bound_single`], solved directly for `r̄*`.
pub fn emulation_bound_single_rate_form(c: &EmulationConstants) -> Result<SamplingBoundResult> {
    c.validate()?;
    // root in ln r̄ on (−∞, ln(ᾱ/√e))
    let ln_hi = c.alpha_bar.ln() - 0.5;
    let ln_r = solve_log(|v| rate_stationarity(v.exp(), c), ln_hi + 0.5 * LN_Q_FLOOR, ln_hi)?;
    let r_star = ln_r.exp();
    let q_star = (r_star / c.alpha_bar).powi(2);
    let (b1, b2) = single_optimal_weights(q_star, c);
    let mut r = SamplingBoundResult::new(BoundKind::SingleLyapunovRate, q_star, htau_rate(r_star, r_star, c));
    r.r_star = Some(r_star);
    r.b1_star = Some(b1);
    r.b2_star = Some(b2);
    Ok(r)
}

// ---------------------------------------------------------------------------
// two Lyapunov functions

pub fn htau_two(q: f64, c: &TwoFunctionConstants) -> Result<f64> {
    check_unit_open(q)?;
    let a2 = c.alpha_bar * c.alpha_bar;
    Ok(-a2 * q * q.ln() / (c.alpha_b * c.gamma1 + c.gamma2 * a2 * q))
}

pub fn two_stationarity(q: f64, c: &TwoFunctionConstants) -> f64 {
    c.alpha_bar * c.alpha_bar * c.gamma2 * q + c.alpha_b * c.gamma1 * (q.ln() + 1.0)
}

pub fn emulation_bound_two(c: &TwoFunctionConstants) -> Result<SamplingBoundResult> {
    c.validate()?;
    let a2g2 = c.alpha_bar * c.alpha_bar * c.gamma2;
    let bg = c.alpha_b * c.gamma1;
    let ln_q = solve_log(|u| a2g2 * u.exp() + bg * (u + 1.0), LN_Q_FLOOR, -1.0)?;
    let q_star = ln_q.exp();
    Ok(SamplingBoundResult::new(BoundKind::TwoLyapunov, q_star, htau_two(q_star, c)?))
}

// ---------------------------------------------------------------------------
// discrete-time approximation

fn check_dta_inputs(c_bar: f64, h: f64, alpha_u: f64) -> Result<()> {
    if !(c_bar > 0.0 && c_bar < 1.0) {
        return Err(Error::domain(format!("c̄ must lie in (0, 1), got {c_bar}")));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::domain(format!("step size must be positive, got {h}")));
    }
    if !(alpha_u > 0.0 && alpha_u.is_finite()) {
        return Err(Error::domain(format!("α_u must be positive, got {alpha_u}")));
    }
    Ok(())
}

/// Decay rate `ᾱ = (c̄/h + ᾱ_u h)/2` of the continuous design equivalent to
/// an Euler–Maruyama design with contraction `1 − c̄` at step `h`.
///
/// The step must lie strictly inside `(0, (2ᾱ/ᾱ_u) ∧ (2ᾱ)⁻¹)`.
pub fn dta_map(c_bar: f64, h: f64, alpha_u: f64) -> Result<f64> {
    check_dta_inputs(c_bar, h, alpha_u)?;
    let alpha_bar = 0.5 * (c_bar / h + alpha_u * h);
    // h < 1/(2ᾱ)  ⇔  c̄ + ᾱ_u h² < 1; h < 2ᾱ/ᾱ_u holds automatically
    if !(c_bar + alpha_u * h * h < 1.0) {
        return Err(Error::domain(format!(
            "step size {h} is not strictly below 1/(2ᾱ) = {}",
            0.5 / alpha_bar
        )));
    }
    Ok(alpha_bar)
}

/// Inverse direction: the contraction `c̄ = (2ᾱ − ᾱ_u h)h` an Euler–Maruyama
/// model inherits from a continuous design with rate `ᾱ` at step `h`.
pub fn dta_contraction(alpha_bar: f64, alpha_u: f64, h: f64) -> Result<f64> {
    require_positive(&[("alpha_bar", alpha_bar), ("alpha_u", alpha_u), ("h", h)])?;
    let h_max = (2.0 * alpha_bar / alpha_u).min(0.5 / alpha_bar);
    if !(h < h_max) {
        return Err(Error::domain(format!("step size {h} is not strictly below {h_max}")));
    }
    Ok((2.0 * alpha_bar - alpha_u * h) * h)
}

pub fn dta_bound(c_bar: f64, h: f64, alpha_u: f64, alpha_b: f64, alpha_f: f64) -> Result<SamplingBoundResult> {
    let alpha_bar = dta_map(c_bar, h, alpha_u)?;
    let mut r = emulation_bound_single_rate_form(&EmulationConstants {
        alpha_bar,
        alpha_b,
        alpha_f,
    })?;
    r.kind = BoundKind::DiscreteApprox;
    r.alpha_bar = Some(alpha_bar);
    Ok(r)
}

// ---------------------------------------------------------------------------
// tagged input, used by the CLI and reports

/// Constants for any of the bounds, tagged by kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundInput {
    Generic {
        #[serde(flatten)]
        constants: GainConstants,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<f64>,
    },
    SingleV(EmulationConstants),
    TwoV(TwoFunctionConstants),
    Dta {
        c_bar: f64,
        h: f64,
        alpha_u: f64,
        alpha_b: f64,
        alpha_f: f64,
    },
}

impl BoundInput {
    pub fn evaluate(&self) -> Result<SamplingBoundResult> {
        match self {
            BoundInput::Generic { constants, q } => {
                // an explicit q̂ is evaluated as given once it is admissible
                match q {
                    Some(q) if constants.alpha2 * constants.alphat1 > 0.0 => {
                        let mut r = solve_qhat_star(constants, None)?;
                        let lo = r.q_hat0.unwrap_or(0.0);
                        if *q <= lo {
                            return Err(Error::domain(format!("q = {q} is not above q̂₀ = {lo}")));
                        }
                        r.q_star = *q;
                        r.tau_max = htau_generic(*q, constants)?;
                        Ok(r)
                    }
                    _ => solve_qhat_star(constants, *q),
                }
            }
            BoundInput::SingleV(c) => emulation_bound_single(c),
            BoundInput::TwoV(c) => emulation_bound_two(c),
            BoundInput::Dta {
                c_bar,
                h,
                alpha_u,
                alpha_b,
                alpha_f,
            } => dta_bound(*c_bar, *h, *alpha_u, *alpha_b, *alpha_f),
        }
    }

    /// Admissible `q` interval of the curve `τ̂(q)`.
    fn q_interval(&self) -> Result<(f64, f64)> {
        Ok(match self {
            BoundInput::Generic { constants, q } => {
                let r = solve_qhat_star(constants, *q)?;
                (r.q_hat0.unwrap_or(0.0), 1.0)
            }
            _ => (0.0, 1.0),
        })
    }

    /// `n` samples `(q, τ̂(q))` evenly spaced over the open admissible interval.
    pub fn curve(&self, n: usize) -> Result<Vec<(f64, f64)>> {
        let (lo, hi) = self.q_interval()?;
        let best = self.evaluate()?;
        (0..n)
            .map(|i| {
                let q = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
                let t = match self {
                    BoundInput::Generic { constants, .. } => htau_generic(q, constants)?,
                    BoundInput::SingleV(c) => htau_single(q, best.q_star, c)?,
                    BoundInput::TwoV(c) => htau_two(q, c)?,
                    BoundInput::Dta { alpha_b, alpha_f, .. } => {
                        let c = EmulationConstants {
                            alpha_bar: best.alpha_bar.unwrap_or(f64::NAN),
                            alpha_b: *alpha_b,
                            alpha_f: *alpha_f,
                        };
                        htau_single(q, best.q_star, &c)?
                    }
                };
                Ok((q, t))
            })
            .collect()
    }
}
