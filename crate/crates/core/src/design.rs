//! Constant extraction and state-feedback synthesis.
//!
//! Synthesis for linear plants follows four steps: the largest achievable
//! decay rate from a generalized eigenvalue problem in `(Q, Y)`, a
//! Lyapunov–Itô solve at a fraction of that rate, the least `ᾱ_b`, and a
//! `(γ₁, γ₂)` pair chosen to maximize the resulting sampling bound. A local
//! search over `(K̂, P)` at the same rate then improves the bound, and the
//! best design over a ladder of rate fractions is kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    emulation_bound_single, emulation_bound_two, EmulationConstants, SamplingBoundResult, TwoFunctionConstants,
};
use crate::error::{Error, Result};
use crate::lmi::{
    all_pass, block_matrix, minimize_gevp, solve_feasibility_with, sym_from_vars, sym_to_vars, verify_design_lmis,
    verify_planar_lmis, verify_lyapunov_ito, verify_two_function, AffineMatrixMap, CertificateKind, GevpOptions,
    LmiCertificate, LmiMargin, SolveStatus, SolverOptions, Tolerance,
};
use crate::models::{LinearSampledModel, Model, NonlinearPlanarModel};
use crate::numerics::{lambda_max, lambda_min, nelder_mead, pencil_max_eig, rows_serde, spd_inverse, Mat, SymMatrix};

/// Smallest `γ` considered, and the upper end of the scan box.
const GAMMA_FLOOR: f64 = 1e-4;
const GAMMA_CEIL: f64 = 1e6;
/// Relative back-off that turns boundary values into strict inequalities.
const BACKOFF: f64 = 1e-6;

// ---------------------------------------------------------------------------
// constants

/// Least `ᾱ_b` with `B̄ᵀPB̄ ⪯ ᾱ_bP̃`.
pub fn extract_alpha_b(p: &SymMatrix, p_tilde: &SymMatrix, b_bar: &Mat) -> Result<f64> {
    pencil_max_eig(&p.congruence(b_bar), p_tilde)
}

/// Least `ᾱ_f` with `(F + ᾱI)ᵀP(F + ᾱI) ⪯ ᾱ_fP`.
pub fn extract_alpha_f(p: &SymMatrix, f: &Mat, alpha_bar: f64) -> Result<f64> {
    let n = p.order();
    pencil_max_eig(&p.congruence(&(f + Mat::identity(n, n) * alpha_bar)), p)
}

/// Least `ᾱ_u` with `FᵀPF ⪯ ᾱ_uP`.
pub fn extract_alpha_u(p: &SymMatrix, f: &Mat) -> Result<f64> {
    pencil_max_eig(&p.congruence(f), p)
}

/// Largest `ᾱ` with `FᵀP + PF + ΣGⱼᵀPGⱼ ⪯ −2ᾱP` (may be negative).
pub fn max_decay_rate(p: &SymMatrix, f: &Mat, g: &[Mat]) -> Result<f64> {
    let pm = p.as_mat();
    let mut m = f.transpose() * pm + pm * f;
    for gj in g {
        m += gj.transpose() * pm * gj;
    }
    Ok(-0.5 * pencil_max_eig(&SymMatrix::symmetrize(m), p)?)
}

// ---------------------------------------------------------------------------
// γ fitting

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum GammaStrategy {
    /// Maximize the two-function bound over the feasible `(γ₁, γ₂)` set.
    MaxBound,
    /// Fix `γ₂` and take the least feasible `γ₁`.
    FixedGamma2(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau_max: f64,
}

fn neg_def_inverse(m: &Mat) -> Result<Mat> {
    Ok(-spd_inverse(&SymMatrix::symmetrize(-m))?.into_mat())
}

/// Fits `γ₁, γ₂` for `[[S₁₁ − γ₁P, Cᵀ], [C, S₂₂ − γ₂P̃]] ⪯ 0`.
///
/// For `γ₂` above `λ_max(S₂₂, P̃)` the lower-right block is negative definite
/// and the least `γ₁` is `λ_max(S₁₁ − Cᵀ(S₂₂ − γ₂P̃)⁻¹C, P)`, so the search is
/// one-dimensional in `γ₂`.
#[allow(clippy::too_many_arguments)]
pub fn fit_gamma_blocks(
    s11: &Mat,
    coupling: &Mat,
    s22: &Mat,
    p: &SymMatrix,
    p_tilde: &SymMatrix,
    alpha_bar: f64,
    alpha_b: f64,
    strategy: GammaStrategy,
) -> Result<GammaFit> {
    let lo = pencil_max_eig(&SymMatrix::symmetrize(s22.clone()), p_tilde)?.max(0.0);
    let pt = p_tilde.as_mat();
    let p_min = lambda_min(p)?;
    let eval = |gamma2: f64| -> Option<GammaFit> {
        if !(gamma2 > lo && (GAMMA_FLOOR..=GAMMA_CEIL).contains(&gamma2)) {
            return None;
        }
        let m22 = s22 - pt * gamma2;
        let m22inv = neg_def_inverse(&m22).ok()?;
        let schur = s11 - coupling.transpose() * m22inv * coupling;
        let g1 = pencil_max_eig(&SymMatrix::symmetrize(schur), p).ok()?;
        let mut gamma1 = g1.max(GAMMA_FLOOR) * (1.0 + BACKOFF);
        // the Schur step loses accuracy when M₂₂ is nearly singular
        let scale = gamma1 * p.norm() + gamma2 * p_tilde.norm();
        let mut strict = false;
        for _ in 0..4 {
            let block = block_matrix(&[
                vec![s11 - p.as_mat() * gamma1, coupling.transpose()],
                vec![coupling.clone(), m22.clone()],
            ])
            .ok()?;
            let top = lambda_max(&SymMatrix::symmetrize(block)).ok()?;
            if top < -1e-12 * scale {
                strict = true;
                break;
            }
            gamma1 += (2.0 * top.max(0.0) + 1e-9 * scale) / p_min;
        }
        if !strict || gamma1 > GAMMA_CEIL {
            return None;
        }
        let c = TwoFunctionConstants {
            alpha_bar,
            alpha_b,
            gamma1,
            gamma2,
        };
        let tau_max = emulation_bound_two(&c).ok()?.tau_max;
        Some(GammaFit {
            gamma1,
            gamma2,
            tau_max,
        })
    };
    let infeasible = || Error::Infeasible("no feasible (γ₁, γ₂) in the scan box".into());
    match strategy {
        GammaStrategy::FixedGamma2(g2) => eval(g2).ok_or_else(infeasible),
        GammaStrategy::MaxBound => {
            // γ₂ = lo + d with d on a log grid, then golden refinement in ln d
            let base = GAMMA_FLOOR.max(lo * 1e-6);
            let (ln_lo, ln_hi) = (base.ln(), GAMMA_CEIL.ln());
            let n = 48;
            let grid: Vec<f64> = (0..n).map(|i| ln_lo + (ln_hi - ln_lo) * i as f64 / (n - 1) as f64).collect();
            let score = |u: f64| eval(lo + u.exp()).map_or(f64::NEG_INFINITY, |f| f.tau_max);
            let scores: Vec<f64> = grid.iter().map(|&u| score(u)).collect();
            let (ib, &sb) = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("grid is non-empty");
            if !sb.is_finite() {
                return Err(infeasible());
            }
            let (mut a, mut b) = (grid[ib.saturating_sub(1)], grid[(ib + 1).min(n - 1)]);
            let r = 0.5 * (5f64.sqrt() - 1.0);
            let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
            let (mut fc, mut fd) = (score(c), score(d));
            for _ in 0..40 {
                if fc > fd {
                    b = d;
                    (d, fd) = (c, fc);
                    c = b - r * (b - a);
                    fc = score(c);
                } else {
                    a = c;
                    (c, fc) = (d, fd);
                    d = a + r * (b - a);
                    fd = score(d);
                }
            }
            let best = [(grid[ib], sb), (c, fc), (d, fd)]
                .into_iter()
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .expect("non-empty");
            eval(lo + best.0.exp()).ok_or_else(infeasible)
        }
    }
}

/// `(γ₁, γ₂)` for the two-function criterion of a linear loop with `F = A + B̄`.
pub fn fit_gamma(
    model: &LinearSampledModel,
    p: &SymMatrix,
    p_tilde: &SymMatrix,
    alpha_bar: f64,
    alpha_b: f64,
    strategy: GammaStrategy,
) -> Result<GammaFit> {
    let b_bar = model.require_b_bar()?;
    let f = &model.a + &b_bar;
    let pt = p_tilde.as_mat();
    let n = model.n();
    let s11 = model
        .diffusion
        .iter()
        .fold(Mat::zeros(n, n), |acc, g| acc + g.transpose() * pt * g);
    let s22 = -(b_bar.transpose() * pt) - pt * &b_bar;
    fit_gamma_blocks(&s11, &(pt * &f), &s22, p, p_tilde, alpha_bar, alpha_b, strategy)
}

// ---------------------------------------------------------------------------
// design results

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderStep {
    pub alpha_fraction: f64,
    pub alpha_bar: f64,
    pub status: SolveStatus,
    pub tau_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    #[serde(with = "rows_serde")]
    pub gain: Mat,
    #[serde(rename = "Q")]
    pub q: SymMatrix,
    #[serde(rename = "Y", with = "rows_serde")]
    pub y: Mat,
    pub certificate: LmiCertificate,
    pub constants: TwoFunctionConstants,
    pub bound: SamplingBoundResult,
    pub c_tilde: f64,
    /// Step-1 optimum `λ`; the supremal decay rate is `1/(2λ)`.
    pub lambda_step1: Option<f64>,
    pub alpha_fraction: Option<f64>,
    pub ladder: Vec<LadderStep>,
    pub margins: Vec<LmiMargin>,
}

impl DesignResult {
    pub fn gain_norm(&self) -> f64 {
        self.gain.norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum CTilde {
    Prescribed(f64),
    /// Only for noise-free plants, where the ratio `P̃ = c̃P` is a decision
    /// variable; the bound does not depend on it, so `1` is reported.
    Free,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignOptions {
    pub c_tilde: CTilde,
    /// Fractions of the supremal rate tried; the best bound wins.
    pub alpha_fractions: Vec<f64>,
    pub strictness: f64,
    pub seed: u64,
    /// Local search over `(K̂, P)` after the LMI steps.
    pub refine: bool,
    pub refine_evals: usize,
    /// Box on the entries of `Y` in the LMI steps (with `Q ⪯ I`).
    pub y_bound: f64,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions {
            c_tilde: CTilde::Prescribed(1.0),
            alpha_fractions: vec![0.9, 0.7, 0.5, 0.3, 0.1],
            strictness: crate::lmi::SOLVER_STRICTNESS,
            seed: 0,
            refine: true,
            refine_evals: 1500,
            y_bound: 1e3,
        }
    }
}

/// Variables: upper triangle of `Q`, then `Y` row by row.
struct DesignVars {
    n: usize,
    mh: usize,
}

impl DesignVars {
    fn count(&self) -> usize {
        self.n * (self.n + 1) / 2 + self.mh * self.n
    }

    fn split(&self, v: &[f64]) -> (Mat, Mat) {
        let nq = self.n * (self.n + 1) / 2;
        (sym_from_vars(self.n, &v[..nq]), Mat::from_row_slice(self.mh, self.n, &v[nq..]))
    }

    fn join(&self, q: &Mat, y: &Mat) -> Vec<f64> {
        let mut v = sym_to_vars(q);
        v.extend(y.transpose().iter());
        v
    }
}

/// `[[Q₁₁ + s·Q, (GQ)ᵀ…], [GQ, −Q…]]` with `Q₁₁ = QAᵀ + AQ + YᵀB̂ᵀ + B̂Y`;
/// `s = 2ᾱ` gives the Lyapunov–Itô map, `s = 0` the step-1 denominator
/// (negated).
fn lyapunov_block(model: &LinearSampledModel, b_hat: &Mat, q: &Mat, y: &Mat, s: f64) -> Mat {
    let n = model.n();
    let m = model.diffusion.len();
    let by = b_hat * y;
    let q11 = q * model.a.transpose() + &model.a * q + by.transpose() + by + q * s;
    let mut out = Mat::zeros(n * (m + 1), n * (m + 1));
    out.view_mut((0, 0), (n, n)).copy_from(&q11);
    for (j, g) in model.diffusion.iter().enumerate() {
        let gq = g * q;
        let o = n * (j + 1);
        out.view_mut((o, 0), (n, n)).copy_from(&gq);
        out.view_mut((0, o), (n, n)).copy_from(&gq.transpose());
        out.view_mut((o, o), (n, n)).copy_from(&-q);
    }
    out
}

fn normalization_map(vars: &DesignVars, eps: f64) -> AffineMatrixMap {
    let n = vars.n;
    let lower = AffineMatrixMap::from_fn(vars.count(), |v| Mat::identity(n, n) * eps - vars.split(v).0);
    let upper = AffineMatrixMap::from_fn(vars.count(), |v| vars.split(v).0 - Mat::identity(n, n));
    AffineMatrixMap::block_diag(&[&lower, &upper]).expect("shared variables")
}

fn solver_box(vars: &DesignVars, y_bound: f64) -> (Vec<f64>, Vec<f64>) {
    let nq = vars.n * (vars.n + 1) / 2;
    let mut lo = vec![-1.0; vars.count()];
    let mut hi = vec![1.0; vars.count()];
    for i in nq..vars.count() {
        lo[i] = -y_bound;
        hi[i] = y_bound;
    }
    (lo, hi)
}

/// Minimal `λ` with `diag(Q, 0) ⪯ λ·D(Q, Y)`, `D = −lyapunov_block(s = 0)`,
/// `εI ⪯ Q ⪯ I`; returns `(λ, Q, Y)`.
pub fn max_decay_gevp(model: &LinearSampledModel, opts: &DesignOptions) -> Result<(f64, Mat, Mat)> {
    let b_hat = model
        .b_hat()
        .ok_or_else(|| Error::validation("B_hat", "synthesis needs an input matrix"))?
        .clone();
    let vars = DesignVars {
        n: model.n(),
        mh: b_hat.ncols(),
    };
    let n = vars.n;
    let order = n * (model.diffusion.len() + 1);
    let num = AffineMatrixMap::from_fn(vars.count(), |v| {
        let mut out = Mat::zeros(order, order);
        out.view_mut((0, 0), (n, n)).copy_from(&vars.split(v).0);
        out
    });
    let den = AffineMatrixMap::from_fn(vars.count(), |v| {
        let (q, y) = vars.split(v);
        -lyapunov_block(model, &b_hat, &q, &y, 0.0)
    });
    let extra = normalization_map(&vars, 1e-6);
    let (lower, upper) = solver_box(&vars, opts.y_bound);
    let gopts = GevpOptions {
        strictness: 1e-9,
        solver: SolverOptions {
            max_iters: 1500,
            restarts: 1,
            seed: opts.seed,
            lower,
            upper,
            x0: Some(vars.join(&(Mat::identity(n, n) * 0.5), &Mat::zeros(vars.mh, n))),
            centering: false,
        },
        ..Default::default()
    };
    let r = minimize_gevp(&num, &den, Some(&extra), &gopts).map_err(|e| match e {
        Error::Infeasible(_) => Error::Infeasible("plant not stabilizable at any rate found".into()),
        other => other,
    })?;
    let (q, y) = vars.split(&r.point);
    Ok((r.lambda, q, y))
}

/// `(Q, Y)` solving the Lyapunov–Itô design inequality at rate `ᾱ`.
fn lyapunov_design(
    model: &LinearSampledModel,
    alpha_bar: f64,
    start: (&Mat, &Mat),
    opts: &DesignOptions,
) -> Result<(SolveStatus, Mat, Mat)> {
    let b_hat = model.b_hat().expect("checked by caller").clone();
    let vars = DesignVars {
        n: model.n(),
        mh: b_hat.ncols(),
    };
    let lyap = AffineMatrixMap::from_fn(vars.count(), |v| {
        let (q, y) = vars.split(v);
        lyapunov_block(model, &b_hat, &q, &y, 2.0 * alpha_bar)
    });
    let map = AffineMatrixMap::block_diag(&[&lyap, &normalization_map(&vars, 1e-6)])?;
    let (lower, upper) = solver_box(&vars, opts.y_bound);
    let sopts = SolverOptions {
        max_iters: 3000,
        restarts: 2,
        seed: opts.seed,
        lower,
        upper,
        x0: Some(vars.join(start.0, start.1)),
        centering: true,
    };
    let r = solve_feasibility_with(&map, opts.strictness, &sopts)?;
    let (q, y) = vars.split(&r.point);
    Ok((r.status, q, y))
}

/// Lower-triangular factor with positive diagonal from unconstrained values.
fn chol_from_params(n: usize, v: &[f64]) -> Mat {
    let mut l = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = if i == j { v[k].exp() } else { v[k] };
            k += 1;
        }
    }
    l
}

fn chol_to_params(p: &SymMatrix) -> Option<Vec<f64>> {
    let l = p.as_mat().clone().cholesky()?.l();
    let n = p.order();
    let mut v = Vec::new();
    for i in 0..n {
        for j in 0..=i {
            v.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
        }
    }
    Some(v)
}

/// Bound for a linear loop at rate `ᾱ` with `P̃ = c̃P`, or `None` when `(K̂, P)`
/// does not reach `ᾱ` with the required slack.
fn linear_bound(model: &LinearSampledModel, k: &Mat, p: &SymMatrix, alpha_bar: f64, c_tilde: f64) -> Option<(f64, GammaFit)> {
    let closed = model.with_gain(k.clone()).ok()?;
    let b_bar = closed.b_bar()?;
    let f = &closed.a + &b_bar;
    if max_decay_rate(p, &f, &closed.diffusion).ok()? < alpha_bar * (1.0 + BACKOFF) {
        return None;
    }
    let pt = p.scale(c_tilde);
    let alpha_b = (extract_alpha_b(p, &pt, &b_bar).ok()?).max(1e-12) * (1.0 + BACKOFF);
    let fit = fit_gamma(&closed, p, &pt, alpha_bar, alpha_b, GammaStrategy::MaxBound).ok()?;
    Some((alpha_b, fit))
}

/// Local search over `(K̂, chol P)` at fixed `ᾱ`; infeasible points are
/// penalized by their rate shortfall.
fn refine_linear(
    model: &LinearSampledModel,
    k0: &Mat,
    p0: &SymMatrix,
    alpha_bar: f64,
    c_tilde: f64,
    evals: usize,
) -> (Mat, SymMatrix) {
    let n = model.n();
    let (mh, nk) = (k0.nrows(), k0.len());
    let unpack = |v: &[f64]| {
        let k = Mat::from_row_slice(mh, n, &v[..nk]);
        let l = chol_from_params(n, &v[nk..]);
        (k, SymMatrix::symmetrize(&l * l.transpose()))
    };
    let objective = |v: &[f64]| {
        let (k, p) = unpack(v);
        match linear_bound(model, &k, &p, alpha_bar, c_tilde) {
            Some((_, fit)) => -fit.tau_max,
            None => {
                let f = &model.a + model.b_hat().expect("design mode") * &k;
                let rate = max_decay_rate(&p, &f, &model.diffusion).unwrap_or(f64::NEG_INFINITY);
                1.0 + (alpha_bar - rate).max(0.0).min(1e6)
            }
        }
    };
    let Some(pv) = chol_to_params(p0) else {
        return (k0.clone(), p0.clone());
    };
    let mut x: Vec<f64> = k0.transpose().iter().copied().chain(pv).collect();
    let mut fx = objective(&x);
    for round in 0..3 {
        let step = if round == 0 { 0.3 } else { 0.05 };
        let (nx, nf) = nelder_mead(&objective, &x, step, evals, 1e-12);
        if nf <= fx {
            x = nx;
            fx = nf;
        }
    }
    unpack(&x)
}

/// Local search over `(K̂, chol P)` for the largest certified decay rate,
/// started from a step-1 point.
fn polish_decay_rate(model: &LinearSampledModel, q: &Mat, y: &Mat, opts: &DesignOptions) -> f64 {
    let evals = opts.refine_evals;
    let n = model.n();
    let b_hat = model.b_hat().expect("design mode");
    let Ok(p0) = spd_inverse(&SymMatrix::symmetrize(q.clone())) else {
        return f64::NEG_INFINITY;
    };
    let k0 = y * p0.as_mat();
    let Some(pv) = chol_to_params(&p0) else {
        return f64::NEG_INFINITY;
    };
    let nk = k0.len();
    let rate = |v: &[f64]| {
        let k = Mat::from_row_slice(k0.nrows(), n, &v[..nk]);
        let l = chol_from_params(n, &v[nk..]);
        let p = SymMatrix::symmetrize(&l * l.transpose());
        // stay inside the step-1 set: λ_max(Q) = 1, Q ⪰ εI, |Y| ≤ y_bound
        let Ok(qn) = spd_inverse(&p) else {
            return f64::NEG_INFINITY;
        };
        let (qmax, qmin) = (lambda_max(&qn).unwrap_or(0.0), lambda_min(&qn).unwrap_or(0.0));
        let y = &k * qn.as_mat() / qmax;
        if !(qmin / qmax >= 1e-6 && y.amax() <= opts.y_bound) {
            return f64::NEG_INFINITY;
        }
        max_decay_rate(&p, &(&model.a + b_hat * k), &model.diffusion).unwrap_or(f64::NEG_INFINITY)
    };
    let x0: Vec<f64> = k0.transpose().iter().copied().chain(pv).collect();
    let start = rate(&x0);
    let (x, _) = nelder_mead(|v| -rate(v), &x0, 0.3, evals, 1e-13);
    let (x, _) = nelder_mead(|v| -rate(v), &x, 0.02, evals, 1e-13);
    rate(&x).max(start)
}

fn resolve_c_tilde(model: &LinearSampledModel, c: CTilde) -> Result<f64> {
    match c {
        CTilde::Prescribed(v) if v > 0.0 && v.is_finite() => Ok(v),
        CTilde::Prescribed(v) => Err(Error::validation("c_tilde", format!("must be > 0, got {v}"))),
        CTilde::Free if model.diffusion.iter().all(|g| g.iter().all(|v| *v == 0.0)) => Ok(1.0),
        CTilde::Free => Err(Error::validation("c_tilde", "a free c̃ needs a noise-free plant")),
    }
}

/// Assembles a design result from `(K̂, P)` and re-verifies it from the raw
/// matrices with absolute strictness.
#[allow(clippy::too_many_arguments)]
fn finish_linear(
    model: &LinearSampledModel,
    k: Mat,
    p: &SymMatrix,
    alpha_bar: f64,
    alpha_b: f64,
    fit: GammaFit,
    c_tilde: f64,
) -> Result<DesignResult> {
    // normalize so that λ_max(Q) = 1
    let q_raw = spd_inverse(p)?;
    let s = lambda_max(&q_raw)?;
    let q = q_raw.scale(1.0 / s);
    let y = &k * q.as_mat();
    let constants = TwoFunctionConstants {
        alpha_bar,
        alpha_b,
        gamma1: fit.gamma1,
        gamma2: fit.gamma2,
    };
    let margins = verify_design_lmis(model, &q, &y, alpha_bar, alpha_b, fit.gamma1, fit.gamma2, c_tilde)?;
    if !all_pass(&margins, Tolerance::Absolute(0.0)) {
        return Err(Error::NumericalFailure(format!(
            "design does not re-verify: margins {:?}",
            margins.iter().map(|m| m.margin).collect::<Vec<_>>()
        )));
    }
    let bound = emulation_bound_two(&constants)?;
    let certificate = LmiCertificate {
        alpha_bar,
        alpha_b: Some(alpha_b),
        gamma1: Some(fit.gamma1),
        gamma2: Some(fit.gamma2),
        c_tilde: Some(c_tilde),
        q: Some(q.clone()),
        y: Some(y.clone()),
        k_hat: Some(k.clone()),
        ..Default::default()
    };
    Ok(DesignResult {
        gain: k,
        q,
        y,
        certificate,
        constants,
        bound,
        c_tilde,
        lambda_step1: None,
        alpha_fraction: None,
        ladder: Vec::new(),
        margins: margins.to_vec(),
    })
}

/// State-feedback synthesis for a linear plant in design mode.
pub fn synthesize_feedback(model: &LinearSampledModel, opts: &DesignOptions) -> Result<DesignResult> {
    model
        .b_hat()
        .ok_or_else(|| Error::validation("B_hat", "synthesis needs an input matrix"))?;
    let c_tilde = resolve_c_tilde(model, opts.c_tilde)?;
    let (lambda_gevp, q1, y1) = max_decay_gevp(model, opts)?;
    let alpha_sup = polish_decay_rate(model, &q1, &y1, opts).max(0.5 / lambda_gevp);
    let lambda = 0.5 / alpha_sup;

    let attempts: Vec<(LadderStep, Option<DesignResult>)> = opts
        .alpha_fractions
        .par_iter()
        .map(|&fraction| {
            let alpha_bar = fraction * alpha_sup;
            let mut step = LadderStep {
                alpha_fraction: fraction,
                alpha_bar,
                status: SolveStatus::Failed,
                tau_max: None,
            };
            let Ok((status, q, y)) = lyapunov_design(model, alpha_bar, (&q1, &y1), opts) else {
                return (step, None);
            };
            step.status = status;
            if status != SolveStatus::Feasible {
                return (step, None);
            }
            let Ok(p) = spd_inverse(&SymMatrix::symmetrize(q.clone())) else {
                return (step, None);
            };
            let mut k = &y * p.as_mat();
            let mut p = p;
            if opts.refine {
                (k, p) = refine_linear(model, &k, &p, alpha_bar, c_tilde, opts.refine_evals);
            }
            let Some((alpha_b, fit)) = linear_bound(model, &k, &p, alpha_bar, c_tilde) else {
                return (step, None);
            };
            match finish_linear(model, k, &p, alpha_bar, alpha_b, fit, c_tilde) {
                Ok(mut r) => {
                    step.tau_max = Some(r.bound.tau_max);
                    r.alpha_fraction = Some(fraction);
                    (step, Some(r))
                }
                Err(_) => (step, None),
            }
        })
        .collect();

    let ladder: Vec<LadderStep> = attempts.iter().map(|(s, _)| s.clone()).collect();
    let best = attempts
        .into_iter()
        .filter_map(|(_, r)| r)
        .reduce(|a, b| if b.bound.tau_max > a.bound.tau_max { b } else { a });
    let mut best = best.ok_or_else(|| {
        Error::Infeasible("no rate on the fraction ladder gave a verified design".into())
    })?;
    best.lambda_step1 = Some(lambda);
    best.ladder = ladder;
    Ok(best)
}

// ---------------------------------------------------------------------------
// planar nonlinear plant

#[derive(Clone, Debug, PartialEq)]
pub struct PlanarDesignOptions {
    pub b_range: (f64, f64),
    pub c_range: (f64, f64),
    pub starts: usize,
    pub seed: u64,
    pub evals_per_start: usize,
}

impl Default for PlanarDesignOptions {
    fn default() -> Self {
        PlanarDesignOptions {
            b_range: (1e-3, 1e3),
            c_range: (1e-3, 1e4),
            starts: 24,
            seed: 0,
            evals_per_start: 1500,
        }
    }
}

/// Decay rate certified by the planar envelope inequality for weight `b`.
fn planar_rate(at: &Mat, p: &SymMatrix, e1tpe1: &Mat, b: f64) -> f64 {
    let pm = p.as_mat();
    let m = at.transpose() * pm + pm * at + pm * b + e1tpe1 / b;
    pencil_max_eig(&SymMatrix::symmetrize(m), p).map_or(f64::NEG_INFINITY, |l| -0.5 * l)
}

/// Best weight `b` on a log range by golden search; returns `(b, ᾱ)`.
fn best_b(at: &Mat, p: &SymMatrix, range: (f64, f64)) -> (f64, f64) {
    let e1 = NonlinearPlanarModel::e1();
    let e = e1.transpose() * p.as_mat() * &e1;
    let f = |u: f64| planar_rate(at, p, &e, u.exp());
    let (mut a, mut b) = (range.0.ln(), range.1.ln());
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc > fd {
            b = d;
            (d, fd) = (c, fc);
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            (c, fc) = (d, fd);
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc > fd { (c.exp(), fc) } else { (d.exp(), fd) }
}

#[derive(Clone, Debug)]
struct PlanarCandidate {
    k: Mat,
    p: SymMatrix,
    pt: SymMatrix,
    b: f64,
    c: f64,
    alpha_bar: f64,
    alpha_b: f64,
    fit: GammaFit,
}

fn unit_lead_spd(u: f64, v: f64) -> SymMatrix {
    // [[1, u], [u, u² + e^{2v}]]
    SymMatrix::symmetrize(Mat::from_row_slice(2, 2, &[1.0, u, u, u * u + (2.0 * v).exp()]))
}

fn planar_candidate(x: &[f64], opts: &PlanarDesignOptions) -> Option<PlanarCandidate> {
    let k = Mat::from_row_slice(1, 2, &x[0..2]);
    let p = unit_lead_spd(x[2], x[3]);
    let pt = unit_lead_spd(x[4], x[5]);
    let c = x[6].exp();
    if !(opts.c_range.0..=opts.c_range.1).contains(&c) {
        return None;
    }
    let b_bar = NonlinearPlanarModel::b_hat() * &k;
    let at = NonlinearPlanarModel::a_bar() + &b_bar;
    let (b, rate) = best_b(&at, &p, opts.b_range);
    if !(rate > 0.0) {
        return None;
    }
    let alpha_bar = rate * (1.0 - BACKOFF);
    let alpha_b = extract_alpha_b(&p, &pt, &b_bar).ok()?.max(1e-12) * (1.0 + BACKOFF);
    let e1 = NonlinearPlanarModel::e1();
    let ptm = pt.as_mat();
    let s11 = e1.transpose() * ptm * &e1 / c;
    let s22 = -(b_bar.transpose() * ptm) - ptm * &b_bar + ptm * c;
    let fit = fit_gamma_blocks(&s11, &(ptm * &at), &s22, &p, &pt, alpha_bar, alpha_b, GammaStrategy::MaxBound).ok()?;
    Some(PlanarCandidate {
        k,
        p,
        pt,
        b,
        c,
        alpha_bar,
        alpha_b,
        fit,
    })
}

/// Gain synthesis for the planar plant with the sector envelope `E₁`.
///
/// Multistart local search over `(K̂, shape of P, shape of P̃, ln c)`; for each
/// point the weight `b` maximizing the certified rate and the bound-maximizing
/// `(γ₁, γ₂)` are computed exactly. Overall scales of `P` and `P̃` do not
/// affect the bound and are fixed.
pub fn synthesize_nonlinear_planar(opts: &PlanarDesignOptions) -> Result<DesignResult> {
    let objective = |x: &[f64]| planar_candidate(x, opts).map_or(1.0, |c| -c.fit.tau_max);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let starts: Vec<Vec<f64>> = (0..opts.starts)
        .map(|_| {
            // stabilizing gains: trace 0.25 + k₂ < 0 and det 0.25k₂ − k₁ > 0
            let k2: f64 = rng.random_range(-15.0..-1.0);
            let k1 = rng.random_range(-40.0..(0.25 * k2).min(-1.0));
            vec![
                k1,
                k2,
                rng.random_range(-1.0..1.0),
                rng.random_range(-3.0..0.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-3.0..0.0),
                rng.random_range(0.0..4.0),
            ]
        })
        .collect();
    let results: Vec<(Vec<f64>, f64)> = starts
        .par_iter()
        .map(|x0| {
            let (x, f) = nelder_mead(objective, x0, 0.5, opts.evals_per_start, 1e-12);
            nelder_mead(objective, &x, 0.05, opts.evals_per_start, 1e-12).min_by_f(x, f)
        })
        .collect();
    let (x, f) = results
        .into_iter()
        .reduce(|a, b| if b.1 < a.1 { b } else { a })
        .ok_or_else(|| Error::domain("no starting points"))?;
    if !(f < 0.0) {
        return Err(Error::Infeasible("no certified planar design over the (b, c) ranges".into()));
    }
    let cand = planar_candidate(&x, opts).expect("objective was finite");
    let constants = TwoFunctionConstants {
        alpha_bar: cand.alpha_bar,
        alpha_b: cand.alpha_b,
        gamma1: cand.fit.gamma1,
        gamma2: cand.fit.gamma2,
    };
    let margins = verify_planar_lmis(
        &cand.k,
        &cand.p,
        &cand.pt,
        cand.alpha_bar,
        cand.alpha_b,
        cand.fit.gamma1,
        cand.fit.gamma2,
        cand.b,
        cand.c,
    )?;
    if !all_pass(&margins, Tolerance::Absolute(0.0)) {
        return Err(Error::NumericalFailure(format!("planar design does not re-verify: {margins:?}")));
    }
    let q = spd_inverse(&cand.p)?;
    let y = &cand.k * q.as_mat();
    let certificate = LmiCertificate {
        p: Some(cand.p.clone()),
        p_tilde: Some(cand.pt.clone()),
        alpha_bar: cand.alpha_bar,
        alpha_b: Some(cand.alpha_b),
        gamma1: Some(cand.fit.gamma1),
        gamma2: Some(cand.fit.gamma2),
        k_hat: Some(cand.k.clone()),
        b: Some(cand.b),
        c: Some(cand.c),
        ..Default::default()
    };
    Ok(DesignResult {
        gain: cand.k,
        q,
        y,
        certificate,
        constants,
        bound: emulation_bound_two(&constants)?,
        c_tilde: 1.0,
        lambda_step1: None,
        alpha_fraction: None,
        ladder: Vec::new(),
        margins: margins.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// certificate verification

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub kind: CertificateKind,
    pub margins: Vec<LmiMargin>,
    pub pass: bool,
    pub tolerance: Tolerance,
    /// Bound implied by the certificate; present only when it passes.
    pub bound: Option<SamplingBoundResult>,
    pub single_constants: Option<EmulationConstants>,
    pub two_constants: Option<TwoFunctionConstants>,
}

fn linear_with_cert_gain(model: &LinearSampledModel, cert: &LmiCertificate) -> Result<LinearSampledModel> {
    match (&cert.k_hat, model.b_bar()) {
        (_, Some(_)) => Ok(model.clone()),
        (Some(k), None) => model.with_gain(k.clone()),
        (None, None) => Err(Error::validation("K_hat", "neither model nor certificate fixes the gain")),
    }
}

/// Checks a certificate against a model and, when every margin passes,
/// evaluates the sampling bound it implies.
pub fn verify_certificate(model: &Model, cert: &LmiCertificate, tol: Tolerance) -> Result<Verification> {
    let kind = cert.kind()?;
    let mut out = Verification {
        kind,
        margins: Vec::new(),
        pass: false,
        tolerance: tol,
        bound: None,
        single_constants: None,
        two_constants: None,
    };
    let two = |c: &LmiCertificate| TwoFunctionConstants {
        alpha_bar: c.alpha_bar,
        alpha_b: c.alpha_b.expect("checked by kind"),
        gamma1: c.gamma1.expect("checked by kind"),
        gamma2: c.gamma2.expect("checked by kind"),
    };
    match (kind, model) {
        (CertificateKind::PlanarEnvelope, Model::Planar(pm)) => {
            let k = match (&cert.k_hat, &pm.gain) {
                (Some(k), _) | (None, Some(k)) => k.clone(),
                (None, None) => return Err(Error::validation("K_hat", "planar gain missing")),
            };
            let c2 = two(cert);
            out.margins = verify_planar_lmis(
                &k,
                cert.p.as_ref().expect("checked"),
                cert.p_tilde.as_ref().expect("checked"),
                c2.alpha_bar,
                c2.alpha_b,
                c2.gamma1,
                c2.gamma2,
                cert.b.expect("checked"),
                cert.c.expect("checked"),
            )?
            .to_vec();
            out.two_constants = Some(c2);
        }
        (_, Model::Planar(_)) | (CertificateKind::PlanarEnvelope, _) => {
            return Err(Error::validation(
                "certificate",
                "planar envelope certificates pair only with the planar model",
            ))
        }
        (CertificateKind::DesignForm, Model::Linear(lm)) => {
            let c2 = two(cert);
            out.margins = verify_design_lmis(
                lm,
                cert.q.as_ref().expect("checked"),
                cert.y.as_ref().expect("checked"),
                c2.alpha_bar,
                c2.alpha_b,
                c2.gamma1,
                c2.gamma2,
                cert.c_tilde.expect("checked"),
            )?
            .to_vec();
            out.two_constants = Some(c2);
        }
        (CertificateKind::TwoFunction, Model::Linear(lm)) => {
            let lm = linear_with_cert_gain(lm, cert)?;
            let c2 = two(cert);
            out.margins = verify_two_function(
                &lm,
                cert.p.as_ref().expect("checked"),
                cert.p_tilde.as_ref().expect("checked"),
                c2.alpha_bar,
                c2.alpha_b,
                c2.gamma1,
                c2.gamma2,
            )?
            .to_vec();
            out.two_constants = Some(c2);
        }
        (CertificateKind::LyapunovIto, Model::Linear(lm)) => {
            let lm = linear_with_cert_gain(lm, cert)?;
            let p = cert.p.as_ref().expect("checked");
            let f = lm.closed_loop()?;
            out.margins = vec![verify_lyapunov_ito(&f, &lm.diffusion, p, cert.alpha_bar)?];
            out.single_constants = Some(EmulationConstants {
                alpha_bar: cert.alpha_bar,
                alpha_b: extract_alpha_b(p, p, &lm.require_b_bar()?)?,
                alpha_f: extract_alpha_f(p, &f, cert.alpha_bar)?,
            });
        }
    }
    out.pass = all_pass(&out.margins, tol);
    if out.pass {
        out.bound = Some(match (out.single_constants, out.two_constants) {
            (Some(c), _) => emulation_bound_single(&c)?,
            (_, Some(c)) => emulation_bound_two(&c)?,
            _ => unreachable!("one constant set is always filled"),
        });
    }
    Ok(out)
}

trait MinByF {
    fn min_by_f(self, x: Vec<f64>, f: f64) -> (Vec<f64>, f64);
}

impl MinByF for (Vec<f64>, f64) {
    fn min_by_f(self, x: Vec<f64>, f: f64) -> (Vec<f64>, f64) {
        if self.1 <= f { self } else { (x, f) }
    }
}
