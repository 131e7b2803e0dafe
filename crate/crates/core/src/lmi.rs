//! Linear matrix inequalities: affine maps, certificate checks and a small
//! dense feasibility / generalized-eigenvalue solver.
//!
//! Every check assembles the full symmetric block matrix and reports its
//! largest eigenvalue (`margin`); an inequality `M ⪯ 0` holds when the margin
//! is non-positive up to the chosen tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{LinearSampledModel, NonlinearPlanarModel};
use crate::numerics::{lambda_max, rows_serde, spd_inverse, sym_eig, Mat, SymMatrix};

/// Relative tolerance used for certificates printed to a few digits.
pub const PRINTED_CERT_REL_TOL: f64 = 1e-2;
/// Absolute strictness demanded from fresh solver output.
pub const SOLVER_STRICTNESS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// block assembly

/// Dense matrix from a grid of blocks; every block row must agree in height
/// and every block column in width.
pub fn block_matrix(rows: &[Vec<Mat>]) -> Result<Mat> {
    let heights: Vec<usize> = rows.iter().map(|r| r[0].nrows()).collect();
    let widths: Vec<usize> = rows[0].iter().map(|b| b.ncols()).collect();
    let (h, w) = (heights.iter().sum(), widths.iter().sum());
    let mut out = Mat::zeros(h, w);
    let mut r0 = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != widths.len() {
            return Err(Error::domain("ragged block row"));
        }
        let mut c0 = 0;
        for (j, b) in row.iter().enumerate() {
            if b.nrows() != heights[i] || b.ncols() != widths[j] {
                return Err(Error::domain(format!(
                    "block ({i},{j}) is {}x{}, expected {}x{}",
                    b.nrows(),
                    b.ncols(),
                    heights[i],
                    widths[j]
                )));
            }
            out.view_mut((r0, c0), (b.nrows(), b.ncols())).copy_from(b);
            c0 += widths[j];
        }
        r0 += heights[i];
    }
    Ok(out)
}

fn check_square(name: &str, m: &Mat, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::domain(format!(
            "{name} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn sum_gtpg(g: &[Mat], p: &Mat) -> Mat {
    let n = p.nrows();
    g.iter().fold(Mat::zeros(n, n), |acc, gj| acc + gj.transpose() * p * gj)
}

// ---------------------------------------------------------------------------
// margins

/// How to judge a margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Tolerance {
    /// Pass iff `margin ≤ value · scale`.
    Relative(f64),
    /// Pass iff `margin ≤ value`.
    Absolute(f64),
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::Relative(PRINTED_CERT_REL_TOL)
    }
}

/// Largest eigenvalue of one assembled inequality, with the magnitude of the
/// matrix that carries the unknowns (`‖P‖`, `ᾱ_b‖P̃‖`, …) for relative judgement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmiMargin {
    pub name: String,
    pub margin: f64,
    pub scale: f64,
}

impl LmiMargin {
    fn new(name: &str, m: Mat, scale: f64) -> Result<Self> {
        Ok(LmiMargin {
            name: name.to_string(),
            margin: lambda_max(&SymMatrix::symmetrize(m))?,
            scale,
        })
    }

    pub fn passes(&self, tol: Tolerance) -> bool {
        match tol {
            Tolerance::Relative(r) => self.margin <= r * self.scale,
            Tolerance::Absolute(a) => self.margin <= a,
        }
    }
}

pub fn all_pass(margins: &[LmiMargin], tol: Tolerance) -> bool {
    margins.iter().all(|m| m.passes(tol))
}

// ---------------------------------------------------------------------------
// certificate checks

/// `FᵀP + PF + ΣGⱼᵀPGⱼ + 2ᾱP ⪯ 0`.
pub fn verify_lyapunov_ito(f: &Mat, g: &[Mat], p: &SymMatrix, alpha_bar: f64) -> Result<LmiMargin> {
    let n = p.order();
    check_square("F", f, n)?;
    for gj in g {
        check_square("G", gj, n)?;
    }
    let p = p.as_mat();
    let m = f.transpose() * p + p * f + sum_gtpg(g, p) + p * (2.0 * alpha_bar);
    LmiMargin::new("lyapunov_ito", m, p.norm())
}

/// `(I + hF)ᵀP(I + hF) + hΣGⱼᵀPGⱼ − (1 − c̄)P ⪯ 0`.
pub fn verify_em_lmi(f: &Mat, g: &[Mat], p: &SymMatrix, h: f64, c_bar: f64) -> Result<LmiMargin> {
    if !(h > 0.0) {
        return Err(Error::domain(format!("step size must be positive, got {h}")));
    }
    if !(c_bar > 0.0 && c_bar < 1.0) {
        return Err(Error::domain(format!("c̄ must lie in (0, 1), got {c_bar}")));
    }
    let n = p.order();
    check_square("F", f, n)?;
    for gj in g {
        check_square("G", gj, n)?;
    }
    let p = p.as_mat();
    let step = Mat::identity(n, n) + f * h;
    let m = step.transpose() * p * &step + sum_gtpg(g, p) * h - p * (1.0 - c_bar);
    LmiMargin::new("em_lyapunov", m, p.norm())
}

/// Two-function analysis criterion for a linear sampled loop with `F = A + B̄`:
/// the Lyapunov–Itô inequality, `B̄ᵀPB̄ ⪯ ᾱ_bP̃`, and
/// `[[ΣGⱼᵀP̃Gⱼ − γ₁P, FᵀP̃], [P̃F, −B̄ᵀP̃ − P̃B̄ − γ₂P̃]] ⪯ 0`.
#[allow(clippy::too_many_arguments)]
pub fn verify_two_function(
    model: &LinearSampledModel,
    p: &SymMatrix,
    p_tilde: &SymMatrix,
    alpha_bar: f64,
    alpha_b: f64,
    gamma1: f64,
    gamma2: f64,
) -> Result<[LmiMargin; 3]> {
    let n = model.n();
    check_square("P", p.as_mat(), n)?;
    check_square("P_tilde", p_tilde.as_mat(), n)?;
    let b_bar = model.require_b_bar()?;
    let f = &model.a + &b_bar;
    let (pm, pt) = (p.as_mat(), p_tilde.as_mat());
    let lyap = verify_lyapunov_ito(&f, &model.diffusion, p, alpha_bar)?;
    let jump = LmiMargin::new(
        "jump_gain",
        b_bar.transpose() * pm * &b_bar - pt * alpha_b,
        alpha_b * pt.norm(),
    )?;
    let block = block_matrix(&[
        vec![sum_gtpg(&model.diffusion, pt) - pm * gamma1, f.transpose() * pt],
        vec![pt * &f, -(b_bar.transpose() * pt) - pt * &b_bar - pt * gamma2],
    ])?;
    let coupling = LmiMargin::new("coupling", block, (gamma1 * pm.norm()).max(gamma2 * pt.norm()))?;
    Ok([lyap, jump, coupling])
}

/// Design-form inequalities in `(Q, Y)` with `P̃ = c̃P`, `P = Q⁻¹`, `K̂ = YQ⁻¹`.
#[allow(clippy::too_many_arguments)]
pub fn verify_design_lmis(
    model: &LinearSampledModel,
    q: &SymMatrix,
    y: &Mat,
    alpha_bar: f64,
    alpha_b: f64,
    gamma1: f64,
    gamma2: f64,
    c_tilde: f64,
) -> Result<[LmiMargin; 3]> {
    if !(c_tilde > 0.0) {
        return Err(Error::domain("c̃ must be positive"));
    }
    let n = model.n();
    check_square("Q", q.as_mat(), n)?;
    let b_hat = model
        .b_hat()
        .ok_or_else(|| Error::domain("design-form check needs an input matrix B_hat"))?;
    if y.shape() != (b_hat.ncols(), n) {
        return Err(Error::domain(format!("Y must be {}x{n}", b_hat.ncols())));
    }
    let qm = q.as_mat();
    let a = &model.a;
    let by = b_hat * y;
    let q11 = qm * a.transpose() + by.transpose() + a * qm + &by;
    let g = &model.diffusion;
    let z = |r: usize, c: usize| Mat::zeros(r, c);

    // Lyapunov–Itô in Q: [[Q11 + 2ᾱQ, (G₁Q)ᵀ, …], [GⱼQ, −Q (diagonal)]]
    let mut rows = vec![{
        let mut r = vec![q11 + qm * (2.0 * alpha_bar)];
        r.extend(g.iter().map(|gj| (gj * qm).transpose()));
        r
    }];
    for (j, gj) in g.iter().enumerate() {
        let mut r = vec![gj * qm];
        r.extend((0..g.len()).map(|k| if k == j { -qm.clone() } else { z(n, n) }));
        rows.push(r);
    }
    let lyap = LmiMargin::new("lyapunov_ito", block_matrix(&rows)?, qm.norm())?;

    let jump = LmiMargin::new(
        "jump_gain",
        block_matrix(&[
            vec![qm * (-alpha_b * c_tilde), by.transpose()],
            vec![by.clone(), -qm.clone()],
        ])?,
        alpha_b * c_tilde * qm.norm(),
    )?;

    let c21 = (a * qm + &by) * c_tilde;
    let q22 = -(by.transpose() + &by) * c_tilde - qm * (gamma2 * c_tilde);
    let sc = c_tilde.sqrt();
    let mut rows = vec![
        {
            let mut r = vec![qm * (-gamma1), c21.transpose()];
            r.extend(g.iter().map(|gj| (gj * qm * sc).transpose()));
            r
        },
        {
            let mut r = vec![c21.clone(), q22];
            r.extend(g.iter().map(|_| z(n, n)));
            r
        },
    ];
    for (j, gj) in g.iter().enumerate() {
        let mut r = vec![gj * qm * sc, z(n, n)];
        r.extend((0..g.len()).map(|k| if k == j { -qm.clone() } else { z(n, n) }));
        rows.push(r);
    }
    let coupling = LmiMargin::new(
        "coupling",
        block_matrix(&rows)?,
        (gamma1 * qm.norm()).max(gamma2 * c_tilde * qm.norm()),
    )?;
    Ok([lyap, jump, coupling])
}

/// Inequalities for the planar plant with sector envelope `E₁`, where
/// `Ã = Ā + B̄`, `B̄ = B̂K̂`, and `b, c > 0` are the Young-inequality weights.
#[allow(clippy::too_many_arguments)]
pub fn verify_planar_lmis(
    gain: &Mat,
    p: &SymMatrix,
    p_tilde: &SymMatrix,
    alpha_bar: f64,
    alpha_b: f64,
    gamma1: f64,
    gamma2: f64,
    b: f64,
    c: f64,
) -> Result<[LmiMargin; 3]> {
    if gain.shape() != (1, 2) {
        return Err(Error::domain("planar gain must be 1x2"));
    }
    check_square("P", p.as_mat(), 2)?;
    check_square("P_tilde", p_tilde.as_mat(), 2)?;
    if !(b > 0.0 && c > 0.0) {
        return Err(Error::domain("weights b and c must be positive"));
    }
    let (pm, pt) = (p.as_mat(), p_tilde.as_mat());
    let b_bar = NonlinearPlanarModel::b_hat() * gain;
    let at = NonlinearPlanarModel::a_bar() + &b_bar;
    let e1 = NonlinearPlanarModel::e1();
    let lyap = LmiMargin::new(
        "lyapunov_ito",
        at.transpose() * pm + pm * &at + pm * b + e1.transpose() * pm * &e1 / b + pm * (2.0 * alpha_bar),
        pm.norm(),
    )?;
    let jump = LmiMargin::new(
        "jump_gain",
        b_bar.transpose() * pm * &b_bar - pt * alpha_b,
        alpha_b * pt.norm(),
    )?;
    let block = block_matrix(&[
        vec![e1.transpose() * pt * &e1 / c - pm * gamma1, at.transpose() * pt],
        vec![pt * &at, -(b_bar.transpose() * pt) - pt * &b_bar + pt * c - pt * gamma2],
    ])?;
    let coupling = LmiMargin::new("coupling", block, (gamma1 * pm.norm()).max(gamma2 * pt.norm()))?;
    Ok([lyap, jump, coupling])
}

// ---------------------------------------------------------------------------
// certificate file

/// Quadratic stability certificate. Which fields are present selects the
/// check: `Q`/`Y` give the design form, `b`/`c` the planar envelope form,
/// `P_tilde` the two-function form, and `P` alone the Lyapunov–Itô check.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmiCertificate {
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<SymMatrix>,
    #[serde(rename = "P_tilde", default, skip_serializing_if = "Option::is_none")]
    pub p_tilde: Option<SymMatrix>,
    pub alpha_bar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_tilde: Option<f64>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<SymMatrix>,
    #[serde(rename = "Y", default, with = "rows_serde::option", skip_serializing_if = "Option::is_none")]
    pub y: Option<Mat>,
    #[serde(rename = "K_hat", default, with = "rows_serde::option", skip_serializing_if = "Option::is_none")]
    pub k_hat: Option<Mat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    LyapunovIto,
    TwoFunction,
    DesignForm,
    PlanarEnvelope,
}

fn need<T: Clone>(v: &Option<T>, field: &str, kind: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::validation(field, format!("required for a {kind} certificate")))
}

impl LmiCertificate {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    /// Gain fixed by the certificate: `K̂` if recorded, else `Y Q⁻¹`.
    pub fn gain(&self) -> Result<Option<Mat>> {
        if let Some(k) = &self.k_hat {
            return Ok(Some(k.clone()));
        }
        match (&self.q, &self.y) {
            (Some(q), Some(y)) => Ok(Some(y * spd_inverse(q)?.as_mat())),
            _ => Ok(None),
        }
    }

    pub fn kind(&self) -> Result<CertificateKind> {
        if !(self.alpha_bar > 0.0 && self.alpha_bar.is_finite()) {
            return Err(Error::validation("alpha_bar", "must be finite and > 0"));
        }
        let two_fn = self.alpha_b.is_some() || self.gamma1.is_some() || self.gamma2.is_some();
        if self.q.is_some() || self.y.is_some() {
            need(&self.q, "Q", "design-form")?;
            need(&self.y, "Y", "design-form")?;
            need(&self.c_tilde, "c_tilde", "design-form")?;
            need(&self.alpha_b, "alpha_b", "design-form")?;
            need(&self.gamma1, "gamma1", "design-form")?;
            need(&self.gamma2, "gamma2", "design-form")?;
            return Ok(CertificateKind::DesignForm);
        }
        need(&self.p, "P", "quadratic")?;
        if self.b.is_some() || self.c.is_some() {
            for (f, v) in [("b", &self.b), ("c", &self.c), ("alpha_b", &self.alpha_b)] {
                need(v, f, "planar envelope")?;
            }
            need(&self.p_tilde, "P_tilde", "planar envelope")?;
            need(&self.gamma1, "gamma1", "planar envelope")?;
            need(&self.gamma2, "gamma2", "planar envelope")?;
            return Ok(CertificateKind::PlanarEnvelope);
        }
        if two_fn || self.p_tilde.is_some() {
            need(&self.p_tilde, "P_tilde", "two-function")?;
            need(&self.alpha_b, "alpha_b", "two-function")?;
            need(&self.gamma1, "gamma1", "two-function")?;
            need(&self.gamma2, "gamma2", "two-function")?;
            return Ok(CertificateKind::TwoFunction);
        }
        Ok(CertificateKind::LyapunovIto)
    }

    /// `(P, P̃)` in analysis form, converting from `(Q, c̃)` when needed.
    pub fn analysis_pair(&self) -> Result<(SymMatrix, Option<SymMatrix>)> {
        match self.kind()? {
            CertificateKind::DesignForm => {
                let p = spd_inverse(self.q.as_ref().expect("checked"))?;
                let pt = p.scale(self.c_tilde.expect("checked"));
                Ok((p, Some(pt)))
            }
            _ => Ok((self.p.clone().expect("checked"), self.p_tilde.clone())),
        }
    }
}

// ---------------------------------------------------------------------------
// affine maps and the solver

/// `x ↦ base + Σᵢ xᵢ·Cᵢ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMatrixMap {
    pub base: SymMatrix,
    /// `(variable index, coefficient)`; indices may repeat.
    pub coefficients: Vec<(usize, SymMatrix)>,
    pub n_vars: usize,
}

impl AffineMatrixMap {
    pub fn new(base: SymMatrix, coefficients: Vec<(usize, SymMatrix)>, n_vars: usize) -> Result<Self> {
        let n = base.order();
        for (i, c) in &coefficients {
            if *i >= n_vars {
                return Err(Error::domain(format!("variable index {i} out of range")));
            }
            if c.order() != n {
                return Err(Error::domain("coefficient order differs from base"));
            }
        }
        Ok(AffineMatrixMap {
            base,
            coefficients,
            n_vars,
        })
    }

    /// Constant map without variables.
    pub fn constant(base: SymMatrix) -> Self {
        AffineMatrixMap {
            base,
            coefficients: Vec::new(),
            n_vars: 0,
        }
    }

    /// Reads off an affine map from a function that is affine in `x` and
    /// returns a square matrix; only its symmetric part is kept.
    pub fn from_fn(n_vars: usize, f: impl Fn(&[f64]) -> Mat) -> Self {
        let zero = vec![0.0; n_vars];
        let base = f(&zero);
        let coefficients = (0..n_vars)
            .filter_map(|i| {
                let mut e = zero.clone();
                e[i] = 1.0;
                let c = SymMatrix::symmetrize(f(&e) - &base);
                (c.norm() > 0.0).then_some((i, c))
            })
            .collect();
        AffineMatrixMap {
            base: SymMatrix::symmetrize(base),
            coefficients,
            n_vars,
        }
    }

    pub fn order(&self) -> usize {
        self.base.order()
    }

    pub fn eval(&self, x: &[f64]) -> SymMatrix {
        let mut m = self.base.as_mat().clone();
        for (i, c) in &self.coefficients {
            m += c.as_mat() * x[*i];
        }
        SymMatrix::symmetrize(m)
    }

    pub fn scale(&self, s: f64) -> Self {
        AffineMatrixMap {
            base: self.base.scale(s),
            coefficients: self.coefficients.iter().map(|(i, c)| (*i, c.scale(s))).collect(),
            n_vars: self.n_vars,
        }
    }

    /// `self − other`, both over the same variables.
    pub fn sub(&self, other: &AffineMatrixMap) -> Result<Self> {
        if self.order() != other.order() || self.n_vars != other.n_vars {
            return Err(Error::domain("affine maps are incompatible"));
        }
        let mut coefficients = self.coefficients.clone();
        coefficients.extend(other.coefficients.iter().map(|(i, c)| (*i, c.scale(-1.0))));
        Ok(AffineMatrixMap {
            base: self.base.sub(&other.base),
            coefficients,
            n_vars: self.n_vars,
        })
    }

    /// Block-diagonal stacking of maps over a shared variable vector.
    pub fn block_diag(maps: &[&AffineMatrixMap]) -> Result<Self> {
        let n_vars = maps.first().map_or(0, |m| m.n_vars);
        if maps.iter().any(|m| m.n_vars != n_vars) {
            return Err(Error::domain("block_diag needs a shared variable count"));
        }
        let total: usize = maps.iter().map(|m| m.order()).sum();
        let embed = |s: &SymMatrix, off: usize| {
            let mut out = Mat::zeros(total, total);
            out.view_mut((off, off), (s.order(), s.order())).copy_from(s.as_mat());
            SymMatrix::symmetrize(out)
        };
        let mut off = 0;
        let mut base = Mat::zeros(total, total);
        let mut coefficients = Vec::new();
        for m in maps {
            base += embed(&m.base, off).as_mat();
            coefficients.extend(m.coefficients.iter().map(|(i, c)| (*i, embed(c, off))));
            off += m.order();
        }
        Ok(AffineMatrixMap {
            base: SymMatrix::symmetrize(base),
            coefficients,
            n_vars,
        })
    }

    /// `λ_max` at `x` and the subgradient `gᵢ = vᵀCᵢv` for the top eigenvector `v`.
    fn value_and_subgradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = sym_eig(&self.eval(x))?;
        let v = e.max_vector();
        let mut g = vec![0.0; self.n_vars];
        for (i, c) in &self.coefficients {
            g[*i] += c.quad_form(&v);
        }
        Ok((e.max(), g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Feasible,
    InfeasibleJudged,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub point: Vec<f64>,
    /// `λ_max` of the map at `point`, recomputed after solving.
    pub margin: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Box `[lo, hi]` applied to every variable, or per variable.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x0: Option<Vec<f64>>,
    /// Keep improving the margin after feasibility is reached.
    pub centering: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 4000,
            restarts: 3,
            seed: 0,
            lower: vec![-1e6],
            upper: vec![1e6],
            x0: None,
            centering: false,
        }
    }
}

impl SolverOptions {
    fn bounds(&self, i: usize) -> (f64, f64) {
        let pick = |v: &[f64]| if v.len() == 1 { v[0] } else { v[i] };
        (pick(&self.lower), pick(&self.upper))
    }

    fn project(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            let (lo, hi) = self.bounds(i);
            *xi = xi.clamp(lo, hi);
        }
    }
}

/// Strictly feasible point of `map(x) ≺ 0` with default options.
pub fn solve_feasibility(map: &AffineMatrixMap, strictness: f64) -> Result<SolveReport> {
    solve_feasibility_with(map, strictness, &SolverOptions::default())
}

/// Projected subgradient descent on `x ↦ λ_max(map(x))` with Polyak steps
/// toward an adaptive target and seeded random restarts.
///
/// `feasible` means the re-verified margin is `≤ −strictness`;
/// `infeasible_judged` means no point with a non-positive margin was found.
pub fn solve_feasibility_with(
    map: &AffineMatrixMap,
    strictness: f64,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    if map.n_vars == 0 {
        return Err(Error::domain("feasibility problem has no variables"));
    }
    if opts.lower.len() != 1 && opts.lower.len() != map.n_vars
        || opts.upper.len() != 1 && opts.upper.len() != map.n_vars
    {
        return Err(Error::domain("solver box does not match the variable count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = map.n_vars;
    let mut best_x = opts.x0.clone().unwrap_or_else(|| vec![0.0; n]);
    if best_x.len() != n {
        return Err(Error::domain("initial point has the wrong length"));
    }
    opts.project(&mut best_x);
    let mut best_f = map.value_and_subgradient(&best_x)?.0;
    let mut iterations = 0;
    let done = |f: f64| !opts.centering && f <= -2.0 * strictness;

    for start in 0..=opts.restarts {
        if done(best_f) {
            break;
        }
        let mut x = if start == 0 {
            best_x.clone()
        } else {
            let mut x: Vec<f64> = (0..n)
                .map(|i| {
                    let (lo, hi) = opts.bounds(i);
                    let (lo, hi) = (lo.max(-1.0), hi.min(1.0));
                    if lo < hi { rng.random_range(lo..hi) } else { lo }
                })
                .collect();
            opts.project(&mut x);
            x
        };
        let (mut f, mut g) = map.value_and_subgradient(&x)?;
        let (mut run_x, mut run_f) = (x.clone(), f);
        let mut delta = 0.5 * (1.0 + f.abs());
        let mut stall = 0;
        for _ in 0..opts.max_iters {
            iterations += 1;
            let gn2: f64 = g.iter().map(|v| v * v).sum();
            if gn2 == 0.0 {
                break;
            }
            let step = (f - run_f + delta) / gn2;
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= step * gi;
            }
            opts.project(&mut x);
            (f, g) = map.value_and_subgradient(&x)?;
            if f < run_f - 1e-12 * (1.0 + run_f.abs()) {
                run_f = f;
                run_x.clone_from(&x);
                stall = 0;
            } else {
                stall += 1;
                if stall >= 25 {
                    delta *= 0.5;
                    stall = 0;
                    x.clone_from(&run_x);
                    (f, g) = map.value_and_subgradient(&x)?;
                }
            }
            if done(run_f) || delta < 1e-14 * (1.0 + run_f.abs()) {
                break;
            }
        }
        if run_f < best_f {
            best_f = run_f;
            best_x = run_x;
        }
    }

    let margin = lambda_max(&map.eval(&best_x))?;
    let status = if margin <= -strictness {
        SolveStatus::Feasible
    } else if margin > 0.0 {
        SolveStatus::InfeasibleJudged
    } else {
        SolveStatus::Failed
    };
    Ok(SolveReport {
        status,
        point: best_x,
        margin,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GevpOptions {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub iterations: usize,
    pub strictness: f64,
    pub solver: SolverOptions,
}

impl Default for GevpOptions {
    fn default() -> Self {
        GevpOptions {
            lambda_lo: 1e-6,
            lambda_hi: 1e6,
            iterations: 60,
            strictness: 1e-9,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GevpResult {
    pub lambda: f64,
    pub point: Vec<f64>,
}

/// Smallest `λ` with `N(x) ⪯ λD(x)`, `D(x) ≻ 0` and `extra(x) ⪯ 0`, by
/// bisection on `ln λ` over feasibility subproblems.
pub fn minimize_gevp(
    numerator: &AffineMatrixMap,
    denominator: &AffineMatrixMap,
    extra: Option<&AffineMatrixMap>,
    opts: &GevpOptions,
) -> Result<GevpResult> {
    let mut warm: Option<Vec<f64>> = opts.solver.x0.clone();
    let feasible_at = |lambda: f64, warm: &Option<Vec<f64>>| -> Result<Option<Vec<f64>>> {
        let gap = numerator.sub(&denominator.scale(lambda))?;
        let neg_den = denominator.scale(-1.0);
        let mut parts = vec![&gap, &neg_den];
        if let Some(e) = extra {
            parts.push(e);
        }
        let map = AffineMatrixMap::block_diag(&parts)?;
        let point = if map.n_vars == 0 {
            Vec::new()
        } else {
            let so = SolverOptions {
                x0: warm.clone(),
                ..opts.solver.clone()
            };
            let r = solve_feasibility_with(&map, opts.strictness, &so)?;
            if r.status != SolveStatus::Feasible {
                return Ok(None);
            }
            r.point
        };
        // re-verify from raw matrices; D ≻ 0 is checked on its own because a
        // zero strictness only gives D ⪰ 0
        let ok = lambda_max(&map.eval(&point))? <= -opts.strictness
            && sym_eig(&denominator.eval(&point))?.min() > 0.0;
        Ok(ok.then_some(point))
    };

    let mut hi_point = feasible_at(opts.lambda_hi, &warm)?.ok_or_else(|| {
        Error::Infeasible(format!("no feasible point even at λ = {}", opts.lambda_hi))
    })?;
    let (mut lo, mut hi) = (opts.lambda_lo.ln(), opts.lambda_hi.ln());
    if let Some(p) = feasible_at(opts.lambda_lo, &Some(hi_point.clone()))? {
        return Ok(GevpResult {
            lambda: opts.lambda_lo,
            point: p,
        });
    }
    warm = Some(hi_point.clone());
    for _ in 0..opts.iterations {
        let mid = 0.5 * (lo + hi);
        match feasible_at(mid.exp(), &warm)? {
            Some(p) => {
                hi = mid;
                warm = Some(p.clone());
                hi_point = p;
            }
            None => lo = mid,
        }
    }
    Ok(GevpResult {
        lambda: hi.exp(),
        point: hi_point,
    })
}

/// Packs the upper triangle of a symmetric matrix, row by row.
pub fn sym_to_vars(s: &Mat) -> Vec<f64> {
    let n = s.nrows();
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|(i, j)| s[(i, j)]).collect()
}

/// Inverse of [`sym_to_vars`].
pub fn sym_from_vars(n: usize, v: &[f64]) -> Mat {
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}
