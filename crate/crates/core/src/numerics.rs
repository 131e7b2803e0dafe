//! Dense small-matrix linear algebra and scalar root finding.
//!
//! Every matrix in this crate is small (order ≤ ~10), so the routines here
//! favour robustness over asymptotic speed: symmetric eigenproblems go
//! through cyclic Jacobi rotations, and scalar equations are solved by a
//! safeguarded bisection/secant hybrid on an explicit sign-change bracket.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Maximum number of Jacobi sweeps before giving up.
const JACOBI_MAX_SWEEPS: usize = 100;

/// Default absolute argument tolerance for [`find_root`].
pub const ROOT_TOL: f64 = 1e-12;

/// A real symmetric matrix.
///
/// Symmetry is structural: the constructor averages the input with its
/// transpose, so `entry(i, j) == entry(j, i)` holds bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(Mat);

impl SymMatrix {
    /// Builds a symmetric matrix, rejecting inputs that are not square,
    /// not finite, or visibly asymmetric (beyond `1e-9·(1+‖M‖)`).
    pub fn new(m: Mat) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::domain(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("matrix has non-finite entries"));
        }
        let asym = (&m - m.transpose()).abs().max();
        if asym > 1e-9 * (1.0 + m.norm()) {
            return Err(Error::domain(format!("matrix is not symmetric (|M-Mᵀ|max = {asym:e})")));
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetric part `(M + Mᵀ)/2` of a square matrix, without checks.
    pub fn symmetrize(m: Mat) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(mat_from_rows(rows)?)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Mat::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(Mat::zeros(n, n))
    }

    pub fn diag(d: &[f64]) -> Self {
        SymMatrix(Mat::from_diagonal(&Vector::from_row_slice(d)))
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        SymMatrix(&self.0 * s)
    }

    pub fn add(&self, other: &SymMatrix) -> Self {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> Self {
        SymMatrix(&self.0 - &other.0)
    }

    /// Congruence `Mᵀ S M`.
    pub fn congruence(&self, m: &Mat) -> Self {
        Self::symmetrize(m.transpose() * &self.0 * m)
    }

    pub fn quad_form(&self, v: &Vector) -> f64 {
        v.dot(&(&self.0 * v))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        mat_to_rows(&self.0)
    }
}

/// Eigen-decomposition `S = V Λ Vᵀ` with ascending eigenvalues.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors, stored as columns in eigenvalue order.
    pub eigenvectors: Mat,
}

impl EigenDecomposition {
    pub fn max(&self) -> f64 {
        *self.eigenvalues.last().expect("order >= 1")
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max_vector(&self) -> Vector {
        self.eigenvectors.column(self.eigenvalues.len() - 1).into_owned()
    }
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
pub fn sym_eig(s: &SymMatrix) -> Result<EigenDecomposition> {
    let n = s.order();
    let mut a = s.as_mat().clone();
    let mut v = Mat::identity(n, n);
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure("non-finite matrix passed to sym_eig".into()));
    }
    let scale = a.norm();
    let mut converged = n == 1 || scale == 0.0;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        sweep += 1;
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * 1e-2 * scale {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        // a final off-diagonal check after the last sweep
        let off = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].abs())
            .fold(0.0, f64::max);
        if off > 1e-13 * scale {
            return Err(Error::NumericalFailure(format!(
                "Jacobi iteration did not converge after {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

pub fn lambda_max(s: &SymMatrix) -> Result<f64> {
    Ok(sym_eig(s)?.max())
}

pub fn lambda_min(s: &SymMatrix) -> Result<f64> {
    Ok(sym_eig(s)?.min())
}

/// Relative positive-definiteness tolerance `1e-9·(1+‖S‖)`.
pub fn default_pd_tol(s: &SymMatrix) -> f64 {
    1e-9 * (1.0 + s.norm())
}

/// `true` iff the smallest eigenvalue of `s` exceeds `tol`.
pub fn is_pos_def(s: &SymMatrix, tol: f64) -> bool {
    match sym_eig(s) {
        Ok(e) => e.min() > tol,
        Err(_) => false,
    }
}

/// Largest generalized eigenvalue of the pencil `(A, B)` with `B ≻ 0`:
/// the smallest `λ` with `A ⪯ λB`.
pub fn pencil_max_eig(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    if a.order() != b.order() {
        return Err(Error::domain("pencil matrices have different orders"));
    }
    let eb = sym_eig(b)?;
    if eb.min() <= 0.0 {
        return Err(Error::domain(format!(
            "pencil denominator is not positive definite (λ_min = {:e})",
            eb.min()
        )));
    }
    // B^{-1/2} = V diag(1/√λ) Vᵀ keeps the transformed matrix symmetric
    let n = b.order();
    let inv_sqrt = Mat::from_diagonal(&Vector::from_iterator(
        n,
        eb.eigenvalues.iter().map(|l| 1.0 / l.sqrt()),
    ));
    let w = &eb.eigenvectors * inv_sqrt * eb.eigenvectors.transpose();
    lambda_max(&a.congruence(&w))
}

/// A sign-change bracket for scalar root finding.
#[derive(Clone, Copy, Debug)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
    pub f_lo: f64,
    pub f_hi: f64,
}

impl Bracket {
    /// Evaluates `f` at both ends and checks the bracket invariants.
    pub fn new(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Result<Self> {
        let b = Bracket {
            lo,
            hi,
            f_lo: f(lo),
            f_hi: f(hi),
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::domain(format!("invalid bracket [{}, {}]", self.lo, self.hi)));
        }
        if !(self.f_lo * self.f_hi <= 0.0) {
            return Err(Error::domain(format!(
                "no sign change on [{}, {}]: f = {}, {}",
                self.lo, self.hi, self.f_lo, self.f_hi
            )));
        }
        Ok(())
    }
}

/// Root of a continuous scalar function inside a sign-change bracket.
///
/// Each step tries a secant point and falls back to the midpoint whenever the
/// secant lands outside the middle 90% of the current interval, so the
/// interval at least halves every two iterations. Stops when `|f| ≤ tol` or
/// the interval is narrower than `tol`.
pub fn find_root(f: impl Fn(f64) -> f64, bracket: Bracket, tol: f64) -> Result<f64> {
    bracket.validate()?;
    let Bracket {
        mut lo,
        mut hi,
        mut f_lo,
        mut f_hi,
    } = bracket;
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    let mut use_secant = true;
    for _ in 0..500 {
        let width = hi - lo;
        let mid = lo + 0.5 * width;
        let mut x = mid;
        if use_secant && f_hi != f_lo {
            let s = lo - f_lo * (hi - lo) / (f_hi - f_lo);
            if s > lo + 0.05 * width && s < hi - 0.05 * width {
                x = s;
            }
        }
        let fx = f(x);
        if !fx.is_finite() {
            return Err(Error::NumericalFailure(format!("non-finite function value at {x}")));
        }
        if fx.abs() <= tol {
            return Ok(x);
        }
        let shrink_before = hi - lo;
        if (fx < 0.0) == (f_lo < 0.0) {
            lo = x;
            f_lo = fx;
        } else {
            hi = x;
            f_hi = fx;
        }
        // alternate to midpoint if the secant step failed to halve
        use_secant = (hi - lo) < 0.5 * shrink_before || !use_secant;
        if hi - lo <= tol {
            return Ok(if f_lo.abs() < f_hi.abs() { lo } else { hi });
        }
    }
    Err(Error::NumericalFailure("root finder hit its iteration cap".into()))
}

/// Downhill simplex minimization with standard coefficients.
///
/// Returns the best point and its value. Used for low-dimensional local
/// refinement where the objective is cheap but not smooth.
pub fn nelder_mead(
    f: impl Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_evals: usize,
    ftol: f64,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i].abs() > 1e-3 { step * x[i].abs().max(1.0) } else { step };
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let mut evals = n + 1;
    let sort = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    while evals < max_evals {
        sort(&mut simplex);
        let spread = simplex[n].1 - simplex[0].1;
        if spread.abs() <= ftol * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + t * (simplex[n].0[j] - centroid[j]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = (0..n).map(|j| best[j] + 0.5 * (item.0[j] - best[j])).collect();
                    let v = f(&x);
                    *item = (x, v);
                }
                evals += n;
            }
        }
    }
    sort(&mut simplex);
    simplex.swap_remove(0)
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nr = rows.len();
    if nr == 0 {
        return Err(Error::domain("matrix has no rows"));
    }
    let nc = rows[0].len();
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::domain("ragged matrix rows"));
    }
    Ok(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Inverse of a symmetric positive definite matrix via its eigen-decomposition.
pub fn spd_inverse(s: &SymMatrix) -> Result<SymMatrix> {
    let e = sym_eig(s)?;
    if e.min() <= 0.0 {
        return Err(Error::domain("matrix is not positive definite"));
    }
    let d = Mat::from_diagonal(&Vector::from_iterator(
        s.order(),
        e.eigenvalues.iter().map(|l| 1.0 / l),
    ));
    Ok(SymMatrix::symmetrize(&e.eigenvectors * d * e.eigenvectors.transpose()))
}

impl serde::Serialize for SymMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for SymMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        SymMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serde adapters storing a general matrix as a list of rows.
pub mod rows_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::{mat_from_rows, mat_to_rows, Mat};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        mat_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        mat_from_rows(&rows).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<Mat>, s: S) -> Result<S::Ok, S::Error> {
            m.as_ref().map(mat_to_rows).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Mat>, D::Error> {
            Option::<Vec<Vec<f64>>>::deserialize(d)?
                .map(|rows| mat_from_rows(&rows).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}
