//! Euler–Maruyama simulation of sampled-data loops and impulsive SiDEs,
//! with Monte Carlo decay estimates.
//!
//! Every path draws its Gaussians from its own ChaCha stream keyed by the
//! master seed and the path index, in a fixed (step, channel) order, so an
//! ensemble is identical whatever the number of worker threads. Sampling
//! instants are drawn once per ensemble from a dedicated stream, so all
//! paths share one time grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{to_cps_form, CpsForm, GeneralSiDE, Model, SamplingSchedule, Segment};
use crate::numerics::{Mat, Vector};

/// Stream reserved for the sampling instants.
const INSTANT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt_sim: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub schedule: SamplingSchedule,
    pub store_stride: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.dt_sim > 0.0 && self.dt_sim.is_finite()) {
            return Err(Error::validation("dt_sim", "must be finite and > 0"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("horizon", "must be finite and > 0"));
        }
        if self.n_paths == 0 {
            return Err(Error::validation("n_paths", "must be at least 1"));
        }
        if self.store_stride == 0 {
            return Err(Error::validation("store_stride", "must be at least 1"));
        }
        let limit = self.schedule.underline_dt() / 10.0;
        if self.dt_sim > limit * (1.0 + 1e-12) {
            return Err(Error::validation(
                "dt_sim",
                format!("{} exceeds a tenth of the shortest sampling gap ({limit})", self.dt_sim),
            ));
        }
        Ok(())
    }

    /// Sampling instants shared by every path of an ensemble.
    pub fn instants(&self) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(INSTANT_STREAM);
        self.schedule.instants(self.horizon, &mut rng)
    }
}

/// Simulation grid: uniform `dt_sim` steps merged with the sampling instants.
#[derive(Clone, Debug, PartialEq)]
pub struct SimGrid {
    pub times: Vec<f64>,
    /// `true` where the point is a sampling instant (including `t = 0`).
    pub is_instant: Vec<bool>,
    pub instants: Vec<f64>,
    /// Indices into `times` that are stored.
    pub stored: Vec<usize>,
}

impl SimGrid {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let instants = cfg.instants()?;
        let snap = 1e-9 * cfg.dt_sim;
        let n_reg = (cfg.horizon / cfg.dt_sim).ceil() as usize;
        let regular = (1..=n_reg).map(|j| (j as f64 * cfg.dt_sim).min(cfg.horizon));
        let mut merged: Vec<(f64, bool)> = regular.map(|t| (t, false)).collect();
        merged.extend(instants.iter().skip(1).map(|&t| (t, true)));
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut times = vec![0.0];
        let mut is_instant = vec![true];
        for (t, inst) in merged {
            let last = times.len() - 1;
            if t - times[last] <= snap {
                // snap onto the instant rather than stepping a sliver
                if inst {
                    times[last] = t;
                    is_instant[last] = true;
                }
                continue;
            }
            times.push(t);
            is_instant.push(inst);
        }
        let last = times.len() - 1;
        let stored = (0..times.len())
            .filter(|&i| i % cfg.store_stride == 0 || i == last)
            .collect();
        Ok(SimGrid {
            times,
            is_instant,
            instants,
            stored,
        })
    }
}

fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

fn normals(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

fn finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One sampled-data path on the stored grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledPath {
    pub times: Vec<f64>,
    /// Stored states; entries after a divergence are NaN.
    pub xs: Vec<Vec<f64>>,
    pub diverged_at: Option<f64>,
    pub terminal_norm: f64,
}

fn nan_vec(n: usize) -> Vec<f64> {
    vec![f64::NAN; n]
}

fn run_sampled(cps: &CpsForm, x0: &Vector, grid: &SimGrid, seed: u64, path_index: u64) -> SampledPath {
    let mut rng = path_rng(seed, path_index);
    let n = x0.len();
    let mut x = x0.clone();
    let mut held = x0.clone();
    let mut xs = Vec::with_capacity(grid.stored.len());
    let mut next_store = 0;
    let mut store = |i: usize, x: &Vector, xs: &mut Vec<Vec<f64>>| {
        while next_store < grid.stored.len() && grid.stored[next_store] == i {
            xs.push(x.iter().copied().collect());
            next_store += 1;
        }
    };
    store(0, &x, &mut xs);
    let mut diverged_at = None;
    for i in 0..grid.times.len() - 1 {
        let dt = grid.times[i + 1] - grid.times[i];
        let sq = dt.sqrt();
        let cols = cps.diffusion(&x);
        let xi = normals(&mut rng, cols.len());
        let mut next = &x + cps.held_drift(&x, &held) * dt;
        for (c, z) in cols.iter().zip(&xi) {
            next += c * (sq * z);
        }
        x = next;
        if !finite(&x) {
            diverged_at = Some(grid.times[i + 1]);
            break;
        }
        if grid.is_instant[i + 1] {
            held = x.clone();
        }
        store(i + 1, &x, &mut xs);
    }
    let terminal_norm = if diverged_at.is_some() { f64::INFINITY } else { x.norm() };
    xs.resize_with(grid.stored.len(), || nan_vec(n));
    SampledPath {
        times: grid.stored.iter().map(|&i| grid.times[i]).collect(),
        xs,
        diverged_at,
        terminal_norm,
    }
}

fn model_x0(model: &Model) -> Result<Vector> {
    model
        .x0()
        .map(Vector::from_column_slice)
        .ok_or_else(|| Error::validation("x0", "initial state required for simulation"))
}

/// Euler–Maruyama path of the sampled-data loop; the held state is refreshed
/// exactly at the sampling instants.
pub fn simulate_sampled_path(model: &Model, cfg: &SimConfig, path_index: u64) -> Result<SampledPath> {
    let cps = to_cps_form(model)?;
    let grid = SimGrid::new(cfg)?;
    Ok(run_sampled(&cps, &model_x0(model)?, &grid, cfg.seed, path_index))
}

/// Discrete EM recursion `X_k = X_{k−1} + F X_{k−1} h + Σ Gⱼ X_{k−1} ΔBⱼ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePath {
    pub xs: Vec<Vector>,
    /// First step index with a non-finite state.
    pub diverged_at: Option<usize>,
}

pub fn simulate_em_discrete(f: &Mat, g: &[Mat], h: f64, n_steps: usize, x0: &Vector, seed: u64) -> Result<DiscretePath> {
    if !(h >= 0.0 && h.is_finite()) {
        return Err(Error::domain(format!("step must be finite and >= 0, got {h}")));
    }
    let n = x0.len();
    if f.shape() != (n, n) || g.iter().any(|gj| gj.shape() != (n, n)) {
        return Err(Error::domain("F and G must be n x n"));
    }
    let mut rng = path_rng(seed, 0);
    let sq = h.sqrt();
    let mut xs = Vec::with_capacity(n_steps + 1);
    xs.push(x0.clone());
    let mut diverged_at = None;
    for k in 1..=n_steps {
        let x = &xs[k - 1];
        let mut next = x + f * x * h;
        for gj in g {
            let z: f64 = StandardNormal.sample(&mut rng);
            next += gj * x * (sq * z);
        }
        if diverged_at.is_none() && !finite(&next) {
            diverged_at = Some(k);
        }
        xs.push(next);
    }
    Ok(DiscretePath { xs, diverged_at })
}

/// Path of a general SiDE on the stored grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidePath {
    pub times: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub diverged_at: Option<f64>,
}

/// Euler–Maruyama for `dx = f dt + g dB`, `dy = f̃ dt + g̃ dB` with jumps
/// `Δy = h̃_f(segment) + h̄_g(segment)·ξ̄` at each sampling instant.
///
/// `x` and `y` share the Brownian increments. The segment handed to the jump
/// maps holds every simulation-grid point since the previous impulse, ending
/// at the pre-jump state; jump Gaussians are drawn after the step's
/// diffusion Gaussians.
pub fn simulate_side(
    side: &dyn GeneralSiDE,
    cfg: &SimConfig,
    x0: &Vector,
    y0: &Vector,
    path_index: u64,
) -> Result<SidePath> {
    let (n, q, m) = side.dims();
    if x0.len() != n || y0.len() != q {
        return Err(Error::domain(format!("initial states must have sizes {n} and {q}")));
    }
    let grid = SimGrid::new(cfg)?;
    let mut rng = path_rng(cfg.seed, path_index);
    let cb = |time: f64| move |message: String| Error::Callback { time, message };
    let (mut x, mut y) = (x0.clone(), y0.clone());
    let (mut seg_t, mut seg_x, mut seg_y) = (vec![0.0], vec![x.clone()], vec![y.clone()]);
    let mut out = SidePath {
        times: grid.stored.iter().map(|&i| grid.times[i]).collect(),
        xs: Vec::with_capacity(grid.stored.len()),
        ys: Vec::with_capacity(grid.stored.len()),
        diverged_at: None,
    };
    let mut next_store = 0;
    let mut store = |i: usize, x: &Vector, y: &Vector, out: &mut SidePath| {
        while next_store < grid.stored.len() && grid.stored[next_store] == i {
            out.xs.push(x.iter().copied().collect());
            out.ys.push(y.iter().copied().collect());
            next_store += 1;
        }
    };
    store(0, &x, &y, &mut out);
    for i in 0..grid.times.len() - 1 {
        let (t, t1) = (grid.times[i], grid.times[i + 1]);
        let dt = t1 - t;
        let sq = dt.sqrt();
        let gx = side.g(t, &x, &y).map_err(cb(t))?;
        let gy = side.g_tilde(t, &x, &y).map_err(cb(t))?;
        if gx.len() != m || gy.len() != m {
            return Err(Error::Callback {
                time: t,
                message: format!("expected {m} diffusion columns"),
            });
        }
        let xi = normals(&mut rng, m);
        let mut nx = &x + side.f(t, &x, &y).map_err(cb(t))? * dt;
        let mut ny = &y + side.f_tilde(t, &x, &y).map_err(cb(t))? * dt;
        for j in 0..m {
            nx += &gx[j] * (sq * xi[j]);
            ny += &gy[j] * (sq * xi[j]);
        }
        x = nx;
        y = ny;
        seg_t.push(t1);
        seg_x.push(x.clone());
        seg_y.push(y.clone());
        if grid.is_instant[i + 1] {
            let seg = Segment {
                times: &seg_t,
                xs: &seg_x,
                ys: &seg_y,
            };
            let mut dy = side.jump_drift(&seg).map_err(cb(t1))?;
            if let Some(hg) = side.jump_noise(&seg).map_err(cb(t1))? {
                let z = Vector::from_vec(normals(&mut rng, hg.ncols()));
                dy += hg * z;
            }
            if dy.len() != q {
                return Err(Error::Callback {
                    time: t1,
                    message: format!("jump has size {}, expected {q}", dy.len()),
                });
            }
            y += dy;
            (seg_t, seg_x, seg_y) = (vec![t1], vec![x.clone()], vec![y.clone()]);
        }
        if !(finite(&x) && finite(&y)) {
            out.diverged_at = Some(t1);
            break;
        }
        store(i + 1, &x, &y, &mut out);
    }
    out.xs.resize_with(grid.stored.len(), || nan_vec(n));
    out.ys.resize_with(grid.stored.len(), || nan_vec(q));
    Ok(out)
}

// ---------------------------------------------------------------------------
// ensembles

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathDiagnostics {
    pub diverged_at: Option<f64>,
    pub terminal_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub times: Vec<f64>,
    pub instants: Vec<f64>,
    /// `paths[p][k]` is the state of path `p` at `times[k]`.
    pub paths: Vec<Vec<Vec<f64>>>,
    pub diagnostics: Vec<PathDiagnostics>,
}

/// Pairwise summation in index order.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub mean_sq_norm: Vec<f64>,
    pub n_alive: Vec<usize>,
}

impl TrajectoryEnsemble {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn diverged_count(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.diverged_at.is_some()).count()
    }

    /// `Ê|x(t)|²` over the paths still finite at `t`.
    pub fn stats(&self) -> EnsembleStats {
        let mut mean_sq_norm = Vec::with_capacity(self.times.len());
        let mut n_alive = Vec::with_capacity(self.times.len());
        for k in 0..self.times.len() {
            let sq: Vec<f64> = self
                .paths
                .iter()
                .map(|p| p[k].iter().map(|v| v * v).sum::<f64>())
                .filter(|v| v.is_finite())
                .collect();
            n_alive.push(sq.len());
            mean_sq_norm.push(if sq.is_empty() { f64::NAN } else { pairwise_sum(&sq) / sq.len() as f64 });
        }
        EnsembleStats {
            times: self.times.clone(),
            mean_sq_norm,
            n_alive,
        }
    }

    /// CSV with header `t,path,x1..xn`.
    pub fn trajectory_csv(&self) -> Result<String> {
        let n = self.paths.first().and_then(|p| p.first()).map_or(0, Vec::len);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string(), "path".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for (p, path) in self.paths.iter().enumerate() {
            for (t, x) in self.times.iter().zip(path) {
                let mut rec = vec![t.to_string(), p.to_string()];
                rec.extend(x.iter().map(f64::to_string));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        csv_finish(w)
    }

    /// CSV with header `t,mean_sq_norm,n_alive`.
    pub fn stats_csv(&self) -> Result<String> {
        let s = self.stats();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "mean_sq_norm", "n_alive"]).map_err(csv_err)?;
        for k in 0..s.times.len() {
            w.write_record([s.times[k].to_string(), s.mean_sq_norm[k].to_string(), s.n_alive[k].to_string()])
                .map_err(csv_err)?;
        }
        csv_finish(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn csv_finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// `cfg.n_paths` independent paths, computed in parallel.
pub fn run_ensemble(model: &Model, cfg: &SimConfig) -> Result<TrajectoryEnsemble> {
    let cps = to_cps_form(model)?;
    let x0 = model_x0(model)?;
    let grid = SimGrid::new(cfg)?;
    let paths: Vec<SampledPath> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|p| run_sampled(&cps, &x0, &grid, cfg.seed, p))
        .collect();
    Ok(TrajectoryEnsemble {
        times: grid.stored.iter().map(|&i| grid.times[i]).collect(),
        instants: grid.instants,
        diagnostics: paths
            .iter()
            .map(|p| PathDiagnostics {
                diverged_at: p.diverged_at,
                terminal_norm: p.terminal_norm,
            })
            .collect(),
        paths: paths.into_iter().map(|p| p.xs).collect(),
    })
}

// ---------------------------------------------------------------------------
// estimators

const MIN_FIT_POINTS: usize = 10;
const CONFIRM_R2: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayEstimate {
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub n_points: usize,
}

impl DecayEstimate {
    pub fn decay_confirmed(&self) -> bool {
        self.rate < 0.0 && self.r_squared >= CONFIRM_R2
    }
}

/// Default fitting window `[0.2·H, H]`.
pub fn default_window(ens: &TrajectoryEnsemble) -> (f64, f64) {
    let h = ens.times.last().copied().unwrap_or(0.0);
    (0.2 * h, h)
}

/// Least-squares slope of `ln Ê|x(t)|²` over the window.
pub fn estimate_ms_decay(ens: &TrajectoryEnsemble, window: Option<(f64, f64)>) -> Result<DecayEstimate> {
    let window = window.unwrap_or_else(|| default_window(ens));
    let horizon = ens.times.last().copied().unwrap_or(0.0);
    if !(window.0 >= 0.0 && window.0 < window.1 && window.1 <= horizon * (1.0 + 1e-12)) {
        return Err(Error::domain(format!("window {window:?} outside [0, {horizon}]")));
    }
    let s = ens.stats();
    let pts: Vec<(f64, f64)> = s
        .times
        .iter()
        .zip(&s.mean_sq_norm)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .map(|(&t, &m)| (t, m))
        .collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::domain(format!(
            "{} grid points in the window, need {MIN_FIT_POINTS}",
            pts.len()
        )));
    }
    if pts.iter().any(|(_, m)| !(*m > 0.0)) {
        return Err(Error::DegenerateEnsemble(
            "mean-square norm is zero or undefined inside the window".into(),
        ));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let lm = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(t, m) in &pts {
        let (dx, dy) = (t - tm, m.ln() - lm);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let rate = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(DecayEstimate {
        rate,
        intercept: lm - rate * tm,
        r_squared,
        window,
        n_points: pts.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PathExponent {
    Finite(f64),
    /// The path sits exactly at zero.
    NegInfinity,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsExponentSummary {
    pub t: f64,
    pub exponents: Vec<PathExponent>,
    pub median: f64,
    pub max: f64,
    pub n_neg_infinite: usize,
    pub n_diverged: usize,
}

/// Per-path `(1/t)·ln|x(t)|` at the last stored time not after `window_end`.
pub fn estimate_as_exponent(ens: &TrajectoryEnsemble, window_end: Option<f64>) -> Result<AsExponentSummary> {
    let end = window_end.unwrap_or_else(|| ens.times.last().copied().unwrap_or(0.0));
    if !(end > 0.0) {
        return Err(Error::domain("window end must be > 0"));
    }
    let k = ens
        .times
        .iter()
        .rposition(|&t| t <= end * (1.0 + 1e-12) && t > 0.0)
        .ok_or_else(|| Error::domain("no stored time in (0, window end]"))?;
    let t = ens.times[k];
    let exponents: Vec<PathExponent> = ens
        .paths
        .iter()
        .map(|p| {
            let norm = p[k].iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                PathExponent::Diverged
            } else if norm == 0.0 {
                PathExponent::NegInfinity
            } else {
                PathExponent::Finite(norm.ln() / t)
            }
        })
        .collect();
    let mut finite: Vec<f64> = exponents
        .iter()
        .filter_map(|e| match e {
            PathExponent::Finite(v) => Some(*v),
            _ => None,
        })
        .collect();
    let n_neg_infinite = exponents.iter().filter(|e| **e == PathExponent::NegInfinity).count();
    let n_diverged = exponents.iter().filter(|e| **e == PathExponent::Diverged).count();
    if finite.is_empty() {
        return Err(Error::DegenerateEnsemble("no path with a finite exponent".into()));
    }
    finite.sort_by(f64::total_cmp);
    let mid = finite.len() / 2;
    let median = if finite.len() % 2 == 1 {
        finite[mid]
    } else {
        0.5 * (finite[mid - 1] + finite[mid])
    };
    Ok(AsExponentSummary {
        t,
        median,
        max: *finite.last().expect("non-empty"),
        exponents,
        n_neg_infinite,
        n_diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CallbackResult, Feedback, LinearSampledModel};

    fn scalar(a: f64, sigma: f64, x0: f64) -> Model {
        Model::Linear(LinearSampledModel {
            name: "scalar".into(),
            a: Mat::from_element(1, 1, a),
            diffusion: if sigma == 0.0 { vec![] } else { vec![Mat::from_element(1, 1, sigma)] },
            feedback: Feedback::Closed(Mat::zeros(1, 1)),
            x0: Some(vec![x0]),
        })
    }

    fn cfg(dt_sim: f64, horizon: f64, n_paths: usize) -> SimConfig {
        SimConfig {
            dt_sim,
            horizon,
            n_paths,
            seed: 7,
            schedule: SamplingSchedule::Periodic { dt: 0.1 },
            store_stride: 1,
        }
    }

    fn ex1_closed() -> Model {
        let m = |r: &[f64]| Mat::from_row_slice(2, 2, r);
        Model::Linear(LinearSampledModel {
            name: "ex1".into(),
            a: m(&[1.0, -1.0, 1.0, -5.0]),
            diffusion: vec![m(&[1.0, 1.0, 1.0, -1.0])],
            feedback: Feedback::Closed(m(&[-10.0, 0.0, 0.0, 0.0])),
            x0: Some(vec![-2.0, 1.0]),
        })
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1e-3, 1.0, 1).validate().is_ok());
        let mut c = cfg(0.02, 1.0, 1);
        assert!(matches!(c.validate(), Err(Error::Validation { .. })));
        c.dt_sim = 0.01;
        assert!(c.validate().is_ok());
        c.store_stride = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_hits_every_instant() {
        let c = SimConfig {
            schedule: SamplingSchedule::Periodic { dt: 0.0234 },
            ..cfg(1e-3, 1.0, 1)
        };
        let g = SimGrid::new(&c).unwrap();
        assert_eq!(g.instants.len(), 43);
        for t in &g.instants {
            let i = g.times.iter().position(|s| s == t).expect("instant on grid");
            assert!(g.is_instant[i]);
        }
        assert_eq!(*g.times.last().unwrap(), 1.0);
        assert!(g.times.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 1e-3 * (1.0 + 1e-12)));
    }

    #[test]
    fn deterministic_flow_matches_exponential() {
        let m = Model::Linear(LinearSampledModel {
            x0: Some(vec![1.0, 1.0]),
            a: -Mat::identity(2, 2),
            diffusion: vec![],
            feedback: Feedback::Closed(Mat::zeros(2, 2)),
            name: "decay".into(),
        });
        let p = simulate_sampled_path(&m, &cfg(1e-3, 2.0, 1), 0).unwrap();
        let err = p
            .times
            .iter()
            .zip(&p.xs)
            .map(|(t, x)| (x[0] - (-t).exp()).abs().max((x[1] - (-t).exp()).abs()))
            .fold(0.0, f64::max);
        assert!(err < 5e-3, "{err}");
    }

    #[test]
    fn zero_initial_state_stays_zero() {
        let m = ex1_closed().with_x0(vec![0.0, 0.0]).unwrap();
        let p = simulate_sampled_path(&m, &cfg(1e-3, 1.0, 1), 3).unwrap();
        assert!(p.xs.iter().all(|x| x.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn uncontrolled_first_system_grows() {
        // A = [[1,−1],[1,−5]]: trace −4, det −4, so one eigenvalue is positive
        let a = Mat::from_row_slice(2, 2, &[1.0, -1.0, 1.0, -5.0]);
        let ev = a.complex_eigenvalues();
        assert!(ev.iter().any(|e| e.re > 0.0));
        let open = Model::Linear(LinearSampledModel {
            feedback: Feedback::Closed(Mat::zeros(2, 2)),
            ..match ex1_closed() {
                Model::Linear(l) => l,
                _ => unreachable!(),
            }
        });
        let ens = run_ensemble(&open, &cfg(1e-3, 5.0, 20)).unwrap();
        let est = estimate_ms_decay(&ens, None).unwrap();
        assert!(est.rate > 0.0 || ens.diverged_count() > 0);
    }

    #[test]
    fn held_input_is_piecewise_constant() {
        // with A = 0, G = 0 the slope between instants is B̄·x(t_k) exactly
        let m = Model::Linear(LinearSampledModel {
            name: "zoh".into(),
            a: Mat::zeros(1, 1),
            diffusion: vec![],
            feedback: Feedback::Closed(Mat::from_element(1, 1, -1.0)),
            x0: Some(vec![1.0]),
        });
        let c = SimConfig {
            schedule: SamplingSchedule::Periodic { dt: 0.25 },
            ..cfg(0.01, 1.0, 1)
        };
        let p = simulate_sampled_path(&m, &c, 0).unwrap();
        // x(t_{k+1}) = (1 − 0.25)·x(t_k)
        for k in 0..=4 {
            let i = p.times.iter().position(|t| (*t - 0.25 * k as f64).abs() < 1e-12).unwrap();
            assert!((p.xs[i][0] - 0.75f64.powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_em_cases() {
        let f = Mat::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
        let x0 = Vector::from_vec(vec![1.0, -1.0]);
        let p = simulate_em_discrete(&f, &[], 0.1, 20, &x0, 0).unwrap();
        let step = Mat::identity(2, 2) + &f * 0.1;
        let mut x = x0.clone();
        for k in 1..=20 {
            assert_eq!(p.xs[k], &p.xs[k - 1] + &f * &p.xs[k - 1] * 0.1);
            x = &step * x;
            assert!((&p.xs[k] - &x).amax() < 1e-14);
        }
        assert_eq!(p, simulate_em_discrete(&f, &[], 0.1, 20, &x0, 9).unwrap());
        let g = vec![Mat::identity(2, 2)];
        let p = simulate_em_discrete(&f, &g, 0.0, 5, &x0, 1).unwrap();
        assert!(p.xs.iter().all(|x| *x == x0));
    }

    #[test]
    fn discrete_em_mean_matches_exact() {
        let (a, s, h, n) = (-0.5, 0.8, 0.05, 40);
        let x0 = Vector::from_vec(vec![1.0]);
        let f = Mat::from_element(1, 1, a);
        let g = vec![Mat::from_element(1, 1, s)];
        let finals: Vec<f64> = (0..100_000u64)
            .into_par_iter()
            .map(|seed| simulate_em_discrete(&f, &g, h, n, &x0, seed).unwrap().xs[n][0])
            .collect();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (finals.len() - 1) as f64;
        let se = (var / finals.len() as f64).sqrt();
        let exact = (1.0 + a * h).powi(n as i32);
        assert!((mean - exact).abs() < 3.0 * se, "{mean} {exact} {se}");
    }

    #[test]
    fn weak_order_halving() {
        let (a, s, x0, t_end) = (1.0, 0.1, 1.0, 1.0);
        let exact = x0 * f64::exp(a * t_end);
        let f = Mat::from_element(1, 1, a);
        let g = vec![Mat::from_element(1, 1, s)];
        let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&h| {
                let n = (t_end / h as f64).round() as usize;
                let sum: f64 = (0..100_000u64)
                    .into_par_iter()
                    .map(|seed| simulate_em_discrete(&f, &g, h, n, &Vector::from_vec(vec![x0]), seed).unwrap().xs[n][0])
                    .collect::<Vec<_>>()
                    .iter()
                    .sum();
                (sum / 1e5 - exact).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.4..=2.6).contains(&ratio), "{errs:?}");
        }
    }

    /// Sampled-data loop written with the segment-based jump `x(t_{k−1}) − x(t_k⁻)`.
    struct SegmentJump(CpsForm);

    impl GeneralSiDE for SegmentJump {
        fn dims(&self) -> (usize, usize, usize) {
            self.0.dims()
        }
        fn f(&self, t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vector> {
            self.0.f(t, x, y)
        }
        fn g(&self, t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vec<Vector>> {
            self.0.g(t, x, y)
        }
        fn f_tilde(&self, t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vector> {
            self.0.f_tilde(t, x, y)
        }
        fn g_tilde(&self, t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vec<Vector>> {
            self.0.g_tilde(t, x, y)
        }
        fn jump_drift(&self, seg: &Segment<'_>) -> CallbackResult<Vector> {
            Ok(&seg.xs[0] - seg.x_minus())
        }
    }

    #[test]
    fn side_reproduces_sampled_path() {
        let model = ex1_closed();
        let c = SimConfig {
            schedule: SamplingSchedule::Periodic { dt: 0.0234 },
            ..cfg(1e-3, 1.0, 1)
        };
        let direct = simulate_sampled_path(&model, &c, 4).unwrap();
        let x0 = Vector::from_vec(vec![-2.0, 1.0]);
        for side in [
            Box::new(to_cps_form(&model).unwrap()) as Box<dyn GeneralSiDE>,
            Box::new(SegmentJump(to_cps_form(&model).unwrap())),
        ] {
            let s = simulate_side(side.as_ref(), &c, &x0, &Vector::zeros(2), 4).unwrap();
            for (a, b) in direct.xs.iter().zip(&s.xs) {
                for (u, v) in a.iter().zip(b) {
                    assert!((u - v).abs() < 1e-12, "{u} {v}");
                }
            }
        }
    }

    struct Sawtooth {
        noise: Option<Mat>,
    }

    impl GeneralSiDE for Sawtooth {
        fn dims(&self) -> (usize, usize, usize) {
            (1, 1, 0)
        }
        fn f(&self, _: f64, _: &Vector, _: &Vector) -> CallbackResult<Vector> {
            Ok(Vector::zeros(1))
        }
        fn g(&self, _: f64, _: &Vector, _: &Vector) -> CallbackResult<Vec<Vector>> {
            Ok(vec![])
        }
        fn f_tilde(&self, _: f64, _: &Vector, _: &Vector) -> CallbackResult<Vector> {
            Ok(Vector::from_element(1, if self.noise.is_some() { 0.0 } else { 1.0 }))
        }
        fn g_tilde(&self, _: f64, _: &Vector, _: &Vector) -> CallbackResult<Vec<Vector>> {
            Ok(vec![])
        }
        fn jump_drift(&self, seg: &Segment<'_>) -> CallbackResult<Vector> {
            if self.noise.is_some() {
                Ok(Vector::zeros(1))
            } else {
                Ok(-seg.y_minus())
            }
        }
        fn jump_noise(&self, _: &Segment<'_>) -> CallbackResult<Option<Mat>> {
            Ok(self.noise.clone())
        }
    }

    #[test]
    fn side_sawtooth_resets() {
        let c = SimConfig {
            schedule: SamplingSchedule::Periodic { dt: 0.25 },
            ..cfg(0.01, 1.0, 1)
        };
        let s = simulate_side(&Sawtooth { noise: None }, &c, &Vector::zeros(1), &Vector::zeros(1), 0).unwrap();
        for (t, y) in s.times.iter().zip(&s.ys) {
            let phase = t - 0.25 * (t / 0.25 + 1e-9).floor();
            assert!((y[0] - phase).abs() < 1e-9, "{t} {}", y[0]);
        }
    }

    #[test]
    fn side_jump_noise_variance() {
        let hg = Mat::from_row_slice(1, 2, &[0.6, 0.8]);
        let c = SimConfig {
            schedule: SamplingSchedule::Periodic { dt: 0.5 },
            ..cfg(0.05, 0.5, 1)
        };
        let side = Sawtooth { noise: Some(hg) };
        let ys: Vec<f64> = (0..100_000u64)
            .into_par_iter()
            .map(|p| {
                let s = simulate_side(&side, &c, &Vector::zeros(1), &Vector::zeros(1), p).unwrap();
                s.ys.last().unwrap()[0]
            })
            .collect();
        let n = ys.len() as f64;
        let var = ys.iter().map(|y| y * y).sum::<f64>() / n;
        // Var of the sample variance of N(0,1) is 2/n
        let se = (2.0 / n).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "{var}");
    }

    struct Failing;

    impl GeneralSiDE for Failing {
        fn dims(&self) -> (usize, usize, usize) {
            (1, 1, 0)
        }
        fn f(&self, t: f64, _: &Vector, _: &Vector) -> CallbackResult<Vector> {
            if t > 0.3 { Err("boom".into()) } else { Ok(Vector::zeros(1)) }
        }
        fn g(&self, _: f64, _: &Vector, _: &Vector) -> CallbackResult<Vec<Vector>> {
            Ok(vec![])
        }
        fn f_tilde(&self, _: f64, _: &Vector, _: &Vector) -> CallbackResult<Vector> {
            Ok(Vector::zeros(1))
        }
        fn g_tilde(&self, _: f64, _: &Vector, _: &Vector) -> CallbackResult<Vec<Vector>> {
            Ok(vec![])
        }
        fn jump_drift(&self, _: &Segment<'_>) -> CallbackResult<Vector> {
            Ok(Vector::zeros(1))
        }
    }

    #[test]
    fn callback_failure_is_time_stamped() {
        let r = simulate_side(&Failing, &cfg(0.01, 1.0, 1), &Vector::zeros(1), &Vector::zeros(1), 0);
        match r {
            Err(Error::Callback { time, .. }) => assert!(time > 0.3 && time < 0.32),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ensemble_single_path_and_determinism() {
        let model = ex1_closed();
        let c = cfg(1e-3, 0.5, 1);
        let ens = run_ensemble(&model, &c).unwrap();
        let single = simulate_sampled_path(&model, &c, 0).unwrap();
        assert_eq!(ens.paths[0], single.xs);

        let c = SimConfig {
            schedule: SamplingSchedule::UniformRandom { lo: 0.01, hi: 0.03 },
            ..cfg(1e-3, 0.5, 16)
        };
        let a = run_ensemble(&model, &c).unwrap();
        let b = run_ensemble(&model, &c).unwrap();
        assert_eq!(a, b);
        let pool = |k| rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap();
        let one = pool(1).install(|| run_ensemble(&model, &c).unwrap());
        let four = pool(4).install(|| run_ensemble(&model, &c).unwrap());
        assert_eq!(one, four);
        assert_eq!(a, one);
    }

    #[test]
    fn ms_decay_deterministic_and_degenerate() {
        let ens = run_ensemble(&scalar(-1.0, 0.0, 1.0), &cfg(1e-3, 2.0, 2)).unwrap();
        let est = estimate_ms_decay(&ens, None).unwrap();
        assert!((est.rate + 2.0).abs() < 0.1, "{est:?}");
        assert!(est.decay_confirmed());
        let zero = run_ensemble(&scalar(-1.0, 0.5, 0.0), &cfg(1e-3, 1.0, 4)).unwrap();
        assert!(matches!(estimate_ms_decay(&zero, None), Err(Error::DegenerateEnsemble(_))));
    }

    #[test]
    fn gbm_moment_rate_and_exponent() {
        // E x² = e^{(2a+σ²)t}; median of ln|x(t)|/t is a − σ²/2
        let c = SimConfig {
            store_stride: 10,
            ..cfg(1e-3, 0.25, 10_000)
        };
        let ens = run_ensemble(&scalar(1.0, 2.0, 1.0), &c).unwrap();
        let est = estimate_ms_decay(&ens, Some((0.05, 0.25))).unwrap();
        assert!((est.rate - 6.0).abs() < 0.6, "{est:?}");
        let ex = estimate_as_exponent(&ens, None).unwrap();
        assert!((ex.median + 1.0).abs() < 0.1, "{}", ex.median);
    }

    #[test]
    fn as_exponent_special_cases() {
        let ens = run_ensemble(&scalar(-1.0, 0.0, 1.0), &cfg(1e-3, 1.0, 1)).unwrap();
        let ex = estimate_as_exponent(&ens, None).unwrap();
        // EM exponent ln(1 − δ)/δ for the discretized flow
        assert!((ex.median - (1.0 - 1e-3f64).ln() / 1e-3).abs() < 1e-9, "{}", ex.median);
        assert!((ex.median + 1.0).abs() < 1e-3);
        let mut mixed = ens.clone();
        mixed.paths.push(vec![vec![0.0]; ens.times.len()]);
        mixed.diagnostics.push(mixed.diagnostics[0].clone());
        let ex = estimate_as_exponent(&mixed, None).unwrap();
        assert_eq!(ex.n_neg_infinite, 1);
        assert_eq!(ex.exponents[1], PathExponent::NegInfinity);
        assert!((ex.median + 1.0).abs() < 1e-3);
    }

    #[test]
    fn csv_headers() {
        let ens = run_ensemble(&ex1_closed(), &SimConfig {
            store_stride: 100,
            ..cfg(1e-3, 0.5, 2)
        })
        .unwrap();
        let t = ens.trajectory_csv().unwrap();
        assert!(t.starts_with("t,path,x1,x2\n"));
        assert_eq!(t.lines().count(), 1 + 2 * ens.times.len());
        let s = ens.stats_csv().unwrap();
        assert!(s.starts_with("t,mean_sq_norm,n_alive\n"));
    }
}
