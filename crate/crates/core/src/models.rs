//! Plants, feedback structure, sampling schedules and the physical/cyber split.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mat_from_rows, mat_to_rows, Mat, Vector};

/// How the sampled state enters the drift.
#[derive(Clone, Debug, PartialEq)]
pub enum Feedback {
    /// Closed-loop sampled feedback matrix `B̄`.
    Closed(Mat),
    /// Input matrix `B̂` with an optional gain `K̂`; `B̄ = B̂K̂`.
    Input { b_hat: Mat, k_hat: Option<Mat> },
}

/// `dx = [Ax + B̄x(t_*)]dt + Σⱼ Gⱼx dBⱼ` with `x(t_*)` held between samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSampledModel {
    pub name: String,
    pub a: Mat,
    pub diffusion: Vec<Mat>,
    pub feedback: Feedback,
    pub x0: Option<Vec<f64>>,
}

impl LinearSampledModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Number of noise channels.
    pub fn m(&self) -> usize {
        self.diffusion.len()
    }

    /// `B̄`, if the gain is resolved.
    pub fn b_bar(&self) -> Option<Mat> {
        match &self.feedback {
            Feedback::Closed(b) => Some(b.clone()),
            Feedback::Input { b_hat, k_hat: Some(k) } => Some(b_hat * k),
            Feedback::Input { k_hat: None, .. } => None,
        }
    }

    pub fn b_hat(&self) -> Option<&Mat> {
        match &self.feedback {
            Feedback::Input { b_hat, .. } => Some(b_hat),
            Feedback::Closed(_) => None,
        }
    }

    /// True when the file carries `B̂` but no gain yet.
    pub fn is_design_mode(&self) -> bool {
        matches!(self.feedback, Feedback::Input { k_hat: None, .. })
    }

    /// `A + B̄`, the drift when sampling is continuous.
    pub fn closed_loop(&self) -> Result<Mat> {
        Ok(&self.a + self.require_b_bar()?)
    }

    pub fn require_b_bar(&self) -> Result<Mat> {
        self.b_bar()
            .ok_or_else(|| Error::validation("K_hat", "feedback gain is not resolved"))
    }

    /// Copy with the gain replaced. Requires an input matrix.
    pub fn with_gain(&self, k: Mat) -> Result<Self> {
        let b_hat = self
            .b_hat()
            .ok_or_else(|| Error::validation("B_hat", "model has no input matrix"))?
            .clone();
        if k.nrows() != b_hat.ncols() || k.ncols() != self.n() {
            return Err(Error::validation(
                "K_hat",
                format!("expected {}x{}, got {}x{}", b_hat.ncols(), self.n(), k.nrows(), k.ncols()),
            ));
        }
        Ok(LinearSampledModel {
            feedback: Feedback::Input { b_hat, k_hat: Some(k) },
            ..self.clone()
        })
    }
}

/// Planar plant `ẋ = Āx + φ(x, u) + B̂u` with `φ = [¼x₁ sin(ux₂), x₁ sin(ux₂)]`,
/// `Ā = [[¼, 1], [0, 0]]`, `B̂ = [0, 1]ᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearPlanarModel {
    pub name: String,
    /// 1×2 gain `K̂`, absent in design mode.
    pub gain: Option<Mat>,
    pub x0: Option<Vec<f64>>,
}

impl NonlinearPlanarModel {
    pub fn a_bar() -> Mat {
        Mat::from_row_slice(2, 2, &[0.25, 1.0, 0.0, 0.0])
    }

    pub fn b_hat() -> Mat {
        Mat::from_row_slice(2, 1, &[0.0, 1.0])
    }

    /// Envelope `E₁` with `|φ(x, u)| ≤ |E₁x|` componentwise in any quadratic norm.
    pub fn e1() -> Mat {
        Mat::from_row_slice(2, 2, &[0.25, 0.0, 1.0, 0.0])
    }

    /// `φ(x, u)` for input value `u`.
    pub fn phi(x: &Vector, u: f64) -> Vector {
        let s = x[0] * (u * x[1]).sin();
        Vector::from_row_slice(&[0.25 * s, s])
    }

    pub fn require_gain(&self) -> Result<&Mat> {
        self.gain
            .as_ref()
            .ok_or_else(|| Error::validation("K_hat", "feedback gain is not resolved"))
    }

    /// Open-loop drift at state `x` under input `u`.
    pub fn drift(x: &Vector, u: f64) -> Vector {
        Self::a_bar() * x + Self::phi(x, u) + Self::b_hat() * u
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Linear(LinearSampledModel),
    Planar(NonlinearPlanarModel),
}

impl Model {
    pub fn name(&self) -> &str {
        match self {
            Model::Linear(m) => &m.name,
            Model::Planar(m) => &m.name,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Model::Linear(m) => m.n(),
            Model::Planar(_) => 2,
        }
    }

    pub fn x0(&self) -> Option<&[f64]> {
        match self {
            Model::Linear(m) => m.x0.as_deref(),
            Model::Planar(m) => m.x0.as_deref(),
        }
    }

    pub fn gain(&self) -> Option<Mat> {
        match self {
            Model::Linear(m) => match &m.feedback {
                Feedback::Input { k_hat, .. } => k_hat.clone(),
                Feedback::Closed(_) => None,
            },
            Model::Planar(m) => m.gain.clone(),
        }
    }

    pub fn is_design_mode(&self) -> bool {
        match self {
            Model::Linear(m) => m.is_design_mode(),
            Model::Planar(m) => m.gain.is_none(),
        }
    }

    pub fn with_gain(&self, k: Mat) -> Result<Model> {
        match self {
            Model::Linear(m) => Ok(Model::Linear(m.with_gain(k)?)),
            Model::Planar(m) => {
                if k.shape() != (1, 2) {
                    return Err(Error::validation("K_hat", "planar gain must be 1x2"));
                }
                Ok(Model::Planar(NonlinearPlanarModel {
                    gain: Some(k),
                    ..m.clone()
                }))
            }
        }
    }

    pub fn with_x0(&self, x0: Vec<f64>) -> Result<Model> {
        if x0.len() != self.n() {
            return Err(Error::validation("x0", format!("expected length {}", self.n())));
        }
        let mut out = self.clone();
        match &mut out {
            Model::Linear(m) => m.x0 = Some(x0),
            Model::Planar(m) => m.x0 = Some(x0),
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from_model(self)).expect("model serializes")
    }
}

// ---------------------------------------------------------------------------
// file format

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NonlinearityTag {
    #[serde(rename = "type")]
    kind: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    n: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(default)]
    diffusion: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "B_bar", default, skip_serializing_if = "Option::is_none")]
    b_bar: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B_hat", default, skip_serializing_if = "Option::is_none")]
    b_hat: Option<Vec<Vec<f64>>>,
    #[serde(rename = "K_hat", default, skip_serializing_if = "Option::is_none")]
    k_hat: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nonlinearity: Option<NonlinearityTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x0: Option<Vec<f64>>,
}

fn matrix_field(path: &str, rows: &[Vec<f64>], nr: usize, nc: Option<usize>) -> Result<Mat> {
    let m = mat_from_rows(rows).map_err(|e| Error::validation(path, e.to_string()))?;
    if m.nrows() != nr || nc.is_some_and(|c| m.ncols() != c) {
        let want = nc.map_or(format!("{nr}xk"), |c| format!("{nr}x{c}"));
        return Err(Error::validation(
            path,
            format!("expected {want}, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(path, "non-finite entry"));
    }
    Ok(m)
}

impl ModelFile {
    fn into_model(self) -> Result<Model> {
        let n = self.n;
        if n == 0 {
            return Err(Error::validation("n", "state dimension must be positive"));
        }
        let a = matrix_field("A", &self.a, n, Some(n))?;
        let diffusion = self
            .diffusion
            .iter()
            .enumerate()
            .map(|(j, g)| matrix_field(&format!("diffusion[{j}]"), g, n, Some(n)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(x0) = &self.x0 {
            if x0.len() != n || x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("x0", format!("expected {n} finite entries")));
            }
        }
        let feedback = match (&self.b_bar, &self.b_hat, &self.k_hat) {
            (Some(bb), None, None) => Feedback::Closed(matrix_field("B_bar", bb, n, Some(n))?),
            (None, Some(bh), k) => {
                let b_hat = matrix_field("B_hat", bh, n, None)?;
                let k_hat = k
                    .as_ref()
                    .map(|k| matrix_field("K_hat", k, b_hat.ncols(), Some(n)))
                    .transpose()?;
                Feedback::Input { b_hat, k_hat }
            }
            (None, None, Some(_)) => return Err(Error::validation("K_hat", "K_hat requires B_hat")),
            (None, None, None) => {
                return Err(Error::validation("B_bar", "one of B_bar or B_hat is required"))
            }
            (Some(_), _, _) => {
                return Err(Error::validation("B_bar", "B_bar excludes B_hat and K_hat"))
            }
        };
        match self.nonlinearity {
            None => Ok(Model::Linear(LinearSampledModel {
                name: self.name,
                a,
                diffusion,
                feedback,
                x0: self.x0,
            })),
            Some(tag) if tag.kind == "planar_sin" => {
                if n != 2 {
                    return Err(Error::validation("n", "planar_sin requires n = 2"));
                }
                if a != NonlinearPlanarModel::a_bar() {
                    return Err(Error::validation("A", "planar_sin requires A = [[0.25, 1], [0, 0]]"));
                }
                if diffusion.iter().any(|g| g.iter().any(|v| *v != 0.0)) {
                    return Err(Error::validation("diffusion", "planar_sin plant is deterministic"));
                }
                let Feedback::Input { b_hat, k_hat } = feedback else {
                    return Err(Error::validation("B_hat", "planar_sin requires B_hat = [[0], [1]]"));
                };
                if b_hat != NonlinearPlanarModel::b_hat() {
                    return Err(Error::validation("B_hat", "planar_sin requires B_hat = [[0], [1]]"));
                }
                Ok(Model::Planar(NonlinearPlanarModel {
                    name: self.name,
                    gain: k_hat,
                    x0: self.x0,
                }))
            }
            Some(tag) => Err(Error::validation(
                "nonlinearity.type",
                format!("unknown nonlinearity `{}`", tag.kind),
            )),
        }
    }

    fn from_model(model: &Model) -> Self {
        match model {
            Model::Linear(m) => {
                let (b_bar, b_hat, k_hat) = match &m.feedback {
                    Feedback::Closed(b) => (Some(mat_to_rows(b)), None, None),
                    Feedback::Input { b_hat, k_hat } => {
                        (None, Some(mat_to_rows(b_hat)), k_hat.as_ref().map(mat_to_rows))
                    }
                };
                ModelFile {
                    name: m.name.clone(),
                    n: m.n(),
                    a: mat_to_rows(&m.a),
                    diffusion: m.diffusion.iter().map(mat_to_rows).collect(),
                    b_bar,
                    b_hat,
                    k_hat,
                    nonlinearity: None,
                    x0: m.x0.clone(),
                }
            }
            Model::Planar(m) => ModelFile {
                name: m.name.clone(),
                n: 2,
                a: mat_to_rows(&NonlinearPlanarModel::a_bar()),
                diffusion: Vec::new(),
                b_bar: None,
                b_hat: Some(mat_to_rows(&NonlinearPlanarModel::b_hat())),
                k_hat: m.gain.as_ref().map(mat_to_rows),
                nonlinearity: Some(NonlinearityTag {
                    kind: "planar_sin".into(),
                }),
                x0: m.x0.clone(),
            },
        }
    }
}

/// Parses a model document.
pub fn parse_model(text: &str) -> Result<Model> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    file.into_model()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    parse_model(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// sampling schedules

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingSchedule {
    Periodic { dt: f64 },
    UniformRandom { lo: f64, hi: f64 },
    /// Sampling instants after `t₀ = 0`.
    Explicit { instants: Vec<f64> },
}

impl SamplingSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            SamplingSchedule::Periodic { dt } => {
                if !(dt.is_finite() && *dt > 0.0) {
                    return Err(Error::validation("schedule.dt", "must be positive"));
                }
            }
            SamplingSchedule::UniformRandom { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo <= hi) {
                    return Err(Error::validation("schedule", "need 0 < lo <= hi < inf"));
                }
            }
            SamplingSchedule::Explicit { instants } => {
                if instants.is_empty() {
                    return Err(Error::validation("schedule.instants", "empty list"));
                }
                let mut prev = 0.0;
                for (i, &t) in instants.iter().enumerate() {
                    if !(t.is_finite() && t > prev) {
                        return Err(Error::validation(
                            format!("schedule.instants[{i}]"),
                            "instants must be finite and strictly increasing from 0",
                        ));
                    }
                    prev = t;
                }
            }
        }
        Ok(())
    }

    fn explicit_gaps(instants: &[f64]) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(0.0)
            .chain(instants.iter().copied())
            .zip(instants.iter().copied())
            .map(|(a, b)| b - a)
    }

    /// Infimum of the sampling gaps.
    pub fn underline_dt(&self) -> f64 {
        match self {
            SamplingSchedule::Periodic { dt } => *dt,
            SamplingSchedule::UniformRandom { lo, .. } => *lo,
            SamplingSchedule::Explicit { instants } => {
                Self::explicit_gaps(instants).fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Supremum of the sampling gaps.
    pub fn overline_dt(&self) -> f64 {
        match self {
            SamplingSchedule::Periodic { dt } => *dt,
            SamplingSchedule::UniformRandom { hi, .. } => *hi,
            SamplingSchedule::Explicit { instants } => Self::explicit_gaps(instants).fold(0.0, f64::max),
        }
    }

    /// Sampling instants `0 = t₀ < t₁ < …` up to and including `horizon`.
    pub fn instants(&self, horizon: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        self.validate()?;
        let mut out = vec![0.0];
        match self {
            SamplingSchedule::Periodic { dt } => {
                // k·Δt rather than a running sum keeps gaps exact to rounding
                let mut k = 1u64;
                while (k as f64) * dt <= horizon {
                    out.push(k as f64 * dt);
                    k += 1;
                }
            }
            SamplingSchedule::UniformRandom { lo, hi } => {
                let mut t = 0.0;
                loop {
                    t += if lo == hi { *lo } else { rng.random_range(*lo..=*hi) };
                    if t > horizon {
                        break;
                    }
                    out.push(t);
                }
            }
            SamplingSchedule::Explicit { instants } => {
                if *instants.last().expect("validated non-empty") < horizon {
                    return Err(Error::domain("explicit schedule ends before the horizon"));
                }
                out.extend(instants.iter().copied().take_while(|&t| t <= horizon));
            }
        }
        Ok(out)
    }
}

impl std::str::FromStr for SamplingSchedule {
    type Err = Error;

    /// `periodic:DT`, `uniform:LO,HI` or `explicit:T1,T2,...`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::validation("schedule", "expected KIND:VALUES"))?;
        let nums = rest
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::validation("schedule", e.to_string()))?;
        let sched = match (kind, nums.as_slice()) {
            ("periodic", [dt]) => SamplingSchedule::Periodic { dt: *dt },
            ("uniform" | "uniform_random", [lo, hi]) => SamplingSchedule::UniformRandom { lo: *lo, hi: *hi },
            ("explicit", v) => SamplingSchedule::Explicit { instants: v.to_vec() },
            _ => return Err(Error::validation("schedule", format!("cannot parse `{s}`"))),
        };
        sched.validate()?;
        Ok(sched)
    }
}

/// Free function form of [`SamplingSchedule::instants`].
pub fn schedule_instants(schedule: &SamplingSchedule, horizon: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    schedule.instants(horizon, rng)
}

// ---------------------------------------------------------------------------
// stochastic impulsive systems

/// Values recorded on the simulation grid since the previous impulse,
/// ending with the left limits at the current impulse.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub times: &'a [f64],
    pub xs: &'a [Vector],
    pub ys: &'a [Vector],
}

impl Segment<'_> {
    pub fn t_now(&self) -> f64 {
        *self.times.last().expect("segment is never empty")
    }

    pub fn x_minus(&self) -> &Vector {
        self.xs.last().expect("segment is never empty")
    }

    pub fn y_minus(&self) -> &Vector {
        self.ys.last().expect("segment is never empty")
    }
}

pub type CallbackResult<T> = std::result::Result<T, String>;

/// Stochastic impulsive system with physical state `x` (dimension `n`)
/// and cyber state `y` (dimension `q`), both driven by the same `m`-channel
/// Brownian motion; `y` jumps at the sampling instants.
pub trait GeneralSiDE: Sync {
    /// `(n, q, m)`.
    fn dims(&self) -> (usize, usize, usize);

    fn f(&self, t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vector>;

    /// Diffusion columns of `x`, one per noise channel.
    fn g(&self, t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vec<Vector>>;

    fn f_tilde(&self, t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vector>;

    fn g_tilde(&self, t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vec<Vector>>;

    /// Deterministic part `h̃_f` of the jump `Δy`.
    fn jump_drift(&self, seg: &Segment<'_>) -> CallbackResult<Vector>;

    /// Noise matrix `h̄_g` (`q × r`) multiplying i.i.d. standard Gaussians at
    /// each impulse, or `None` for noiseless jumps.
    fn jump_noise(&self, _seg: &Segment<'_>) -> CallbackResult<Option<Mat>> {
        Ok(None)
    }
}

/// Sampled-data loop in physical/cyber form: `y = x − x(t_*)`, so the
/// drift `f̄(x) + B̄(x − y)` sees the held state, and each sampling instant
/// resets `y` to zero.
#[derive(Clone, Debug)]
pub struct CpsForm {
    model: Model,
    b_bar: Mat,
}

impl CpsForm {
    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Drift of `x` given the current state and the cyber error `y`.
    pub fn physical_drift(&self, x: &Vector, y: &Vector) -> Vector {
        self.held_drift(x, &(x - y))
    }

    /// Drift of `x` under the zero-order-held state `x(t_*)`.
    pub fn held_drift(&self, x: &Vector, held: &Vector) -> Vector {
        match &self.model {
            Model::Linear(m) => &m.a * x + &self.b_bar * held,
            Model::Planar(m) => {
                let k = m.gain.as_ref().expect("gain resolved at construction");
                let u = (k * held)[0];
                NonlinearPlanarModel::drift(x, u)
            }
        }
    }

    pub fn cyber_drift(&self, x: &Vector, y: &Vector) -> Vector {
        self.physical_drift(x, y)
    }

    /// Diffusion columns `Gⱼx`, shared by both blocks.
    pub fn diffusion(&self, x: &Vector) -> Vec<Vector> {
        match &self.model {
            Model::Linear(m) => m.diffusion.iter().map(|g| g * x).collect(),
            Model::Planar(_) => Vec::new(),
        }
    }

    /// Jump increment `Δy = −y(t_k⁻)`, so `y(t_k) = 0`.
    pub fn jump(&self, y_minus: &Vector) -> Vector {
        -y_minus
    }

    pub fn initial(&self, x0: &Vector) -> (Vector, Vector) {
        (x0.clone(), Vector::zeros(x0.len()))
    }
}

pub fn to_cps_form(model: &Model) -> Result<CpsForm> {
    let b_bar = match model {
        Model::Linear(m) => m.require_b_bar()?,
        Model::Planar(m) => NonlinearPlanarModel::b_hat() * m.require_gain()?,
    };
    Ok(CpsForm {
        model: model.clone(),
        b_bar,
    })
}

impl GeneralSiDE for CpsForm {
    fn dims(&self) -> (usize, usize, usize) {
        let m = match &self.model {
            Model::Linear(l) => l.m(),
            Model::Planar(_) => 0,
        };
        (self.model.n(), self.model.n(), m)
    }

    fn f(&self, _t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vector> {
        Ok(self.physical_drift(x, y))
    }

    fn g(&self, _t: f64, x: &Vector, _y: &Vector) -> CallbackResult<Vec<Vector>> {
        Ok(self.diffusion(x))
    }

    fn f_tilde(&self, _t: f64, x: &Vector, y: &Vector) -> CallbackResult<Vector> {
        Ok(self.cyber_drift(x, y))
    }

    fn g_tilde(&self, _t: f64, x: &Vector, _y: &Vector) -> CallbackResult<Vec<Vector>> {
        Ok(self.diffusion(x))
    }

    fn jump_drift(&self, seg: &Segment<'_>) -> CallbackResult<Vector> {
        Ok(self.jump(seg.y_minus()))
    }
}

// ---------------------------------------------------------------------------
// heuristic Lipschitz / linear-growth probe

/// Empirical ratios from random samples; sampling can only refute the
/// Lipschitz and linear-growth conditions, never prove them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub samples: usize,
    /// max `‖F(z₁) − F(z₂)‖ / ‖z₁ − z₂‖` over sampled pairs, where `F` stacks
    /// the drifts and diffusion columns of both blocks.
    pub lipschitz_ratio: f64,
    /// max `‖F(z)‖ / (1 + ‖z‖)` over sampled points.
    pub growth_ratio: f64,
    pub growth_constant: Option<f64>,
    pub violations: Vec<String>,
    pub heuristic: bool,
}

/// Axis-aligned box for `z = (x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    pub fn symmetric(dim: usize, r: f64) -> Self {
        SampleBox {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }
}

fn stacked_field(side: &dyn GeneralSiDE, z: &Vector, n: usize) -> Result<Vector> {
    let x = z.rows(0, n).into_owned();
    let y = z.rows(n, z.len() - n).into_owned();
    let err = |message: String| Error::Callback { time: 0.0, message };
    let mut parts = vec![side.f(0.0, &x, &y).map_err(err)?, side.f_tilde(0.0, &x, &y).map_err(err)?];
    parts.extend(side.g(0.0, &x, &y).map_err(err)?);
    parts.extend(side.g_tilde(0.0, &x, &y).map_err(err)?);
    let total = parts.iter().map(|p| p.len()).sum();
    Ok(Vector::from_iterator(total, parts.iter().flat_map(|p| p.iter().copied())))
}

/// Probes the drift and diffusion of `side` on random points of `bx`.
/// Flags a violation when the field is non-zero at the origin, or when the
/// growth ratio exceeds `growth_constant`.
pub fn assumption_check(
    side: &dyn GeneralSiDE,
    bx: &SampleBox,
    samples: usize,
    growth_constant: Option<f64>,
    rng: &mut impl Rng,
) -> Result<AssumptionReport> {
    let (n, q, _) = side.dims();
    let dim = n + q;
    if bx.lo.len() != dim || bx.hi.len() != dim {
        return Err(Error::domain(format!("sample box must have dimension {dim}")));
    }
    let mut violations = Vec::new();
    let at_zero = stacked_field(side, &Vector::zeros(dim), n)?;
    if at_zero.norm() > 0.0 {
        violations.push(format!("field does not vanish at the origin (norm {:e})", at_zero.norm()));
    }
    let draw = |rng: &mut _| {
        Vector::from_iterator(
            dim,
            (0..dim).map(|i| {
                let (lo, hi) = (bx.lo[i], bx.hi[i]);
                if lo == hi { lo } else { Rng::random_range(rng, lo..hi) }
            }),
        )
    };
    let mut lipschitz_ratio: f64 = 0.0;
    let mut growth_ratio: f64 = 0.0;
    for _ in 0..samples {
        let z1 = draw(rng);
        let z2 = draw(rng);
        let f1 = stacked_field(side, &z1, n)?;
        let f2 = stacked_field(side, &z2, n)?;
        let dz = (&z1 - &z2).norm();
        if dz > 0.0 {
            lipschitz_ratio = lipschitz_ratio.max((&f1 - &f2).norm() / dz);
        }
        growth_ratio = growth_ratio.max(f1.norm() / (1.0 + z1.norm()));
    }
    if let Some(k) = growth_constant {
        if growth_ratio > k {
            violations.push(format!("growth ratio {growth_ratio} exceeds constant {k}"));
        }
    }
    Ok(AssumptionReport {
        samples,
        lipschitz_ratio,
        growth_ratio,
        growth_constant,
        violations,
        heuristic: true,
    })
}
