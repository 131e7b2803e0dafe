//! Python bindings for sdcert.
//!
//! Matrices cross the boundary as nested lists of floats; models and
//! certificates round-trip through the same JSON formats the CLI uses.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::create_exception;
use pyo3::prelude::*;

use sdcert::bounds::{self, EmulationConstants, SamplingBoundResult, TwoFunctionConstants};
use sdcert::design::{self, CTilde, DesignOptions, PlanarDesignOptions};
use sdcert::lmi::{self, LmiCertificate};
use sdcert::models::{self, SamplingSchedule};
use sdcert::numerics::Mat;
use sdcert::sim::{self, SimConfig};

create_exception!(sdcert_py, InfeasibleError, PyRuntimeError);
create_exception!(sdcert_py, NumericalError, PyRuntimeError);

fn to_py(e: sdcert::Error) -> PyErr {
    use sdcert::Error as E;
    let msg = e.to_string();
    match e {
        E::Infeasible(_) => InfeasibleError::new_err(msg),
        E::NumericalFailure(_) => NumericalError::new_err(msg),
        E::Io(_) => PyIOError::new_err(msg),
        E::Domain(_) | E::Format(_) | E::Validation { .. } => PyValueError::new_err(msg),
        E::Callback { .. } | E::DegenerateEnsemble(_) => PyRuntimeError::new_err(msg),
    }
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: Vec<Vec<f64>>) -> PyResult<Mat> {
    let n_cols = r.first().map_or(0, Vec::len);
    if r.iter().any(|row| row.len() != n_cols) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(Mat::from_row_iterator(r.len(), n_cols, r.into_iter().flatten()))
}

/// Plant description, linear or planar.
#[pyclass(frozen, skip_from_py_object, name = "Model", module = "sdcert_py")]
#[derive(Clone)]
struct PyModel(models::Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        models::parse_model(text).map(PyModel).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| to_py(e.into()))?;
        Self::from_json(&text)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name().to_string()
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn gain(&self) -> Option<Vec<Vec<f64>>> {
        self.0.gain().as_ref().map(rows)
    }

    fn with_gain(&self, k: Vec<Vec<f64>>) -> PyResult<Self> {
        self.0.with_gain(from_rows(k)?).map(PyModel).map_err(to_py)
    }

    fn with_x0(&self, x0: Vec<f64>) -> PyResult<Self> {
        self.0.with_x0(x0).map(PyModel).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model(name={:?}, n={})", self.0.name(), self.0.n())
    }
}

/// LMI certificate in any of the supported forms.
#[pyclass(frozen, skip_from_py_object, name = "Certificate", module = "sdcert_py")]
#[derive(Clone)]
struct PyCertificate(LmiCertificate);

#[pymethods]
impl PyCertificate {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        LmiCertificate::parse(text).map(PyCertificate).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        LmiCertificate::load(path).map(PyCertificate).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn kind(&self) -> PyResult<String> {
        let k = self.0.kind().map_err(to_py)?;
        Ok(serde_json::to_value(k).unwrap().as_str().unwrap().to_string())
    }

    #[getter]
    fn alpha_bar(&self) -> f64 {
        self.0.alpha_bar
    }

    /// Copy with a different decay rate.
    fn with_alpha_bar(&self, alpha_bar: f64) -> Self {
        PyCertificate(LmiCertificate {
            alpha_bar,
            ..self.0.clone()
        })
    }

    /// `K̂` if recorded, else `Y Q⁻¹`, else `None`.
    #[getter]
    fn gain(&self) -> PyResult<Option<Vec<Vec<f64>>>> {
        Ok(self.0.gain().map_err(to_py)?.as_ref().map(rows))
    }
}

/// Maximal sampling interval and the optimizer that produced it.
#[pyclass(frozen, skip_from_py_object, name = "BoundResult", module = "sdcert_py")]
#[derive(Clone)]
struct PyBound(SamplingBoundResult);

#[pymethods]
impl PyBound {
    #[getter]
    fn tau_max(&self) -> f64 {
        self.0.tau_max
    }

    #[getter]
    fn q_star(&self) -> f64 {
        self.0.q_star
    }

    #[getter]
    fn kind(&self) -> String {
        serde_json::to_value(self.0.kind).unwrap().as_str().unwrap().to_string()
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).unwrap()
    }

    fn __repr__(&self) -> String {
        format!("BoundResult(kind={:?}, tau_max={}, q_star={})", self.kind(), self.0.tau_max, self.0.q_star)
    }
}

#[pyclass(frozen, skip_from_py_object, name = "Verification", module = "sdcert_py")]
struct PyVerification(design::Verification);

#[pymethods]
impl PyVerification {
    #[getter]
    fn passed(&self) -> bool {
        self.0.pass
    }

    /// `(name, margin)` pairs; a check passes when its margin is below tolerance.
    #[getter]
    fn margins(&self) -> Vec<(String, f64)> {
        self.0.margins.iter().map(|m| (m.name.clone(), m.margin)).collect()
    }

    #[getter]
    fn bound(&self) -> Option<PyBound> {
        self.0.bound.clone().map(PyBound)
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).unwrap()
    }

    fn __repr__(&self) -> String {
        format!("Verification(passed={}, margins={:?})", self.0.pass, self.margins())
    }
}

#[pyclass(frozen, skip_from_py_object, name = "DesignResult", module = "sdcert_py")]
struct PyDesign(design::DesignResult);

#[pymethods]
impl PyDesign {
    #[getter]
    fn gain(&self) -> Vec<Vec<f64>> {
        rows(&self.0.gain)
    }

    #[getter]
    fn gain_norm(&self) -> f64 {
        self.0.gain_norm()
    }

    #[getter]
    fn bound(&self) -> PyBound {
        PyBound(self.0.bound.clone())
    }

    #[getter]
    fn certificate(&self) -> PyCertificate {
        PyCertificate(self.0.certificate.clone())
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).unwrap()
    }

    fn __repr__(&self) -> String {
        format!("DesignResult(tau_max={}, gain={:?})", self.0.bound.tau_max, self.gain())
    }
}

#[pyclass(frozen, skip_from_py_object, name = "Ensemble", module = "sdcert_py")]
struct PyEnsemble(sim::TrajectoryEnsemble);

#[pymethods]
impl PyEnsemble {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times.clone()
    }

    #[getter]
    fn instants(&self) -> Vec<f64> {
        self.0.instants.clone()
    }

    /// `paths[p][k]` is the state of path `p` at `times[k]`.
    #[getter]
    fn paths(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.paths.clone()
    }

    #[getter]
    fn mean_sq_norm(&self) -> Vec<f64> {
        self.0.stats().mean_sq_norm
    }

    #[getter]
    fn n_diverged(&self) -> usize {
        self.0.diverged_count()
    }

    /// Log-linear fit of the mean-square norm; returns `(rate, r_squared)`.
    #[pyo3(signature = (window=None))]
    fn ms_decay(&self, window: Option<(f64, f64)>) -> PyResult<(f64, f64)> {
        let e = sim::estimate_ms_decay(&self.0, window).map_err(to_py)?;
        Ok((e.rate, e.r_squared))
    }

    /// Median over paths of `ln‖x(t)‖/t`.
    #[pyo3(signature = (end=None))]
    fn as_exponent(&self, end: Option<f64>) -> PyResult<f64> {
        Ok(sim::estimate_as_exponent(&self.0, end).map_err(to_py)?.median)
    }

    fn trajectory_csv(&self) -> PyResult<String> {
        self.0.trajectory_csv().map_err(to_py)
    }

    fn stats_csv(&self) -> PyResult<String> {
        self.0.stats_csv().map_err(to_py)
    }
}

#[pyfunction]
fn bound_single(alpha_bar: f64, alpha_b: f64, alpha_f: f64) -> PyResult<PyBound> {
    bounds::emulation_bound_single(&EmulationConstants {
        alpha_bar,
        alpha_b,
        alpha_f,
    })
    .map(PyBound)
    .map_err(to_py)
}

#[pyfunction]
fn bound_two(alpha_bar: f64, alpha_b: f64, gamma1: f64, gamma2: f64) -> PyResult<PyBound> {
    bounds::emulation_bound_two(&TwoFunctionConstants {
        alpha_bar,
        alpha_b,
        gamma1,
        gamma2,
    })
    .map(PyBound)
    .map_err(to_py)
}

/// Evaluates any bound from its JSON input (`{"kind": "two_v", ...}`).
#[pyfunction]
fn bound_from_json(text: &str) -> PyResult<PyBound> {
    let input: bounds::BoundInput =
        serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    input.evaluate().map(PyBound).map_err(to_py)
}

#[pyfunction]
fn dta_map(c_bar: f64, h: f64, alpha_u: f64) -> PyResult<f64> {
    bounds::dta_map(c_bar, h, alpha_u).map_err(to_py)
}

#[pyfunction]
fn dta_bound(c_bar: f64, h: f64, alpha_u: f64, alpha_b: f64, alpha_f: f64) -> PyResult<PyBound> {
    bounds::dta_bound(c_bar, h, alpha_u, alpha_b, alpha_f).map(PyBound).map_err(to_py)
}

/// Checks `cert` against `model`; `tol` is relative unless `absolute` is set.
#[pyfunction]
#[pyo3(signature = (model, cert, tol=1e-2, absolute=false))]
fn verify(model: &PyModel, cert: &PyCertificate, tol: f64, absolute: bool) -> PyResult<PyVerification> {
    let tol = if absolute {
        lmi::Tolerance::Absolute(tol)
    } else {
        lmi::Tolerance::Relative(tol)
    };
    design::verify_certificate(&model.0, &cert.0, tol).map(PyVerification).map_err(to_py)
}

/// Synthesizes a sampled state-feedback gain for a linear plant in design
/// mode. `c_tilde=None` is only accepted for noise-free plants.
#[pyfunction]
#[pyo3(name = "design", signature = (model, c_tilde=Some(1.0), seed=0, refine=true))]
fn design_linear(py: Python<'_>, model: &PyModel, c_tilde: Option<f64>, seed: u64, refine: bool) -> PyResult<PyDesign> {
    let models::Model::Linear(m) = &model.0 else {
        return Err(PyValueError::new_err("use design_planar for the planar model"));
    };
    let opts = DesignOptions {
        c_tilde: c_tilde.map_or(CTilde::Free, CTilde::Prescribed),
        seed,
        refine,
        ..DesignOptions::default()
    };
    let m = m.clone();
    py.detach(|| design::synthesize_feedback(&m, &opts)).map(PyDesign).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (seed=0, starts=24))]
fn design_planar(py: Python<'_>, seed: u64, starts: usize) -> PyResult<PyDesign> {
    let opts = PlanarDesignOptions {
        seed,
        starts,
        ..PlanarDesignOptions::default()
    };
    py.detach(|| design::synthesize_nonlinear_planar(&opts)).map(PyDesign).map_err(to_py)
}

/// Monte Carlo ensemble of the sampled-data loop. `schedule` uses the CLI
/// syntax: `periodic:DT`, `uniform:LO,HI` or `explicit:T1,T2,...`.
#[pyfunction]
#[pyo3(signature = (model, schedule, n_paths=200, horizon=5.0, dt_sim=1e-3, seed=0, store_stride=10))]
fn simulate(
    py: Python<'_>,
    model: &PyModel,
    schedule: &str,
    n_paths: usize,
    horizon: f64,
    dt_sim: f64,
    seed: u64,
    store_stride: usize,
) -> PyResult<PyEnsemble> {
    let schedule: SamplingSchedule = schedule.parse().map_err(to_py)?;
    let cfg = SimConfig {
        dt_sim,
        horizon,
        n_paths,
        seed,
        schedule,
        store_stride,
    };
    let m = model.0.clone();
    py.detach(|| sim::run_ensemble(&m, &cfg)).map(PyEnsemble).map_err(to_py)
}

#[pymodule]
fn sdcert_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCertificate>()?;
    m.add_class::<PyBound>()?;
    m.add_class::<PyVerification>()?;
    m.add_class::<PyDesign>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(bound_single, m)?)?;
    m.add_function(wrap_pyfunction!(bound_two, m)?)?;
    m.add_function(wrap_pyfunction!(bound_from_json, m)?)?;
    m.add_function(wrap_pyfunction!(dta_map, m)?)?;
    m.add_function(wrap_pyfunction!(dta_bound, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(design_linear, m)?)?;
    m.add_function(wrap_pyfunction!(design_planar, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
