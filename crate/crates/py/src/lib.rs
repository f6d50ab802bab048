//! Python bindings. Observations are passed as `times` plus one row of
//! state values per time, the same layout as the CSV files.

use accel_ode::accel::{self, AccelConfig, EstimateReport, Method};
use accel_ode::mc;
use accel_ode::models;
use accel_ode::nls::{self, NlsConfig};
use accel_ode::ode::integrate as integrate_ode;
use accel_ode::{Dataset, Error, ParameterVector, Stage, Tolerances};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e.stage() {
        Stage::Input => PyValueError::new_err(e.to_string()),
        stage => PyRuntimeError::new_err(format!("{stage} failed: {e}")),
    }
}

fn dataset(times: Vec<f64>, values: Vec<Vec<f64>>) -> PyResult<Dataset> {
    let d = values.first().map_or(0, Vec::len);
    if values.len() != times.len() || values.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("values must hold one equal-length row per time"));
    }
    let rows: Vec<Vec<f64>> = (0..d).map(|i| values.iter().map(|r| r[i]).collect()).collect();
    Dataset::from_rows(times, &rows).map_err(to_py)
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Names of the built-in models.
#[pyfunction]
fn model_names() -> Vec<&'static str> {
    models::MODEL_NAMES.to_vec()
}

/// Names of the built-in simulation scenarios.
#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    mc::PRESET_NAMES.to_vec()
}

/// States of `model` at `times` (one row per time).
#[pyfunction]
#[pyo3(signature = (model, xi, theta, times))]
fn integrate(model: &str, xi: Vec<f64>, theta: Vec<f64>, times: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let entry = models::catalog_get(model).map_err(to_py)?;
    let eta = ParameterVector::new(xi, theta);
    eta.check_against(entry.model.as_ref()).map_err(to_py)?;
    if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(PyValueError::new_err("times must be finite and non-negative"));
    }
    let t_end = times.iter().copied().fold(0.0, f64::max);
    if t_end == 0.0 {
        return Ok(times.iter().map(|_| eta.xi.clone()).collect());
    }
    let traj = integrate_ode(entry.model.as_ref(), &eta, t_end, &Tolerances::new(1e-10, 1e-12)).map_err(to_py)?;
    Ok(times.iter().map(|&t| traj.eval(t)).collect())
}

/// One replicate of a preset scenario: `(times, values)`.
#[pyfunction]
#[pyo3(signature = (preset, seed = None, index = 0))]
fn simulate(preset: &str, seed: Option<u64>, index: u64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut spec = mc::preset(preset).map_err(to_py)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = mc::simulate_dataset(&spec, index).map_err(to_py)?;
    let values = (0..data.n()).map(|j| data.observation(j)).collect();
    Ok((data.times().to_vec(), values))
}

/// Result of `fit`.
#[pyclass(name = "EstimateReport", module = "accel_ode", frozen)]
struct PyReport {
    inner: EstimateReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn method(&self) -> &'static str {
        match self.inner.method {
            Method::Accel => "accel",
            Method::Nls => "nls",
        }
    }
    /// Full parameter vector, fixed components included.
    #[getter]
    fn estimate(&self) -> Vec<f64> {
        self.inner.estimate.eta()
    }
    #[getter]
    fn preliminary(&self) -> Vec<f64> {
        self.inner.eta_prelim.eta()
    }
    /// Labels of the estimated components, matching `lower`/`upper`.
    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.intervals.iter().map(|i| i.label.clone()).collect()
    }
    #[getter]
    fn lower(&self) -> Vec<f64> {
        self.inner.intervals.iter().map(|i| i.lower).collect()
    }
    #[getter]
    fn upper(&self) -> Vec<f64> {
        self.inner.intervals.iter().map(|i| i.upper).collect()
    }
    #[getter]
    fn std_errors(&self) -> Vec<f64> {
        self.inner.intervals.iter().map(|i| i.std_error).collect()
    }
    #[getter]
    fn rss(&self) -> f64 {
        self.inner.rss
    }
    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2_hat
    }
    #[getter]
    fn bandwidth(&self) -> Option<f64> {
        self.inner.selected_bandwidth
    }
    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.diagnostics.warnings.clone()
    }
    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("report serializes")
    }
    fn __repr__(&self) -> String {
        let parts: Vec<String> = self.inner.intervals.iter().map(|i| format!("{}={:.4e}", i.label, i.point)).collect();
        format!("EstimateReport({}, {})", self.method(), parts.join(", "))
    }
}

/// Fits `model` to observations with the one-step estimator (or NLS).
#[pyfunction]
#[pyo3(signature = (model, times, values, known_xi = None, method = "accel", degree = 1, level = 0.95))]
fn fit(
    model: &str,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    known_xi: Option<Vec<f64>>,
    method: &str,
    degree: usize,
    level: f64,
) -> PyResult<PyReport> {
    let entry = models::catalog_get(model).map_err(to_py)?;
    let data = dataset(times, values)?;
    if data.dim_state() != entry.model.dim_state() {
        return Err(PyValueError::new_err(format!("model `{model}` has {} states", entry.model.dim_state())));
    }
    let template = match known_xi {
        Some(xi) => ParameterVector::new(xi, entry.default_eta.theta.clone()).with_known_xi(),
        None => entry.default_eta.clone(),
    };
    template.check_against(entry.model.as_ref()).map_err(to_py)?;
    let config = AccelConfig { degree, level, ..AccelConfig::default() };
    let report = match method {
        "accel" => accel::fit(entry.model.as_ref(), &data, &template, &config),
        "nls" => nls::nls_fit(entry.model.as_ref(), &data, &template, None, &config, &NlsConfig { level, ..NlsConfig::default() }),
        other => return Err(PyValueError::new_err(format!("unknown method `{other}` (accel or nls)"))),
    }
    .map_err(to_py)?;
    Ok(PyReport { inner: report })
}

/// Runs a preset Monte Carlo study and returns its summary as a dict.
#[pyfunction]
#[pyo3(signature = (preset, replications = None, seed = None))]
fn run_study<'py>(py: Python<'py>, preset: &str, replications: Option<usize>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = mc::preset(preset).map_err(to_py)?;
    if let Some(r) = replications {
        spec.replications = r;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let summary = py.detach(|| mc::run_study(&spec)).map_err(to_py)?;
    json_loads(py, &serde_json::to_string(&summary).expect("summary serializes"))
}

#[pymodule]
#[pyo3(name = "accel_ode")]
fn accel_ode_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(model_names, m)?)?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    Ok(())
}
