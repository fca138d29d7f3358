//! Python bindings: outcomes and the feedback window as classes, and the
//! search, simulation and analysis entry points as functions. Structured
//! results (log records, summaries) come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use ::nasloop::analytics::{self, CorrelationBasis, SummaryOptions};
use ::nasloop::config::CliConfig;
use ::nasloop::experiment;
use ::nasloop::memory::render_history;
use ::nasloop::prompt;
use ::nasloop::search::{self, LogicalClock, SearchLoop, SearchResult};
use ::nasloop::sim::SimParams;
use ::nasloop::{Ablation, DatasetSpec, DiagnosticTriple, EvaluationOutcome, FailureKind, RunConfig};

create_exception!(nasloop, NasloopError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    NasloopError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn parse_ablation(name: &str) -> PyResult<Ablation> {
    match name {
        "none" | "full" => Ok(Ablation::None),
        "no_feedback" => Ok(Ablation::NoFeedback),
        "no_reference" => Ok(Ablation::NoReference),
        other => Err(PyValueError::new_err(format!(
            "unknown ablation {other:?} (expected none, no_feedback or no_reference)"
        ))),
    }
}

/// Result of evaluating one candidate.
#[pyclass(name = "Outcome", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct PyOutcome(EvaluationOutcome);

#[pymethods]
impl PyOutcome {
    #[staticmethod]
    fn success(accuracy: f64) -> Self {
        Self(EvaluationOutcome::success(accuracy))
    }

    /// `kind` is one of validation, runtime, timeout, extraction.
    #[staticmethod]
    fn failure(kind: &str, message: &str) -> PyResult<Self> {
        let kind = match kind {
            "validation" => FailureKind::Validation,
            "runtime" => FailureKind::Runtime,
            "timeout" => FailureKind::Timeout,
            "extraction" => FailureKind::Extraction,
            other => return Err(PyValueError::new_err(format!("unknown failure kind {other:?}"))),
        };
        Ok(Self(EvaluationOutcome::failure(kind, message)))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind().as_str()
    }

    #[getter]
    fn accuracy(&self) -> Option<f64> {
        self.0.accuracy()
    }

    #[getter]
    fn message(&self) -> Option<String> {
        self.0.message().map(str::to_string)
    }

    fn is_success(&self) -> bool {
        self.0.is_success()
    }

    fn __repr__(&self) -> String {
        match &self.0 {
            EvaluationOutcome::Success { accuracy } => format!("Outcome.success({accuracy})"),
            EvaluationOutcome::Failure { message, .. } => format!("Outcome({}, {message:?})", self.0.kind()),
        }
    }
}

/// Sliding window over the most recent `capacity` improvement attempts.
#[pyclass(name = "HistoryWindow")]
struct PyHistoryWindow(::nasloop::HistoryWindow);

#[pymethods]
impl PyHistoryWindow {
    #[new]
    #[pyo3(signature = (capacity = 5))]
    fn new(capacity: usize) -> PyResult<Self> {
        if capacity == 0 {
            return Err(PyValueError::new_err("capacity must be at least 1"));
        }
        Ok(Self(::nasloop::HistoryWindow::new(capacity)))
    }

    fn push(&mut self, problem: &str, suggestion: &str, outcome: PyOutcome) {
        self.0.push(DiagnosticTriple::new(problem, suggestion, outcome.0));
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.0.capacity()
    }

    /// Oldest first, as `(problem, suggestion, outcome)` tuples.
    fn entries(&self) -> Vec<(String, String, PyOutcome)> {
        self.0
            .entries()
            .map(|t| (t.problem.clone(), t.suggestion.clone(), PyOutcome(t.outcome.clone())))
            .collect()
    }

    /// The text block shown to the prompt improver.
    fn render(&self) -> String {
        render_history(&self.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
fn digest(text: &str) -> String {
    ::nasloop::digest(text)
}

/// Code from the last fenced block of an LLM reply (or the reply itself if
/// it is plain code).
#[pyfunction]
fn extract_code(reply: &str) -> PyResult<String> {
    prompt::extract_code(reply).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn parse_improver_reply<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &prompt::parse_improver_response(text))
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    analytics::spearman(&xs, &ys).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn kendall(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    analytics::kendall(&xs, &ys).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Two-sided permutation p-values `(p_spearman, p_kendall)`.
#[pyfunction]
#[pyo3(signature = (xs, ys, permutations = analytics::DEFAULT_PERMUTATIONS, seed = 0))]
fn permutation_p_values(py: Python<'_>, xs: Vec<f64>, ys: Vec<f64>, permutations: usize, seed: u64) -> PyResult<(f64, f64)> {
    py.detach(|| analytics::permutation_p_values(&xs, &ys, permutations, seed))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn read_log<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &search::read_log(&path).map_err(err)?)
}

/// Summary statistics of a run log as a dict.
#[pyfunction]
#[pyo3(signature = (path, basis = "success_order", permutations = analytics::DEFAULT_PERMUTATIONS, seed = 0))]
fn summarize<'py>(py: Python<'py>, path: PathBuf, basis: &str, permutations: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let basis = match basis {
        "success_order" => CorrelationBasis::SuccessOrder,
        "iteration" => CorrelationBasis::Iteration,
        other => return Err(PyValueError::new_err(format!("unknown basis {other:?}"))),
    };
    let options = SummaryOptions {
        basis,
        permutations,
        seed,
    };
    let report = py.detach(|| {
        let records = search::read_log(&path).map_err(|e| e.to_string())?;
        analytics::summarize(&records, &options).map_err(|e| e.to_string())
    });
    to_py(py, &report.map_err(err)?)
}

/// Per-iteration, smoothed and best-so-far series of a run log.
#[pyfunction]
#[pyo3(signature = (path, window = analytics::DEFAULT_SMOOTHING_WINDOW))]
fn trajectories<'py>(py: Python<'py>, path: PathBuf, window: usize) -> PyResult<Bound<'py, PyAny>> {
    let records = search::read_log(&path).map_err(err)?;
    to_py(py, &analytics::build_trajectories(&records, window))
}

fn sim_setup(
    max_iterations: u64,
    window_size: usize,
    dimension: usize,
    noise: f64,
    failure_rate: f64,
    landscape_seed: u64,
) -> PyResult<(RunConfig, SimParams)> {
    let mut base = RunConfig::new(max_iterations, DatasetSpec::cifar10());
    base.window_size = window_size;
    base.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let params = SimParams {
        dimension,
        noise,
        failure_rate,
        landscape_seed,
    };
    params.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((base, params))
}

/// One simulated search; returns the log records.
#[pyfunction]
#[pyo3(signature = (
    max_iterations = 150, seed = 0, ablation = "none", window_size = 5,
    dimension = 8, noise = 0.02, failure_rate = 0.2, landscape_seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    max_iterations: u64,
    seed: u64,
    ablation: &str,
    window_size: usize,
    dimension: usize,
    noise: f64,
    failure_rate: f64,
    landscape_seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let variant = parse_ablation(ablation)?;
    let (base, params) = sim_setup(max_iterations, window_size, dimension, noise, failure_rate, landscape_seed)?;
    let log = py
        .detach(|| experiment::simulate_run(&base, &params, seed, variant))
        .map_err(err)?;
    to_py(py, &log)
}

/// Full loop against both ablations over several seeds.
#[pyfunction]
#[pyo3(signature = (
    seeds, max_iterations = 150, window_size = 5,
    dimension = 8, noise = 0.02, failure_rate = 0.2, landscape_seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn compare_ablations<'py>(
    py: Python<'py>,
    seeds: Vec<u64>,
    max_iterations: u64,
    window_size: usize,
    dimension: usize,
    noise: f64,
    failure_rate: f64,
    landscape_seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    if seeds.is_empty() {
        return Err(PyValueError::new_err("no seeds given"));
    }
    let (base, params) = sim_setup(max_iterations, window_size, dimension, noise, failure_rate, landscape_seed)?;
    let cmp = py
        .detach(|| experiment::compare_ablations(&base, &params, &seeds))
        .map_err(err)?;
    to_py(py, &cmp)
}

fn result_dict<'py>(py: Python<'py>, result: &SearchResult) -> PyResult<Bound<'py, PyAny>> {
    let best = result.best_candidate.as_ref();
    let value = serde_json::json!({
        "total_iterations": result.total_iterations,
        "successful_evaluations": result.successful_evaluations,
        "best_accuracy": best.map(|_| result.best_accuracy),
        "best_source": best.map(|c| c.source_text.clone()),
        "best_source_hash": best.map(|c| c.source_hash.clone()),
        "log_path": result.log_path,
    });
    to_py(py, &value)
}

fn drive(config_path: PathBuf, log_path: Option<PathBuf>, resume: bool, force: bool) -> Result<SearchResult, String> {
    let config = CliConfig::load(&config_path).map_err(|e| e.to_string())?;
    let log = log_path
        .or_else(|| config.log_path.clone())
        .ok_or("no log path: pass log_path or set `log_path` in the config")?;
    let run_config = config.run_config().map_err(|e| e.to_string())?;
    let backends = config.backends().map_err(|e| e.to_string())?;
    let templates = config.templates().map_err(|e| e.to_string())?;
    let mut search = SearchLoop::new(run_config, backends)
        .map_err(|e| e.to_string())?
        .with_templates(templates);
    if config.backend == ::nasloop::config::BackendKind::Sim {
        search = search.with_clock(LogicalClock::default());
    }
    if resume {
        search.resume(&log)
    } else {
        search.run_to_file(&log, force)
    }
    .map_err(|e| e.to_string())
}

/// Runs a search described by a JSON config file.
#[pyfunction]
#[pyo3(signature = (config_path, log_path = None, force = false))]
fn run<'py>(py: Python<'py>, config_path: PathBuf, log_path: Option<PathBuf>, force: bool) -> PyResult<Bound<'py, PyAny>> {
    let result = py.detach(|| drive(config_path, log_path, false, force)).map_err(err)?;
    result_dict(py, &result)
}

/// Continues an interrupted run from its log.
#[pyfunction]
#[pyo3(signature = (config_path, log_path = None))]
fn resume<'py>(py: Python<'py>, config_path: PathBuf, log_path: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let result = py.detach(|| drive(config_path, log_path, true, false)).map_err(err)?;
    result_dict(py, &result)
}

#[pymodule(name = "nasloop")]
pub fn nasloop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NasloopError", m.py().get_type::<NasloopError>())?;
    m.add_class::<PyOutcome>()?;
    m.add_class::<PyHistoryWindow>()?;
    m.add_function(wrap_pyfunction!(digest, m)?)?;
    m.add_function(wrap_pyfunction!(extract_code, m)?)?;
    m.add_function(wrap_pyfunction!(parse_improver_reply, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(kendall, m)?)?;
    m.add_function(wrap_pyfunction!(permutation_p_values, m)?)?;
    m.add_function(wrap_pyfunction!(read_log, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(trajectories, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(compare_ablations, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(resume, m)?)?;
    Ok(())
}
