//! Python bindings: configuration, simulation runs, trace diagnostics and the
//! numeric building blocks.

use std::path::PathBuf;

use edge_moe::analysis;
use edge_moe::experiment;
use edge_moe::expert;
use edge_moe::gating;
use edge_moe::rng::seeded;
use edge_moe::sim::{self, Strategy};
use edge_moe::task_gen;
use edge_moe::verify;
use edge_moe::Error;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig { .. } | Error::Domain(_) | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(to_py)
}

/// Rows of equal length into a `p x s` matrix.
fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let p = rows.len();
    let s = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != s) {
        return Err(PyValueError::new_err("matrix rows differ in length"));
    }
    Ok(DMatrix::from_fn(p, s, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Simulation settings. Unset optional values take their `sigma0`-derived
/// defaults.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: sim::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (
        horizon = 3000, experts = 30, clusters = 10, dim = 15, samples = 10, sigma0 = 0.6,
        strategy = "moe", seed = 0, learning_rate = 0.2, sigma_noise = None, within_jitter = None,
        noise_scale = None, tr_delay = (0, 6), exec_delay = (1, 4), stride = 10
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        horizon: u64,
        experts: usize,
        clusters: usize,
        dim: usize,
        samples: usize,
        sigma0: f64,
        strategy: &str,
        seed: u64,
        learning_rate: f64,
        sigma_noise: Option<f64>,
        within_jitter: Option<f64>,
        noise_scale: Option<f64>,
        tr_delay: (u32, u32),
        exec_delay: (u32, u32),
        stride: u64,
    ) -> PyResult<Self> {
        let mut cfg = sim::RunConfig::with_defaults(
            horizon,
            experts,
            clusters,
            dim,
            samples,
            sigma0,
            self::strategy(strategy)?,
            seed,
        );
        cfg.learning_rate = learning_rate;
        if let Some(x) = sigma_noise {
            cfg.sigma_noise = x;
        }
        if let Some(x) = within_jitter {
            cfg.within_jitter = x;
        }
        if let Some(x) = noise_scale {
            cfg.noise_scale = x;
        }
        cfg.delay.tr_bounds = tr_delay;
        cfg.delay.exec_bounds = exec_delay;
        cfg.metric_stride = stride;
        cfg.validate().map_err(to_py)?;
        Ok(Self { inner: cfg })
    }

    /// The linear-model experiment settings for one strategy and pool size.
    #[staticmethod]
    #[pyo3(signature = (strategy = "moe", experts = 30, seed = 0))]
    fn fig3(strategy: &str, experts: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: sim::RunConfig::fig3(self::strategy(strategy)?, experts, seed),
        })
    }

    #[getter]
    fn horizon(&self) -> u64 {
        self.inner.horizon
    }
    #[getter]
    fn experts(&self) -> usize {
        self.inner.n_experts
    }
    #[getter]
    fn clusters(&self) -> usize {
        self.inner.n_clusters
    }
    #[getter]
    fn sigma0(&self) -> f64 {
        self.inner.sigma0
    }
    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.name()
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[getter]
    fn max_delay(&self) -> u32 {
        self.inner.delay.max_delay()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(horizon={}, experts={}, clusters={}, strategy='{}', seed={})",
            self.inner.horizon, self.inner.n_experts, self.inner.n_clusters, self.inner.strategy, self.inner.seed
        )
    }
}

/// Result of one simulation.
#[pyclass(name = "RunTrace", frozen)]
struct PyRunTrace {
    inner: sim::RunTrace,
}

#[pymethods]
impl PyRunTrace {
    #[getter]
    fn final_error(&self) -> Option<f64> {
        self.inner.final_error()
    }
    #[getter]
    fn fallback_count(&self) -> u64 {
        self.inner.fallback_count()
    }
    #[getter]
    fn completion_count(&self) -> u64 {
        self.inner.completion_count()
    }
    #[getter]
    fn event_count(&self) -> usize {
        self.inner.events.len()
    }
    /// `(time, G_t)` pairs emitted by the engine.
    #[getter]
    fn metrics(&self) -> Vec<(u64, f64)> {
        self.inner
            .metrics
            .iter()
            .map(|m| (m.time, m.generalization_error))
            .collect()
    }
    #[getter]
    fn update_counts(&self) -> Vec<u64> {
        self.inner.experts.iter().map(|e| e.update_count).collect()
    }
    /// Final expert models, one list per expert.
    #[getter]
    fn expert_models(&self) -> Vec<Vec<f64>> {
        self.inner.experts.iter().map(|e| e.model.as_slice().to_vec()).collect()
    }
    /// Gate parameters as `p` rows of `M` entries.
    #[getter]
    fn gating_params(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.gating.params)
    }
    /// `(cluster, chosen expert)` of every routed task, in arrival order.
    fn routes(&self) -> Vec<(usize, usize)> {
        analysis::served_tasks(&self.inner)
            .into_iter()
            .map(|t| (t.cluster, t.expert))
            .collect()
    }

    #[pyo3(signature = (stride = 10))]
    fn error_timeseries(&self, stride: u64) -> Vec<(u64, f64)> {
        analysis::error_timeseries(&self.inner, stride)
    }

    fn expert_set_assignment(&self) -> Vec<usize> {
        analysis::expert_set_assignment(&self.inner.gating, &self.inner.clusters.signals)
    }

    fn specialization_rate(&self, after: u64) -> Option<f64> {
        let assignment = self.expert_set_assignment();
        analysis::specialization_rate(&self.inner, &assignment, after)
    }

    fn mutual_information(&self) -> f64 {
        analysis::cluster_expert_mutual_information(&self.inner)
    }

    /// Error decomposition as a dict; the bound needs `t1 < horizon`.
    #[pyo3(signature = (stride = 10, t1 = None, c = 1.0))]
    fn error_report<'py>(&self, py: Python<'py>, stride: u64, t1: Option<u64>, c: f64) -> PyResult<Bound<'py, PyDict>> {
        let r = analysis::error_report(&self.inner, stride, t1, c);
        let d = PyDict::new(py);
        d.set_item("final_error", r.final_error)?;
        d.set_item("benchmark_g1", r.benchmark.0)?;
        d.set_item("benchmark_g2", r.benchmark.1)?;
        d.set_item("ratio", r.ratio)?;
        d.set_item("update_counts", r.update_counts)?;
        if let Some(b) = r.bound {
            d.set_item("bound_g1", b.g1)?;
            d.set_item("bound_g3", b.g3)?;
            d.set_item("bound_g4", b.g4)?;
            d.set_item("bound", b.total)?;
        }
        Ok(d)
    }

    /// Writes the event log as line-delimited JSON.
    fn write_jsonl(&self, path: PathBuf) -> PyResult<()> {
        experiment::write_trace(&path, &self.inner).map_err(to_py)
    }
}

/// Ground-truth clusters.
#[pyclass(name = "ClusterSet", frozen)]
struct PyClusterSet {
    inner: task_gen::ClusterSet,
}

#[pymethods]
impl PyClusterSet {
    #[staticmethod]
    #[pyo3(signature = (clusters, dim, sigma0, seed = 0))]
    fn generate(clusters: usize, dim: usize, sigma0: f64, seed: u64) -> PyResult<Self> {
        let inner = task_gen::generate_clusters(clusters, dim, sigma0, &mut seeded(seed)).map_err(to_py)?;
        Ok(Self { inner })
    }
    #[getter]
    fn centers(&self) -> Vec<Vec<f64>> {
        self.inner.centers.iter().map(|c| c.as_slice().to_vec()).collect()
    }
    #[getter]
    fn signals(&self) -> Vec<Vec<f64>> {
        self.inner.signals.iter().map(|c| c.as_slice().to_vec()).collect()
    }
    #[getter]
    fn sigma0(&self) -> f64 {
        self.inner.sigma0
    }
    #[getter]
    fn within_jitter(&self) -> f64 {
        self.inner.within_jitter
    }
    /// Mean squared distance over all ordered center pairs.
    fn gap_expectation(&self) -> f64 {
        analysis::cluster_gap_expectation(&self.inner)
    }
    /// `True` when every invariant holds; otherwise raises with the violation.
    fn check(&self) -> PyResult<bool> {
        self.inner.check_invariants().map_err(PyValueError::new_err)?;
        Ok(true)
    }
}

#[pyfunction]
fn run(config: &PyRunConfig) -> PyResult<PyRunTrace> {
    Ok(PyRunTrace {
        inner: sim::run(&config.inner).map_err(to_py)?,
    })
}

/// `prev + X (X^T X)^-1 (y - X^T prev)` with `X` given as `p` rows of `s`.
#[pyfunction]
fn min_norm_update(prev: Vec<f64>, features: Vec<Vec<f64>>, labels: Vec<f64>) -> PyResult<Vec<f64>> {
    let x = matrix(features)?;
    if x.nrows() != prev.len() || x.ncols() != labels.len() {
        return Err(PyValueError::new_err(
            "shape mismatch between prev, features and labels",
        ));
    }
    let w = expert::min_norm_update(&DVector::from_vec(prev), &x, &DVector::from_vec(labels)).map_err(to_py)?;
    Ok(w.as_slice().to_vec())
}

#[pyfunction]
fn training_loss(model: Vec<f64>, features: Vec<Vec<f64>>, labels: Vec<f64>) -> PyResult<f64> {
    let x = matrix(features)?;
    if x.nrows() != model.len() || x.ncols() != labels.len() {
        return Err(PyValueError::new_err(
            "shape mismatch between model, features and labels",
        ));
    }
    Ok(expert::training_loss(
        &DVector::from_vec(model),
        &x,
        &DVector::from_vec(labels),
    ))
}

#[pyfunction]
fn model_error(model: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    if model.len() != truth.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(expert::model_error(
        &DVector::from_vec(model),
        &DVector::from_vec(truth),
    ))
}

#[pyfunction]
fn softmax(values: Vec<f64>) -> Vec<f64> {
    gating::softmax(&DVector::from_vec(values)).as_slice().to_vec()
}

#[pyfunction]
fn inverse_normal_cdf(q: f64) -> PyResult<f64> {
    analysis::inverse_normal_cdf(q).map_err(to_py)
}

#[pyfunction]
fn normal_cdf(z: f64) -> f64 {
    analysis::normal_cdf(z)
}

/// `(M_th, recommended M)`.
#[pyfunction]
#[pyo3(signature = (clusters, max_delay = 10.0, delta = 0.05))]
fn expert_threshold(clusters: usize, max_delay: f64, delta: f64) -> PyResult<(f64, u64)> {
    let r = analysis::expert_threshold(clusters, max_delay, delta).map_err(to_py)?;
    Ok((r.m_th, r.recommended_experts))
}

#[pyfunction]
#[pyo3(signature = (learning_rate, sigma0, experts, delta = 0.05, max_delay = 10))]
fn convergence_time(learning_rate: f64, sigma0: f64, experts: usize, delta: f64, max_delay: u64) -> PyResult<u64> {
    analysis::convergence_time(learning_rate, sigma0, experts, delta, max_delay).map_err(to_py)
}

/// Runs a spec file; returns `(output_dir, failed cell count)`.
#[pyfunction]
#[pyo3(signature = (spec_path, output_dir = None))]
fn run_experiment(py: Python<'_>, spec_path: PathBuf, output_dir: Option<PathBuf>) -> PyResult<(PathBuf, usize)> {
    let mut spec = experiment::load_spec(&spec_path).map_err(to_py)?;
    if output_dir.is_some() {
        spec.output_dir = output_dir;
    }
    let outcome = py.detach(|| experiment::run_experiment(&spec)).map_err(to_py)?;
    Ok((outcome.output_dir, outcome.failed))
}

/// Writes plot tables next to the metrics; returns the warnings.
#[pyfunction]
fn emit_plotdata(dir: PathBuf) -> PyResult<Vec<String>> {
    Ok(experiment::emit_plotdata(&dir).map_err(to_py)?.warnings)
}

/// `(name, passed, worst, tolerance)` for every property and oracle check.
#[pyfunction]
#[pyo3(signature = (instances = 100, seed = 0))]
fn verify_suite(py: Python<'_>, instances: usize, seed: u64) -> Vec<(String, bool, f64, f64)> {
    py.detach(|| verify::run_all(instances, seed))
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.observed, c.tolerance))
        .collect()
}

#[pymodule]
fn edge_moe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyRunTrace>()?;
    m.add_class::<PyClusterSet>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(min_norm_update, m)?)?;
    m.add_function(wrap_pyfunction!(training_loss, m)?)?;
    m.add_function(wrap_pyfunction!(model_error, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(expert_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_time, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(emit_plotdata, m)?)?;
    m.add_function(wrap_pyfunction!(verify_suite, m)?)?;
    Ok(())
}
