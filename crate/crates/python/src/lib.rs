//! Python bindings for `lowrank-core`.
//!
//! Matrices cross the boundary as lists of row lists. Library errors map to
//! `ValueError` (bad config or arguments), `FileNotFoundError` and
//! `RuntimeError` for everything else.

use std::path::PathBuf;

use lowrank_core::analysis::{neuron_stats, spectrum as singular_values, theorem_check};
use lowrank_core::config::ExperimentConfig;
use lowrank_core::gradients::check_gradients as run_grad_check;
use lowrank_core::linalg::{svd as jacobi_svd, truncate_rank, Matrix};
use lowrank_core::model::{evaluate, Params, MATRIX_NAMES};
use lowrank_core::pipeline::{self, Command, TrainedRun};
use lowrank_core::pruning::{prune_sweep as sweep_pruning, PruneOrder};
use lowrank_core::Error;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NotFound(msg) => PyFileNotFoundError::new_err(msg),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        Error::Format { .. } => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

/// A validated experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::parse(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::load(&path).map_err(to_py)?,
        })
    }

    /// Every resolved value as sorted `key = value` lines.
    fn resolved_text(&self) -> PyResult<String> {
        self.inner.resolved_text().map_err(to_py)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(to_py)
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.set_seed(seed);
        PyConfig { inner }
    }

    fn with_output_dir(&self, path: PathBuf) -> Self {
        let mut inner = self.inner.clone();
        inner.output_dir = path;
        PyConfig { inner }
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[getter]
    fn iters(&self) -> usize {
        self.inner.train.iters
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.inner.train.eta
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={:?})", self.inner.hash().unwrap_or_default())
    }
}

/// Result of training one config: the data, every snapshot and the metrics log.
#[pyclass(name = "TrainedRun", frozen)]
struct PyTrainedRun {
    config: ExperimentConfig,
    run: TrainedRun,
}

impl PyTrainedRun {
    fn params_at(&self, iteration: Option<usize>) -> PyResult<&Params> {
        let traj = &self.run.trajectory;
        traj.params_at(iteration.unwrap_or(traj.iters)).map_err(to_py)
    }
}

fn matrix_index(name: &str) -> PyResult<usize> {
    MATRIX_NAMES
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown matrix {name:?}; expected one of {MATRIX_NAMES:?}")))
}

fn parse_order(order: &str) -> PyResult<PruneOrder> {
    match order {
        "smallest_first" => Ok(PruneOrder::SmallestFirst),
        "largest_first" => Ok(PruneOrder::LargestFirst),
        other => Err(PyValueError::new_err(format!("unknown pruning order {other:?}"))),
    }
}

#[pymethods]
impl PyTrainedRun {
    #[getter]
    fn iters(&self) -> usize {
        self.run.trajectory.iters
    }

    /// Iterations with stored weights.
    fn snapshot_iters(&self) -> Vec<usize> {
        self.run.trajectory.snapshots.iter().map(|(t, _)| *t).collect()
    }

    /// The metrics log as a list of dicts.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.run
            .trajectory
            .metrics_log
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("iter", r.iter)?;
                d.set_item("train_hinge", r.train_hinge)?;
                d.set_item("test_hinge", r.test_hinge)?;
                d.set_item("zero_one", r.zero_one)?;
                d.set_item("attn_relevant", r.attn_relevant)?;
                Ok(d)
            })
            .collect()
    }

    /// Test `(hinge, zero_one, attn_relevant)` of the weights at `iteration` (default: last).
    #[pyo3(signature = (iteration = None))]
    fn evaluate(&self, iteration: Option<usize>) -> PyResult<(f64, f64, f64)> {
        let m = evaluate(self.params_at(iteration)?, &self.run.data.test).map_err(to_py)?;
        Ok((m.hinge, m.zero_one_error, m.attn_on_relevant))
    }

    /// One of `W_Q`, `W_K`, `W_V`, `W_O` at `iteration` (default: last).
    #[pyo3(signature = (name, iteration = None))]
    fn weights(&self, name: &str, iteration: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let idx = matrix_index(name)?;
        Ok(self.params_at(iteration)?.trainable()[idx].to_rows())
    }

    /// Singular values of `W^(t) - W^(0)` for the named matrix.
    #[pyo3(signature = (name, iteration = None))]
    fn update_spectrum(&self, name: &str, iteration: Option<usize>) -> PyResult<Vec<f64>> {
        let idx = matrix_index(name)?;
        let now = self.params_at(iteration)?.trainable()[idx];
        let start = self.run.trajectory.initial.trainable()[idx];
        singular_values(&now.sub(start).map_err(to_py)?).map_err(to_py)
    }

    /// `(rank, hinge, zero_one, attn_relevant)` per requested rank.
    fn rank_sweep(&self, ranks: Vec<usize>) -> PyResult<Vec<(usize, f64, f64, f64)>> {
        let points = lowrank_core::analysis::rank_sweep(&self.run.trajectory, &ranks, &self.run.data.test).map_err(to_py)?;
        Ok(points
            .into_iter()
            .map(|(r, m)| (r, m.hinge, m.zero_one_error, m.attn_on_relevant))
            .collect())
    }

    /// `(rate, hinge, zero_one)` per rate for `"smallest_first"` or `"largest_first"`.
    fn prune_sweep(&self, rates: Vec<f64>, order: &str) -> PyResult<Vec<(f64, f64, f64)>> {
        let order = parse_order(order)?;
        let points = sweep_pruning(&self.run.trajectory.final_params, &rates, order, &self.run.data.test).map_err(to_py)?;
        Ok(points
            .into_iter()
            .map(|p| (p.rate, p.metrics.hinge, p.metrics.zero_one_error))
            .collect())
    }

    /// Row norms of the trained `W_O` (neuron order) and the small-neuron fraction.
    fn neuron_norms(&self) -> (Vec<f64>, f64) {
        let fin = &self.run.trajectory.final_params;
        let stats = neuron_stats(&fin.w_o, &fin.a, &self.run.data.patterns);
        (stats.norms, stats.small_fraction)
    }

    /// The structural report on the weight updates, as a JSON string.
    fn theorem_report(&self) -> PyResult<String> {
        let report = theorem_check(&self.run.trajectory, &self.run.data.patterns, &self.config.analysis).map_err(to_py)?;
        serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Trains the model described by `config`.
#[pyfunction]
fn train(py: Python<'_>, config: PyConfig) -> PyResult<PyTrainedRun> {
    let cfg = config.inner;
    let run = py.detach(|| pipeline::train_run(&cfg)).map_err(to_py)?;
    Ok(PyTrainedRun { config: cfg, run })
}

/// Runs a CLI subcommand and returns the written paths, relative to the output directory.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: PyConfig, command: &str) -> PyResult<Vec<PathBuf>> {
    let command: Command = command.parse().map_err(to_py)?;
    let summary = py
        .detach(|| pipeline::run_experiment(&config.inner, command))
        .map_err(to_py)?;
    Ok(summary.written)
}

/// Thin SVD `(u, s, v)` of a list-of-rows matrix.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn svd(rows: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let dec = jacobi_svd(&matrix(rows)?).map_err(to_py)?;
    Ok((dec.u.to_rows(), dec.s, dec.v.to_rows()))
}

/// Best rank-`rank` approximation in Frobenius norm.
#[pyfunction]
fn truncate(rows: Vec<Vec<f64>>, rank: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(truncate_rank(&matrix(rows)?, rank).map_err(to_py)?.to_rows())
}

/// Analytic vs finite-difference gradients on random small instances.
#[pyfunction]
#[pyo3(signature = (trials = 20, seed = 0))]
fn check_gradients<'py>(py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let report = run_grad_check(trials, seed).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("trials", report.trials)?;
    d.set_item("max_rel_error", report.max_rel_error)?;
    d.set_item("per_matrix", report.per_matrix)?;
    d.set_item("resampled", report.resampled)?;
    Ok(d)
}

#[pymodule]
fn lowrank_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainedRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(truncate, m)?)?;
    m.add_function(wrap_pyfunction!(check_gradients, m)?)?;
    m.add("MATRIX_NAMES", MATRIX_NAMES.to_vec())?;
    Ok(())
}
