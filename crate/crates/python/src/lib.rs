//! Python bindings for `apts_core`.

use std::path::PathBuf;

use apts_core::apts::make_partition as core_partition;
use apts_core::data::make_batches as core_batches;
use apts_core::harness::{run_experiment as core_run, ExperimentConfig};
use apts_core::lsr1::Lsr1Memory as CoreMemory;
use apts_core::model::{Batch, Mlp as CoreMlp, MlpSpec, TrainableMask};
use apts_core::trloop::{rosenbrock_config, tr_minimize, Rosenbrock};
use apts_core::trsubproblem::solve_obs as core_obs;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn batch(inputs: Vec<f64>, features: usize, targets: Vec<usize>) -> PyResult<Batch> {
    Batch::new(inputs, features, targets).map_err(err)
}

/// Fully connected classifier; parameters are flat lists.
#[pyclass(frozen)]
struct Mlp {
    inner: CoreMlp,
}

#[pymethods]
impl Mlp {
    #[new]
    #[pyo3(signature = (widths, seed = 0))]
    fn new(widths: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreMlp::new(&MlpSpec::new(widths, seed)).map_err(err)?,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn segment_count(&self) -> usize {
        self.inner.segment_count()
    }

    /// (offset, length) of each parameter segment.
    fn segments(&self) -> Vec<(usize, usize)> {
        self.inner.segments().iter().map(|s| (s.offset, s.len)).collect()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        self.inner.init_params(seed).values
    }

    /// Mean cross-entropy. `inputs` is row-major with `features` columns.
    fn loss(&self, params: Vec<f64>, inputs: Vec<f64>, features: usize, targets: Vec<usize>) -> PyResult<f64> {
        let b = batch(inputs, features, targets)?;
        self.inner.loss(&params, &b).map_err(err)
    }

    fn loss_and_grad(
        &self,
        params: Vec<f64>,
        inputs: Vec<f64>,
        features: usize,
        targets: Vec<usize>,
    ) -> PyResult<(f64, Vec<f64>)> {
        let b = batch(inputs, features, targets)?;
        let mask = TrainableMask::all(self.inner.segment_count());
        self.inner.loss_and_grad(&params, &b, &mask).map_err(err)
    }

    /// (loss, accuracy)
    fn evaluate(&self, params: Vec<f64>, inputs: Vec<f64>, features: usize, targets: Vec<usize>) -> PyResult<(f64, f64)> {
        let b = batch(inputs, features, targets)?;
        let e = self.inner.evaluate(&params, &b).map_err(err)?;
        Ok((e.loss, e.accuracy))
    }
}

/// Limited-memory SR1 approximation.
#[pyclass]
struct Lsr1Memory {
    inner: CoreMemory,
}

#[pymethods]
impl Lsr1Memory {
    #[new]
    #[pyo3(signature = (capacity, gamma = None))]
    fn new(capacity: usize, gamma: Option<f64>) -> PyResult<Self> {
        let inner = match gamma {
            Some(g) => CoreMemory::with_fixed_gamma(capacity, g),
            None => CoreMemory::new(capacity),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// Returns False when the pair is skipped.
    fn update(&mut self, s: Vec<f64>, y: Vec<f64>) -> PyResult<bool> {
        self.inner.update(&s, &y).map_err(err)
    }

    fn matvec(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.matvec(&v).map_err(err)
    }

    /// Dense n×n matrix as a list of rows.
    fn to_dense(&self, n: usize) -> PyResult<Vec<Vec<f64>>> {
        let d = self.inner.to_dense(n).map_err(err)?;
        Ok((0..n).map(|i| d.row(i).to_vec()).collect())
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Minimizes gᵀs + ½sᵀBs subject to ‖s‖₂ ≤ delta.
#[pyfunction]
fn solve_obs<'py>(py: Python<'py>, memory: &Lsr1Memory, grad: Vec<f64>, delta: f64) -> PyResult<Bound<'py, PyDict>> {
    let sol = core_obs(&memory.inner, &grad, delta).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("step", sol.step)?;
    d.set_item("predicted_reduction", sol.predicted_reduction)?;
    d.set_item("sigma", sol.sigma)?;
    d.set_item("boundary_hit", sol.boundary_hit)?;
    d.set_item("kind", format!("{:?}", sol.kind).to_lowercase())?;
    Ok(d)
}

/// Segment indices per subdomain.
#[pyfunction]
fn make_partition(segment_count: usize, subdomains: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    Ok(core_partition(segment_count, subdomains, seed).map_err(err)?.assignment)
}

/// Sample indices per batch.
#[pyfunction]
fn make_batches(samples: usize, batch_count: usize, overlap: f64, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    Ok(core_batches(samples, batch_count, overlap, seed).map_err(err)?.index_lists)
}

/// Second-order trust region on Rosenbrock. Returns (x, iterations, converged).
#[pyfunction]
#[pyo3(signature = (x0, max_iters = 500, grad_tol = 1e-8))]
fn rosenbrock_tr(py: Python<'_>, x0: Vec<f64>, max_iters: usize, grad_tol: f64) -> PyResult<(Vec<f64>, usize, bool)> {
    let traj = py
        .detach(|| tr_minimize(&Rosenbrock, x0, &rosenbrock_config(), max_iters, grad_tol))
        .map_err(err)?;
    Ok((traj.params, traj.records.len(), traj.converged))
}

/// Runs an experiment from a TOML file and returns the per-epoch summary.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir = None, epochs = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    out_dir: Option<PathBuf>,
    epochs: Option<usize>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut config = ExperimentConfig::from_file(&config_path).map_err(err)?;
    if let Some(dir) = out_dir {
        config.out_dir = dir;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    let report = py.detach(|| core_run(&config)).map_err(err)?;
    report
        .summary
        .iter()
        .map(|row| {
            let d = PyDict::new(py);
            d.set_item("epoch", row.epoch)?;
            d.set_item("train_loss", row.train_loss.mean)?;
            d.set_item("test_loss", row.test_loss.map(|s| s.mean))?;
            d.set_item("test_accuracy", row.test_accuracy.map(|s| s.mean))?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn apts(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mlp>()?;
    m.add_class::<Lsr1Memory>()?;
    m.add_function(wrap_pyfunction!(solve_obs, m)?)?;
    m.add_function(wrap_pyfunction!(make_partition, m)?)?;
    m.add_function(wrap_pyfunction!(make_batches, m)?)?;
    m.add_function(wrap_pyfunction!(rosenbrock_tr, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
