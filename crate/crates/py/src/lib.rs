//! Python bindings for the `renorm` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use renorm::gradcheck::CheckMode;
use renorm::harness::{self, ExperimentConfig, MetricsRow};
use renorm::network::NormMode;
use renorm::norm::{self, CorrectionBounds, CorrectionSchedule};
use renorm::tensor::Axes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", module = "pyrenorm", from_py_object)]
#[derive(Clone)]
pub struct Tensor(renorm::tensor::Tensor);

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        renorm::tensor::Tensor::new(shape, data).map(Tensor).map_err(value_err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor(renorm::tensor::Tensor::zeros(shape))
    }

    /// Gaussian samples from a seeded generator.
    #[staticmethod]
    #[pyo3(signature = (shape, seed, mean=0.0, std=1.0))]
    fn normal(shape: Vec<usize>, seed: u64, mean: f64, std: f64) -> PyResult<Self> {
        renorm::rng::Rng::new(seed).normal(&shape, mean, std).map(Tensor).map_err(value_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn max_abs_diff(&self, other: &Tensor) -> PyResult<f64> {
        self.0.max_abs_diff(&other.0).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Moving statistics and affine parameters of one normalization layer.
#[pyclass(name = "NormState", module = "pyrenorm", from_py_object)]
#[derive(Clone)]
pub struct NormState(norm::NormState);

#[pymethods]
impl NormState {
    #[new]
    #[pyo3(signature = (features, epsilon=norm::DEFAULT_EPSILON, alpha=norm::DEFAULT_ALPHA, learn_gamma=true))]
    fn new(features: usize, epsilon: f64, alpha: f64, learn_gamma: bool) -> PyResult<Self> {
        norm::NormState::new(features, epsilon, alpha, learn_gamma).map(NormState).map_err(value_err)
    }

    #[getter]
    fn mu(&self) -> Tensor {
        Tensor(self.0.mu.clone())
    }

    #[setter]
    fn set_mu(&mut self, t: Tensor) {
        self.0.mu = t.0;
    }

    #[getter]
    fn sigma(&self) -> Tensor {
        Tensor(self.0.sigma.clone())
    }

    #[setter]
    fn set_sigma(&mut self, t: Tensor) {
        self.0.sigma = t.0;
    }

    #[getter]
    fn beta(&self) -> Tensor {
        Tensor(self.0.beta.clone())
    }

    #[setter]
    fn set_beta(&mut self, t: Tensor) {
        self.0.beta = t.0;
    }

    #[getter]
    fn gamma(&self) -> Tensor {
        Tensor(self.0.gamma.clone())
    }

    #[setter]
    fn set_gamma(&mut self, t: Tensor) {
        self.0.gamma = t.0;
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.0.epsilon
    }

    #[getter]
    fn features(&self) -> usize {
        self.0.features()
    }

    fn copy(&self) -> Self {
        self.clone()
    }
}

/// Step-indexed `(r_max, d_max)` limits.
#[pyclass(name = "CorrectionSchedule", module = "pyrenorm", from_py_object)]
#[derive(Clone)]
pub struct Schedule(CorrectionSchedule);

#[pymethods]
impl Schedule {
    #[new]
    fn new(warmup_steps: u64, r_ramp_end: u64, d_ramp_end: u64, r_max_final: f64, d_max_final: f64) -> PyResult<Self> {
        let s = CorrectionSchedule { warmup_steps, r_ramp_end, d_ramp_end, r_max_final, d_max_final };
        s.validate().map_err(value_err)?;
        Ok(Schedule(s))
    }

    #[staticmethod]
    fn desk() -> Self {
        Schedule(CorrectionSchedule::DESK)
    }

    #[staticmethod]
    fn reference() -> Self {
        Schedule(CorrectionSchedule::REFERENCE)
    }

    fn bounds(&self, step: u64) -> (f64, f64) {
        let b = self.0.bounds(step);
        (b.r_max, b.d_max)
    }
}

/// Saved values of a training forward.
#[pyclass(name = "ForwardCache", module = "pyrenorm", frozen)]
pub struct Cache(norm::ForwardCache);

#[pymethods]
impl Cache {
    #[getter]
    fn r(&self) -> Tensor {
        Tensor(self.0.r.clone())
    }

    #[getter]
    fn d(&self) -> Tensor {
        Tensor(self.0.d.clone())
    }

    #[getter]
    fn mu_b(&self) -> Tensor {
        Tensor(self.0.mu_b.clone())
    }

    #[getter]
    fn sigma_b(&self) -> Tensor {
        Tensor(self.0.sigma_b.clone())
    }

    #[getter]
    fn r_clip_fraction(&self) -> f64 {
        self.0.r_clip_fraction()
    }

    #[getter]
    fn d_clip_fraction(&self) -> f64 {
        self.0.d_clip_fraction()
    }
}

/// Renormalizing training forward. Updates `state` in place.
#[pyfunction]
#[pyo3(signature = (x, state, r_max=f64::INFINITY, d_max=f64::INFINITY))]
fn brn_forward_train(x: &Tensor, mut state: PyRefMut<'_, NormState>, r_max: f64, d_max: f64) -> PyResult<(Tensor, Cache)> {
    let bounds = CorrectionBounds::new(r_max, d_max).map_err(value_err)?;
    let axes = Axes::per_feature(x.0.rank());
    let (y, cache) = norm::brn_forward_train_bounded(&x.0, &mut state.0, &axes, bounds).map_err(value_err)?;
    Ok((Tensor(y), Cache(cache)))
}

/// Batch normalization training forward. Updates `state` in place.
#[pyfunction]
fn bn_forward_train(x: &Tensor, mut state: PyRefMut<'_, NormState>) -> PyResult<(Tensor, Cache)> {
    let axes = Axes::per_feature(x.0.rank());
    let (y, cache) = norm::bn_forward_train(&x.0, &mut state.0, &axes).map_err(value_err)?;
    Ok((Tensor(y), Cache(cache)))
}

#[pyfunction]
fn forward_inference(x: &Tensor, state: &NormState) -> PyResult<Tensor> {
    norm::norm_forward_inference(&x.0, &state.0).map(Tensor).map_err(value_err)
}

/// Returns `(d_x, d_beta, d_gamma)`; `d_gamma` is `None` when gamma is frozen.
/// `state` must be the state as it was before the forward.
#[pyfunction]
fn backward(d_y: &Tensor, cache: &Cache, state: &NormState) -> PyResult<(Tensor, Tensor, Option<Tensor>)> {
    let g = norm::brn_backward(&d_y.0, &cache.0, &state.0).map_err(value_err)?;
    Ok((Tensor(g.d_x), Tensor(g.d_beta), g.d_gamma.map(Tensor)))
}

fn report_dict<'py>(py: Python<'py>, r: &renorm::gradcheck::FdReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("label", &r.label)?;
    d.set_item("passed", r.passed)?;
    d.set_item("max_rel", r.max_rel())?;
    d.set_item("threshold", r.threshold)?;
    Ok(d)
}

/// Finite-difference check of one normalization layer, or the default suite
/// when `mode` is omitted.
#[pyfunction]
#[pyo3(signature = (mode=None, shape=None, seed=0))]
fn gradcheck<'py>(py: Python<'py>, mode: Option<&str>, shape: Option<Vec<usize>>, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let reports = match mode {
        None => renorm::gradcheck::default_suite().map_err(value_err)?,
        Some(m) => {
            let mode: CheckMode = m.parse().map_err(value_err)?;
            let shape = shape.unwrap_or_else(|| vec![8, 3]);
            vec![renorm::gradcheck::check_norm_backward(&shape, mode, seed).map_err(value_err)?]
        }
    };
    reports.iter().map(|r| report_dict(py, r)).collect()
}

fn row_dict<'py>(py: Python<'py>, row: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", row.step)?;
    d.set_item("train_loss", row.train_loss)?;
    d.set_item("val_acc_moving_avg", row.val_acc_moving_avg)?;
    d.set_item("val_acc_train_mode", row.val_acc_train_mode)?;
    d.set_item("val_acc_ema", row.val_acc_ema)?;
    d.set_item("clip_frac_r", row.clip_frac_r)?;
    d.set_item("clip_frac_d", row.clip_frac_d)?;
    d.set_item("wall_ms", row.wall_ms)?;
    Ok(d)
}

/// Trains one seed from a config file and returns the metrics rows.
///
/// `norm` (none | batchnorm | batchrenorm), `total_steps` and `eval_every`
/// override the file's values.
#[pyfunction]
#[pyo3(signature = (config, seed, out_dir=None, norm=None, total_steps=None, eval_every=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: PathBuf,
    seed: u64,
    out_dir: Option<PathBuf>,
    norm: Option<&str>,
    total_steps: Option<u64>,
    eval_every: Option<u64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = ExperimentConfig::load(&config).map_err(value_err)?;
    if let Some(n) = norm {
        cfg.norm = n.parse::<NormMode>().map_err(value_err)?;
    }
    if let Some(t) = total_steps {
        cfg.total_steps = t;
    }
    if let Some(e) = eval_every {
        cfg.eval_every = e;
    }
    let out = py
        .detach(|| harness::run_experiment(&cfg, seed, out_dir.as_deref()))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    out.rows.iter().map(|r| row_dict(py, r)).collect()
}

#[pymodule]
fn pyrenorm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<NormState>()?;
    m.add_class::<Schedule>()?;
    m.add_class::<Cache>()?;
    m.add_function(wrap_pyfunction!(brn_forward_train, m)?)?;
    m.add_function(wrap_pyfunction!(bn_forward_train, m)?)?;
    m.add_function(wrap_pyfunction!(forward_inference, m)?)?;
    m.add_function(wrap_pyfunction!(backward, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
