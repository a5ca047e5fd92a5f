//! Python bindings for the schedules, schedulers, token process, W2 and the harness runners.

use disa_core::harness::{self, ExperimentConfig};
use disa_core::process::KernelKind;
use disa_core::schedule::{make_diffusion_grid, make_flow_grid};
use disa_core::{diagnostics, DiffusionSchedule, Error, SchedulerKind, TimeGrid};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::collections::BTreeMap;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter { .. } | Error::Config(_) | Error::Shape { .. } | Error::Grid(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

/// Base-resolution noise schedule.
#[pyclass(name = "DiffusionSchedule", frozen)]
struct PySchedule(DiffusionSchedule);

#[pymethods]
impl PySchedule {
    #[staticmethod]
    #[pyo3(signature = (base_step_count = 1000, small_offset = 0.008))]
    fn cosine(base_step_count: usize, small_offset: f64) -> PyResult<Self> {
        DiffusionSchedule::cosine(base_step_count, small_offset).map(Self).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (base_step_count = 1000, beta_start = 1e-4, beta_end = 0.02))]
    fn linear(base_step_count: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        DiffusionSchedule::linear(base_step_count, beta_start, beta_end).map(Self).map_err(to_py)
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.0.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.0.alpha_bars().to_vec()
    }

    #[getter]
    fn base_step_count(&self) -> usize {
        self.0.base_step_count()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("schedule serializes")
    }

    /// `num_steps` hops from `start_index` to the clean endpoint.
    #[pyo3(signature = (num_steps, start_index = 999))]
    fn grid(&self, num_steps: usize, start_index: usize) -> PyResult<Vec<usize>> {
        match make_diffusion_grid(&self.0, num_steps, start_index).map_err(to_py)? {
            TimeGrid::DiscreteDiffusion(p) => Ok(p),
            TimeGrid::ContinuousFlow(_) => unreachable!(),
        }
    }
}

#[pyfunction]
#[pyo3(signature = (num_steps, start_time = 1.0))]
fn flow_grid(num_steps: usize, start_time: f64) -> PyResult<Vec<f64>> {
    Ok(make_flow_grid(num_steps, start_time).map_err(to_py)?.points())
}

#[pyclass(name = "StepScheduler", frozen)]
struct PyScheduler(disa_core::StepScheduler);

#[pymethods]
impl PyScheduler {
    #[new]
    #[pyo3(signature = (kind, t_early, ar_steps, t_late = None, min_steps = 1))]
    fn new(kind: &str, t_early: usize, ar_steps: usize, t_late: Option<usize>, min_steps: usize) -> PyResult<Self> {
        let kind: SchedulerKind = kind.parse().map_err(to_py)?;
        disa_core::StepScheduler::new(kind, t_early, t_late.unwrap_or(t_early), ar_steps)
            .and_then(|s| s.with_min_steps(min_steps))
            .map(Self)
            .map_err(to_py)
    }

    fn steps_at(&self, k: usize) -> PyResult<usize> {
        self.0.steps_at(k).map_err(to_py)
    }

    fn table(&self) -> Vec<(usize, usize)> {
        self.0.schedule_table()
    }

    #[pyo3(signature = (calls_per_step = 1, surcharge_per_ar_step = 0))]
    fn total_nfe(&self, calls_per_step: usize, surcharge_per_ar_step: usize) -> usize {
        self.0.total_nfe(calls_per_step, surcharge_per_ar_step)
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label()
    }

    fn __repr__(&self) -> String {
        format!("StepScheduler({})", self.0.label())
    }
}

/// Exact next-group distribution.
#[pyclass(name = "ConditionalGaussian", frozen)]
struct PyConditional(disa_core::ConditionalGaussian);

#[pymethods]
impl PyConditional {
    #[getter]
    fn mean(&self) -> Vec<Vec<f64>> {
        rows(self.0.mean())
    }

    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        rows(self.0.covariance())
    }

    #[getter]
    fn positions(&self) -> Vec<usize> {
        self.0.target_positions().to_vec()
    }

    fn trace(&self) -> f64 {
        self.0.trace()
    }

    fn score(&self, x_t: Vec<Vec<f64>>, alpha_bar: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&disa_core::process::exact_score(&self.0, &matrix(&x_t)?, alpha_bar).map_err(to_py)?))
    }

    fn velocity(&self, x_t: Vec<Vec<f64>>, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&disa_core::process::exact_velocity(&self.0, &matrix(&x_t)?, t).map_err(to_py)?))
    }
}

#[pyclass(name = "TokenProcess", frozen)]
struct PyProcess(disa_core::TokenProcess);

#[pymethods]
impl PyProcess {
    #[new]
    #[pyo3(signature = (grid_height = 4, grid_width = 4, token_dim = 4, kernel = "rbf", length_scale = 2.0, marginal_std = 1.0, jitter = 1e-8))]
    fn new(
        grid_height: usize,
        grid_width: usize,
        token_dim: usize,
        kernel: &str,
        length_scale: f64,
        marginal_std: f64,
        jitter: f64,
    ) -> PyResult<Self> {
        let kernel = match kernel {
            "rbf" => KernelKind::Rbf,
            "ar1" => KernelKind::Ar1,
            other => return Err(PyValueError::new_err(format!("unknown kernel `{other}`"))),
        };
        let spec = disa_core::TokenProcessSpec {
            grid_height,
            grid_width,
            token_dim,
            kernel,
            length_scale,
            marginal_std,
            mean_field: None,
            jitter,
        };
        disa_core::TokenProcess::new(spec).map(Self).map_err(to_py)
    }

    fn covariance(&self) -> Vec<Vec<f64>> {
        rows(self.0.covariance())
    }

    /// Conditional of `targets` given `(position, values)` pairs.
    fn conditional(&self, observed: Vec<(usize, Vec<f64>)>, targets: Vec<usize>) -> PyResult<PyConditional> {
        self.0.conditional(&observed, &targets).map(PyConditional).map_err(to_py)
    }
}

#[pyfunction]
fn w2_gaussian(mean1: Vec<f64>, cov1: Vec<Vec<f64>>, mean2: Vec<f64>, cov2: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::w2_gaussian(&DVector::from_vec(mean1), &matrix(&cov1)?, &DVector::from_vec(mean2), &matrix(&cov2)?)
        .map_err(to_py)
}

fn config(config_json: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<ExperimentConfig> {
    let mut c = match config_json {
        Some(text) => ExperimentConfig::from_json(text).map_err(to_py)?,
        None => ExperimentConfig::default(),
    };
    for s in overrides.unwrap_or_default() {
        c.set(&s).map_err(to_py)?;
    }
    c.validate().map_err(to_py)?;
    Ok(c)
}

/// Runs a harness command and returns `{artifact name: contents}`; nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (command, config_json = None, overrides = None))]
fn run(py: Python<'_>, command: &str, config_json: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<BTreeMap<String, String>> {
    let c = config(config_json, overrides)?;
    let out = py
        .detach(|| match command {
            "simulate" => harness::run_simulate(&c),
            "diagnose" => harness::run_diagnose(&c),
            "sweep" => harness::run_sweep(&c),
            "oracle-check" | "oracle_check" => harness::run_oracle_check(&c, false),
            other => Err(Error::Config(format!("unknown command `{other}`"))),
        })
        .map_err(to_py)?;
    let mut files: BTreeMap<String, String> = out.artifacts.into_iter().map(|a| (a.name, a.contents)).collect();
    files.insert("config.json".into(), c.to_json());
    Ok(files)
}

#[pyfunction]
#[pyo3(signature = (config_json = None, overrides = None))]
fn simulate(py: Python<'_>, config_json: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<BTreeMap<String, String>> {
    run(py, "simulate", config_json, overrides)
}

/// Default experiment config as JSON.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_json()
}

#[pymodule]
fn disa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyScheduler>()?;
    m.add_class::<PyProcess>()?;
    m.add_class::<PyConditional>()?;
    m.add_function(wrap_pyfunction!(flow_grid, m)?)?;
    m.add_function(wrap_pyfunction!(w2_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
