//! Python bindings. Report structures cross the boundary as plain dicts
//! and lists (via their JSON form); drivers, signatures and problems are
//! wrapped as classes.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use roughdyn::cocycle::{inverse_jacobian, solve_linearized};
use roughdyn::drivers::{fbm_grid, DriverMeta, FbmSpec, RandomScenario, RoughPathGrid};
use roughdyn::experiment::{builtin, builtins, run_experiment, verify_manifest, ExperimentSpec};
use roughdyn::manifold::{backward_probe, radius_estimate, stability_probe, BackwardConfig, Bisection, ProbeConfig};
use roughdyn::problem::Problem;
use roughdyn::solver::{solve_rde, StepControl};
use roughdyn::spectrum::{lyapunov_qr, SpectrumConfig};
use roughdyn::{Error, SigElement};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        e if e.is_numerical() => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[pyclass(name = "Signature", module = "pyroughdyn", frozen)]
struct PySignature {
    inner: SigElement,
}

#[pymethods]
impl PySignature {
    /// Signature of a straight segment with increment `v`.
    #[staticmethod]
    fn segment(v: Vec<f64>) -> Self {
        Self {
            inner: SigElement::segment_exp(&v),
        }
    }

    #[staticmethod]
    fn identity(dim: usize) -> Self {
        Self {
            inner: SigElement::zero(dim),
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn level1(&self) -> Vec<f64> {
        self.inner.a().to_vec()
    }

    #[getter]
    fn level2(&self) -> Vec<Vec<f64>> {
        let d = self.inner.dim();
        (0..d).map(|i| (0..d).map(|j| self.inner.b_at(i, j)).collect()).collect()
    }

    #[getter]
    fn level3(&self) -> Vec<Vec<Vec<f64>>> {
        let d = self.inner.dim();
        (0..d)
            .map(|i| (0..d).map(|j| (0..d).map(|k| self.inner.c_at(i, j, k)).collect()).collect())
            .collect()
    }

    /// Chen product `self ⊗ other` (concatenation of the underlying paths).
    fn chen_mul(&self, other: &PySignature) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.chen_mul(&other.inner).map_err(py_err)?,
        })
    }

    fn __mul__(&self, other: &PySignature) -> PyResult<Self> {
        self.chen_mul(other)
    }

    fn reverse(&self) -> Self {
        Self {
            inner: self.inner.reverse_element(),
        }
    }

    fn shuffle_defect(&self) -> f64 {
        self.inner.shuffle_defect()
    }

    fn max_abs_diff(&self, other: &PySignature) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        let [n1, n2, n3] = self.inner.level_norms();
        format!("Signature(dim={}, |level1|={n1:.3e}, |level2|={n2:.3e}, |level3|={n3:.3e})", self.inner.dim())
    }
}

#[pyclass(name = "Driver", module = "pyroughdyn", frozen)]
struct PyDriver {
    inner: Arc<RoughPathGrid>,
}

#[pymethods]
impl PyDriver {
    /// fBm driver with `steps` grid intervals, each lifted from `refine`
    /// samples.
    #[staticmethod]
    #[pyo3(signature = (hurst, dim, steps, horizon = 1.0, seed = 0, shift = 0, refine = 4, gamma = None))]
    #[allow(clippy::too_many_arguments)]
    fn fbm(
        hurst: f64,
        dim: usize,
        steps: usize,
        horizon: f64,
        seed: u64,
        shift: usize,
        refine: usize,
        gamma: Option<f64>,
    ) -> PyResult<Self> {
        let spec = FbmSpec {
            hurst,
            dim,
            steps,
            horizon,
            refine,
            gamma,
        };
        let grid = fbm_grid(&spec, RandomScenario::new(seed).shifted(shift)).map_err(py_err)?;
        Ok(Self { inner: Arc::new(grid) })
    }

    /// Piecewise-linear driver on `[0, horizon]` from `N·refine` increments.
    #[staticmethod]
    #[pyo3(signature = (increments, horizon = 1.0, refine = 1, gamma = 0.5))]
    fn from_increments(increments: Vec<Vec<f64>>, horizon: f64, refine: usize, gamma: f64) -> PyResult<Self> {
        let grid = RoughPathGrid::lift_uniform(horizon, &increments, refine, gamma, DriverMeta::polyline()).map_err(py_err)?;
        Ok(Self { inner: Arc::new(grid) })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times().to_vec()
    }

    /// Spatial signature between grid nodes `s ≤ t`.
    fn sig(&self, s: usize, t: usize) -> PyResult<PySignature> {
        Ok(PySignature {
            inner: self.inner.sig(s, t).map_err(py_err)?,
        })
    }

    fn max_shuffle_defect(&self) -> f64 {
        self.inner.max_shuffle_defect()
    }

    #[pyo3(signature = (gamma1, i0 = 0, i1 = None))]
    fn holder_norm(&self, gamma1: f64, i0: usize, i1: Option<usize>) -> PyResult<f64> {
        self.inner
            .holder_norm(gamma1, i0, i1.unwrap_or(self.inner.len()))
            .map_err(py_err)
    }

    /// Driver reversed on `[0, t_node]` (whole grid by default).
    #[pyo3(signature = (node = None))]
    fn reverse(&self, node: Option<usize>) -> PyResult<Self> {
        let g = self.inner.reverse_driver(node.unwrap_or(self.inner.len())).map_err(py_err)?;
        Ok(Self { inner: Arc::new(g) })
    }

    fn window(&self, s: usize, e: usize) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(self.inner.window(s, e).map_err(py_err)?),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Driver(dim={}, steps={}, horizon={}, gamma={})",
            self.inner.dim(),
            self.inner.len(),
            self.inner.horizon(),
            self.inner.gamma()
        )
    }
}

/// Field, driver family and stationary point taken from an experiment
/// spec (TOML text or built-in name).
#[pyclass(name = "Problem", module = "pyroughdyn", frozen)]
struct PyProblem {
    inner: Problem,
}

fn parse_spec(spec: &str) -> Result<ExperimentSpec, Error> {
    match builtin(spec) {
        Some(b) => ExperimentSpec::from_toml_str(b.spec),
        None => ExperimentSpec::from_toml_str(spec),
    }
}

impl PyProblem {
    fn grid(&self, steps: usize, horizon: f64, seed: u64) -> PyResult<RoughPathGrid> {
        self.inner.driver.grid(steps, horizon, RandomScenario::new(seed)).map_err(py_err)
    }
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        let inner = parse_spec(spec).and_then(|s| s.problem()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn driver_dim(&self) -> usize {
        self.inner.driver.dim()
    }

    /// Driver realization used by this problem for `seed`.
    #[pyo3(signature = (steps, horizon = 1.0, seed = 0))]
    fn driver(&self, steps: usize, horizon: f64, seed: u64) -> PyResult<PyDriver> {
        Ok(PyDriver {
            inner: Arc::new(self.grid(steps, horizon, seed)?),
        })
    }

    /// Solves from `z0`; returns `{"nodes", "times", "states"}`.
    #[pyo3(signature = (z0, steps, horizon = 1.0, seed = 0, adaptive = false))]
    fn solve(&self, py: Python<'_>, z0: Vec<f64>, steps: usize, horizon: f64, seed: u64, adaptive: bool) -> PyResult<Py<PyAny>> {
        let grid = self.grid(steps, horizon, seed)?;
        let ctrl = if adaptive { StepControl::default() } else { self.inner.control };
        let run = solve_rde(&DVector::from_vec(z0), &grid, &self.inner.field, &ctrl).map_err(py_err)?;
        let states: Vec<Vec<f64>> = run.states.iter().map(|z| z.iter().copied().collect()).collect();
        to_py(py, &serde_json::json!({ "nodes": run.nodes, "times": run.times, "states": states }))
    }

    /// `(ψ, ψ̃)`: the Jacobian of the flow over the horizon and its inverse
    /// from the reversed driver, as nested lists.
    #[pyo3(signature = (z0, steps, horizon = 1.0, seed = 0))]
    fn jacobian(&self, z0: Vec<f64>, steps: usize, horizon: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let grid = self.grid(steps, horizon, seed)?;
        let run = solve_rde(&DVector::from_vec(z0), &grid, &self.inner.field, &self.inner.control).map_err(py_err)?;
        let lin = solve_linearized(&run, &grid, &self.inner.field).map_err(py_err)?;
        let inv = inverse_jacobian(&run, &grid, &self.inner.field, grid.len()).map_err(py_err)?;
        Ok((rows(lin.final_psi()), rows(&inv.psi)))
    }

    /// Lyapunov spectrum by discrete QR over the given scenario seeds.
    fn spectrum(&self, py: Python<'_>, t0: f64, windows: usize, steps_per_window: usize, seeds: Vec<u64>) -> PyResult<Py<PyAny>> {
        let cfg = SpectrumConfig {
            t0,
            windows,
            steps_per_window,
            seeds,
        };
        let s = py.detach(|| lyapunov_qr(&self.inner, &cfg)).map_err(py_err)?;
        to_py(py, &s)
    }

    /// Decay reports for trajectories started at `Y + offset`.
    #[pyo3(signature = (offsets, nu, t0, windows, steps_per_window, seed = 0, escape_cap = 10.0))]
    #[allow(clippy::too_many_arguments)]
    fn stability_probe(
        &self,
        py: Python<'_>,
        offsets: Vec<Vec<f64>>,
        nu: f64,
        t0: f64,
        windows: usize,
        steps_per_window: usize,
        seed: u64,
        escape_cap: f64,
    ) -> PyResult<Py<PyAny>> {
        let cfg = ProbeConfig {
            nu,
            t0,
            windows,
            steps_per_window,
            escape_cap,
            mu_minus: None,
        };
        let offs: Vec<DVector<f64>> = offsets.into_iter().map(DVector::from_vec).collect();
        let reps = stability_probe(&self.inner, &RandomScenario::new(seed), &offs, &cfg).map_err(py_err)?;
        to_py(py, &reps)
    }

    /// Bisection estimate of the stable-set radius for weight rate `nu`.
    #[pyo3(signature = (nu, t0, windows, steps_per_window, lo, hi, iters = 12, seed = 0, escape_cap = 10.0))]
    #[allow(clippy::too_many_arguments)]
    fn radius(
        &self,
        py: Python<'_>,
        nu: f64,
        t0: f64,
        windows: usize,
        steps_per_window: usize,
        lo: f64,
        hi: f64,
        iters: usize,
        seed: u64,
        escape_cap: f64,
    ) -> PyResult<Py<PyAny>> {
        let cfg = ProbeConfig {
            nu,
            t0,
            windows,
            steps_per_window,
            escape_cap,
            mu_minus: None,
        };
        let rep = radius_estimate(&self.inner, &RandomScenario::new(seed), &cfg, &Bisection { lo, hi, iters }, None)
            .map_err(py_err)?;
        to_py(py, &rep)
    }

    /// Pre-images of `z` window by window on the reversed driver.
    #[pyo3(signature = (z, t0, windows, steps_per_window, seed = 0, escape_cap = 10.0))]
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        py: Python<'_>,
        z: Vec<f64>,
        t0: f64,
        windows: usize,
        steps_per_window: usize,
        seed: u64,
        escape_cap: f64,
    ) -> PyResult<Py<PyAny>> {
        let cfg = BackwardConfig {
            t0,
            windows,
            steps_per_window,
            escape_cap,
        };
        let rep = backward_probe(&self.inner, &RandomScenario::new(seed), &DVector::from_vec(z), &cfg).map_err(py_err)?;
        to_py(py, &rep)
    }
}

/// `steps × dim` fBm increments on a uniform grid of `[0, horizon]`.
#[pyfunction]
#[pyo3(signature = (hurst, dim, steps, horizon = 1.0, seed = 0, shift = 0))]
fn sample_fbm(hurst: f64, dim: usize, steps: usize, horizon: f64, seed: u64, shift: usize) -> PyResult<Vec<Vec<f64>>> {
    roughdyn::drivers::sample_fbm(hurst, dim, steps, horizon, RandomScenario::new(seed).shifted(shift)).map_err(py_err)
}

/// Names of the built-in experiment specs.
#[pyfunction]
fn builtin_names() -> Vec<&'static str> {
    builtins().into_iter().map(|b| b.name).collect()
}

/// TOML text of a built-in spec.
#[pyfunction]
fn builtin_spec(name: &str) -> PyResult<&'static str> {
    builtin(name)
        .map(|b| b.spec)
        .ok_or_else(|| PyValueError::new_err(format!("no built-in spec named {name}")))
}

/// Runs a spec (TOML text or built-in name) into `out_dir`; returns
/// `{"files", "checks", "failure"}`.
#[pyfunction]
fn run(py: Python<'_>, spec: &str, out_dir: &str) -> PyResult<Py<PyAny>> {
    let spec = parse_spec(spec).map_err(py_err)?;
    let out = py.detach(|| run_experiment(&spec, Path::new(out_dir))).map_err(py_err)?;
    to_py(
        py,
        &serde_json::json!({ "files": out.files, "checks": out.checks, "failure": out.failure }),
    )
}

/// Paths whose hash no longer matches the manifest in `out_dir`.
#[pyfunction]
fn verify(out_dir: &str) -> PyResult<Vec<String>> {
    verify_manifest(Path::new(out_dir)).map_err(py_err)
}

#[pymodule]
fn pyroughdyn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySignature>()?;
    m.add_class::<PyDriver>()?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(sample_fbm, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_names, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_spec, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
