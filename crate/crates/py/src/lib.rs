//! Python bindings for the `gne_esc` library.

use std::path::PathBuf;

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use gne_esc::cli::{execute, oracles, verify};
use gne_esc::error::Error;
use gne_esc::flow::{full_info_rhs, PrimalDualState, StepSizes};
use gne_esc::game::{two_agent_quadratic, GameSpec};
use gne_esc::oracle::{solve_extragradient, solve_quadratic_kkt, ExtragradientOptions};
use gne_esc::scenario::{Overrides, Scenario};
use gne_esc::sets::{project, ConvexSet};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::InvalidSet(_) | Error::Dimension { .. } | Error::StepSize { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn vec(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A monotone game with box local sets and affine coupling `A u <= b`.
#[pyclass(name = "Game", module = "gne_esc", frozen)]
struct PyGame {
    inner: GameSpec,
}

#[pymethods]
impl PyGame {
    /// Two agents with targets (1, 1), coupling u1 + u2 <= 1.
    #[staticmethod]
    fn two_agent_quadratic() -> Self {
        Self { inner: two_agent_quadratic() }
    }

    /// The game of interval `interval` in a scenario file.
    #[staticmethod]
    #[pyo3(signature = (path, interval = 0))]
    fn from_scenario(path: PathBuf, interval: usize) -> PyResult<Self> {
        let sc = Scenario::load(&path, &Overrides::default()).map_err(py_err)?;
        let mut games = sc.games().map_err(py_err)?;
        if interval >= games.len() {
            return Err(PyValueError::new_err(format!("interval {interval} out of range (0..{})", games.len())));
        }
        Ok(Self { inner: games.swap_remove(interval) })
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn n_coupling(&self) -> usize {
        self.inner.n_coupling()
    }

    fn cost(&self, agent: usize, u: Vec<f64>) -> PyResult<f64> {
        if agent >= self.inner.n_agents() {
            return Err(PyValueError::new_err(format!("agent {agent} out of range")));
        }
        self.inner.cost(agent, &vec(u)).map_err(py_err)
    }

    fn pseudo_gradient(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.pseudo_gradient(&vec(u)).map_err(py_err)?.as_slice().to_vec())
    }

    fn kkt_residual(&self, u: Vec<f64>, lam: Vec<f64>) -> PyResult<f64> {
        self.inner.kkt_residual(&vec(u), &vec(lam)).map_err(py_err)
    }

    fn coupling_violation(&self, u: Vec<f64>) -> f64 {
        self.inner.coupling_violation(&vec(u))
    }

    fn project_local(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.project_local(&vec(u)).map_err(py_err)?.as_slice().to_vec())
    }

    /// Velocity `(du, dlam)` of the full-information primal-dual flow.
    fn flow(&self, u: Vec<f64>, lam: Vec<f64>, gamma: Vec<f64>, gamma0: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let steps = StepSizes::new(gamma, gamma0).map_err(py_err)?;
        let (du, dl) = full_info_rhs(&self.inner, &steps, &PrimalDualState::new(vec(u), vec(lam))).map_err(py_err)?;
        Ok((du.as_slice().to_vec(), dl.as_slice().to_vec()))
    }

    /// Variational equilibrium `(u, lam, residual)`.
    fn solve(&self) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
        let sol = match self.inner.costs().as_quadratic() {
            Some(_) => solve_quadratic_kkt(&self.inner).or_else(|_| solve_extragradient(&self.inner, None, ExtragradientOptions::default())),
            None => solve_extragradient(&self.inner, None, ExtragradientOptions::default()),
        }
        .map_err(py_err)?;
        Ok((sol.u, sol.lambda, sol.residual))
    }
}

/// Sampled trajectory and metrics of one closed-loop run.
#[pyclass(name = "RunResult", module = "gne_esc", frozen)]
struct PyRunResult {
    #[pyo3(get)]
    times: Vec<f64>,
    #[pyo3(get)]
    states: Vec<Vec<f64>>,
    #[pyo3(get)]
    status: String,
    metrics_json: String,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.metrics_json)
    }
}

/// A validated scenario file.
#[pyclass(name = "Scenario", module = "gne_esc")]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (path, *, mode = None, step = None, horizon = None, amplitude = None, k_omega = None, epsilon = None, seed = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        path: PathBuf,
        mode: Option<String>,
        step: Option<f64>,
        horizon: Option<f64>,
        amplitude: Option<f64>,
        k_omega: Option<f64>,
        epsilon: Option<f64>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mode = match mode {
            Some(m) => Some(m.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))?),
            None => None,
        };
        let o = Overrides { mode, step, horizon, amplitude, k_omega, epsilon, seed };
        Ok(Self { inner: Scenario::load(&path, &o).map_err(py_err)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.scenario.name.clone()
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }

    /// Reference equilibria, one `(u, lam, residual)` per interval.
    fn equilibria(&self) -> PyResult<Vec<(Vec<f64>, Vec<f64>, f64)>> {
        Ok(oracles(&self.inner, None).map_err(py_err)?.into_iter().map(|s| (s.u, s.lambda, s.residual)).collect())
    }

    fn run(&self, py: Python<'_>) -> PyResult<PyRunResult> {
        let sc = self.inner.clone();
        let out = py.detach(move || execute(&sc, None, None)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(PyRunResult {
            times: out.trajectory.times,
            states: out.trajectory.states.iter().map(|s| s.as_slice().to_vec()).collect(),
            status: out.metrics.status.clone(),
            metrics_json: serde_json::to_string(&out.metrics).map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
        })
    }

    /// Precondition checks as `(name, verdict, detail)` tuples.
    fn verify(&self, py: Python<'_>) -> PyResult<Vec<(String, String, String)>> {
        let sc = self.inner.clone();
        let checks = py.detach(move || verify(&sc)).map_err(py_err)?;
        Ok(checks
            .into_iter()
            .map(|c| {
                let v = serde_json::to_value(c.verdict).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
                (c.name, v, c.detail)
            })
            .collect())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }
}

/// Euclidean projection onto the box `[lower, upper]`.
#[pyfunction]
fn project_box(v: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> PyResult<Vec<f64>> {
    let set = ConvexSet::new_box(vec(lower), vec(upper)).map_err(py_err)?;
    Ok(project(&set, &vec(v)).map_err(py_err)?.as_slice().to_vec())
}

/// Euclidean projection onto the closed ball of `radius` around `center`.
#[pyfunction]
fn project_ball(v: Vec<f64>, center: Vec<f64>, radius: f64) -> PyResult<Vec<f64>> {
    let set = ConvexSet::new_ball(vec(center), radius).map_err(py_err)?;
    Ok(project(&set, &vec(v)).map_err(py_err)?.as_slice().to_vec())
}

#[pymodule]
#[pyo3(name = "gne_esc")]
fn gne_esc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGame>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(project_box, m)?)?;
    m.add_function(wrap_pyfunction!(project_ball, m)?)?;
    Ok(())
}
