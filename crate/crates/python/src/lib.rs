//! Python module `tsod_lqr`. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tsod_core::config::ExperimentConfig;
use tsod_core::controller::{self, PriorTerms};
use tsod_core::harness;
use tsod_core::linalg;
use tsod_core::lqr::{self, ConstraintSetP, ConstraintSetQ, CostMatrices, SolverOptions, ThetaParams};
use tsod_core::offline::{self, OfflineConfig};
use tsod_core::sim::RngStream;
use tsod_core::{EpisodeConfig, MultiSourceSummary, Variant};

type Rows = Vec<Vec<f64>>;

fn to_py(e: tsod_core::Error) -> PyErr {
    match e {
        tsod_core::Error::Config { .. }
        | tsod_core::Error::DimensionMismatch { .. }
        | tsod_core::Error::InvalidMatrix { .. }
        | tsod_core::Error::Domain(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(name: &'static str, rows: &Rows) -> PyResult<DMatrix<f64>> {
    linalg::matrix_from_rows(name, rows).map_err(to_py)
}

fn rows(m: &DMatrix<f64>) -> Rows {
    linalg::matrix_to_rows(m)
}

fn costs(n: usize, m: usize, q: Option<Rows>, r: Option<Rows>) -> PyResult<CostMatrices> {
    let q = q.map(|q| matrix("q_matrix", &q)).transpose()?.unwrap_or_else(|| DMatrix::identity(n, n));
    let r = r.map(|r| matrix("r_matrix", &r)).transpose()?.unwrap_or_else(|| DMatrix::identity(m, m));
    CostMatrices::new(q, r).map_err(to_py)
}

/// System parameters `[A B]`.
#[pyclass(name = "Theta", from_py_object)]
#[derive(Clone)]
pub struct PyTheta {
    inner: ThetaParams,
}

#[pymethods]
impl PyTheta {
    #[new]
    fn new(a: Rows, b: Rows) -> PyResult<Self> {
        Ok(Self {
            inner: ThetaParams::from_rows(&a, &b).map_err(to_py)?,
        })
    }

    #[getter]
    fn a(&self) -> Rows {
        rows(self.inner.a())
    }

    #[getter]
    fn b(&self) -> Rows {
        rows(self.inner.b())
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    /// `[Aᵀ; Bᵀ]`, shape `(n+m) × n`.
    fn stacked(&self) -> Rows {
        rows(&self.inner.stacked())
    }

    #[staticmethod]
    fn from_stacked(theta: Rows, n: usize) -> PyResult<Self> {
        let m = matrix("theta", &theta)?;
        Ok(Self {
            inner: ThetaParams::from_stacked(&m, n).map_err(to_py)?,
        })
    }

    fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }

    fn __repr__(&self) -> String {
        format!("Theta(a={:?}, b={:?})", self.a(), self.b())
    }
}

/// Returns `(P, K, J)`.
#[pyfunction]
#[pyo3(signature = (theta, q=None, r=None))]
fn solve_dare(theta: &PyTheta, q: Option<Rows>, r: Option<Rows>) -> PyResult<(Rows, Rows, f64)> {
    let c = costs(theta.inner.n(), theta.inner.m(), q, r)?;
    let sol = lqr::solve_dare(&theta.inner, &c, &SolverOptions::default()).map_err(to_py)?;
    Ok((rows(&sol.p_matrix), rows(&sol.gain), sol.avg_cost))
}

#[pyfunction]
fn closed_loop_norm(theta: &PyTheta, gain: Rows) -> PyResult<f64> {
    lqr::closed_loop_norm(&theta.inner, &matrix("gain", &gain)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (theta, m_p, rho, q=None, r=None))]
fn in_set_q(theta: &PyTheta, m_p: f64, rho: f64, q: Option<Rows>, r: Option<Rows>) -> PyResult<bool> {
    let c = costs(theta.inner.n(), theta.inner.m(), q, r)?;
    let set = ConstraintSetQ::new(m_p, rho).map_err(to_py)?;
    Ok(lqr::in_set_q(&theta.inner, &c, &set))
}

#[pyfunction]
#[pyo3(signature = (theta, m_sim, phi, rho_sim, q=None, r=None))]
fn in_set_p(theta: &PyTheta, m_sim: f64, phi: f64, rho_sim: f64, q: Option<Rows>, r: Option<Rows>) -> PyResult<bool> {
    let c = costs(theta.inner.n(), theta.inner.m(), q, r)?;
    let set = ConstraintSetP::new(m_sim, phi, rho_sim).map_err(to_py)?;
    Ok(lqr::in_set_p(&theta.inner, &c, &set))
}

/// Summary of one offline dataset.
#[pyclass(name = "OfflineSummary", from_py_object)]
#[derive(Clone)]
pub struct PyOfflineSummary {
    inner: offline::OfflineSummary,
}

#[pymethods]
impl PyOfflineSummary {
    #[getter]
    fn u_matrix(&self) -> Rows {
        rows(&self.inner.u_matrix)
    }

    #[getter]
    fn theta_hat(&self) -> PyTheta {
        PyTheta {
            inner: self.inner.theta_hat_sim.clone(),
        }
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn s_len(&self) -> usize {
        self.inner.s_len
    }

    #[getter]
    fn m_delta(&self) -> f64 {
        self.inner.m_delta
    }

    /// `(excitation_ok, covered)` against the true simulator parameter.
    fn check(&self, theta_sim: &PyTheta) -> (bool, bool) {
        let report = offline::check_offline_data(&self.inner, &theta_sim.inner);
        (report.excitation_ok, report.covered)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        offline::write_summary(&path, &self.inner).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: offline::read_summary(&path).map_err(to_py)?,
        })
    }
}

#[pyfunction]
#[pyo3(signature = (theta_sim, s_len, delta1, m_delta, seed, dither_std=1.0, regularizer=1.0))]
fn run_offline(
    theta_sim: &PyTheta,
    s_len: usize,
    delta1: f64,
    m_delta: f64,
    seed: u64,
    dither_std: f64,
    regularizer: f64,
) -> PyResult<PyOfflineSummary> {
    let c = CostMatrices::identity(theta_sim.inner.n(), theta_sim.inner.m());
    let cfg = OfflineConfig {
        dither_std,
        regularizer,
        ..OfflineConfig::default()
    };
    let mut rng = RngStream::new(seed, 0);
    let run = offline::run_offline(&theta_sim.inner, &c, s_len, &cfg, delta1, m_delta, &mut rng).map_err(to_py)?;
    Ok(PyOfflineSummary { inner: run.summary })
}

fn sources(summaries: Vec<PyOfflineSummary>) -> PyResult<MultiSourceSummary> {
    MultiSourceSummary::new(summaries.into_iter().map(|s| s.inner).collect()).map_err(to_py)
}

/// Online least-squares belief seeded by offline summaries.
#[pyclass(name = "Belief")]
pub struct PyBelief {
    inner: controller::BeliefState,
    prior: PriorTerms,
}

#[pymethods]
impl PyBelief {
    #[new]
    fn new(summaries: Vec<PyOfflineSummary>) -> PyResult<Self> {
        let prior = PriorTerms::from_sources(&sources(summaries)?).map_err(to_py)?;
        Ok(Self {
            inner: controller::BeliefState::from_prior(&prior).map_err(to_py)?,
            prior,
        })
    }

    /// Folds in one transition; returns `‖V^{-1/2} z‖²` before the update.
    fn update(&mut self, z: Vec<f64>, next_state: Vec<f64>) -> PyResult<f64> {
        self.inner
            .update(&DVector::from_vec(z), &DVector::from_vec(next_state))
            .map_err(to_py)
    }

    fn beta(&self, delta2: f64) -> PyResult<f64> {
        controller::beta_from_terms(&self.inner, self.prior.alpha_sum, self.prior.dissimilarity, delta2).map_err(to_py)
    }

    fn confidence_distance(&self, theta: &PyTheta) -> PyResult<f64> {
        self.inner.confidence_distance(&theta.inner).map_err(to_py)
    }

    #[getter]
    fn theta_hat(&self) -> PyTheta {
        PyTheta {
            inner: self.inner.theta_hat.clone(),
        }
    }

    #[getter]
    fn v_matrix(&self) -> Rows {
        rows(&self.inner.v_matrix)
    }

    #[getter]
    fn t(&self) -> usize {
        self.inner.t
    }

    #[getter]
    fn logdet_ratio(&self) -> f64 {
        self.inner.logdet_v - self.inner.logdet_u
    }
}

/// Per-step records of one online episode.
#[pyclass(name = "Episode", get_all)]
pub struct PyEpisode {
    cost: Vec<f64>,
    cum_regret: Vec<f64>,
    beta: Vec<f64>,
    rejections: Vec<usize>,
    j_star: f64,
    fallbacks: usize,
}

#[pyfunction]
#[pyo3(signature = (theta_star, summaries, horizon, delta2, seed, variant="tsod", m_p=50.0, rho=0.99))]
#[allow(clippy::too_many_arguments)]
fn run_episode(
    theta_star: &PyTheta,
    summaries: Vec<PyOfflineSummary>,
    horizon: usize,
    delta2: f64,
    seed: u64,
    variant: &str,
    m_p: f64,
    rho: f64,
) -> PyResult<PyEpisode> {
    let variant: Variant = variant.parse().map_err(PyValueError::new_err)?;
    let set_q = ConstraintSetQ::new(m_p, rho).map_err(to_py)?;
    let c = CostMatrices::identity(theta_star.inner.n(), theta_star.inner.m());
    let mut cfg = EpisodeConfig::new(horizon, delta2, variant, set_q);
    cfg.seed = seed;
    let result = controller::run_episode(
        &theta_star.inner,
        &sources(summaries)?,
        &c,
        &cfg,
        &mut RngStream::new(seed, 0),
        &mut RngStream::new(seed, 1),
    )
    .map_err(to_py)?;
    let rec = &result.trace.records;
    Ok(PyEpisode {
        cost: rec.iter().map(|r| r.cost).collect(),
        cum_regret: rec.iter().map(|r| r.cum_regret).collect(),
        beta: rec.iter().map(|r| r.beta).collect(),
        rejections: rec.iter().map(|r| r.rejections).collect(),
        j_star: result.trace.j_star,
        fallbacks: result.diagnostics.fallbacks,
    })
}

/// `(label, mean, std)` of cumulative regret per step.
type AggregateRows = Vec<(String, Vec<f64>, Vec<f64>)>;

/// Runs a config file; returns one row per aggregate.
#[pyfunction]
#[pyo3(signature = (config_path, overrides=Vec::new(), out_dir=None))]
fn run_experiment(
    config_path: PathBuf,
    overrides: Vec<String>,
    out_dir: Option<PathBuf>,
) -> PyResult<AggregateRows> {
    let cfg = ExperimentConfig::load(&config_path, &overrides).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = harness::run_experiment(&cfg, out_dir.as_deref()).map_err(to_py)?;
    Ok(out
        .aggregates
        .into_iter()
        .map(|a| (a.label, a.mean, a.std))
        .collect())
}

#[pymodule]
fn tsod_lqr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTheta>()?;
    m.add_class::<PyOfflineSummary>()?;
    m.add_class::<PyBelief>()?;
    m.add_class::<PyEpisode>()?;
    m.add_function(wrap_pyfunction!(solve_dare, m)?)?;
    m.add_function(wrap_pyfunction!(closed_loop_norm, m)?)?;
    m.add_function(wrap_pyfunction!(in_set_q, m)?)?;
    m.add_function(wrap_pyfunction!(in_set_p, m)?)?;
    m.add_function(wrap_pyfunction!(run_offline, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
