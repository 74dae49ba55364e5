//! Exact LQR machinery for a known parameter `θᵀ = [A B]`.
//!
//! The discrete algebraic Riccati equation is solved by value iteration on
//! the Riccati map
//!
//! ```text
//!   K(P)   = -(R + BᵀPB)⁻¹ BᵀPA
//!   map(P) = Q + AᵀPA + AᵀPB·K(P)
//! ```
//!
//! starting from `P₀ = Q` (which is `map(0)`). The iterates are the finite
//! horizon value matrices, so they increase monotonically in the PSD order.
//! Convergence therefore certifies stabilizability, and a trace that
//! exceeds a bound at any iterate already exceeds it at the fixed point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Stacked system parameter, `θᵀ = [A B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl ThetaParams {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::InvalidMatrix {
                name: "a_matrix",
                reason: format!("expected non-empty square, got {}x{}", a.nrows(), a.ncols()),
            });
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::dims(
                "ThetaParams::new",
                format!("B with {} rows and >=1 column", a.nrows()),
                format!("{}x{}", b.nrows(), b.ncols()),
            ));
        }
        if !linalg::all_finite(&a) || !linalg::all_finite(&b) {
            return Err(Error::InvalidMatrix {
                name: "theta",
                reason: "non-finite entry".into(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self> {
        Self::new(
            linalg::matrix_from_rows("a_matrix", a)?,
            linalg::matrix_from_rows("b_matrix", b)?,
        )
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, m),
        }
    }

    /// Rebuilds `θ` from its stacked `(n+m)×n` form `[Aᵀ; Bᵀ]`.
    pub fn from_stacked(theta: &DMatrix<f64>, n: usize) -> Result<Self> {
        if theta.ncols() != n || theta.nrows() <= n {
            return Err(Error::dims(
                "ThetaParams::from_stacked",
                format!("(n+m)x{n} with m>=1"),
                format!("{}x{}", theta.nrows(), theta.ncols()),
            ));
        }
        let m = theta.nrows() - n;
        let a = theta.rows(0, n).transpose();
        let b = theta.rows(n, m).transpose();
        Self::new(a, b)
    }

    /// The `(n+m)×n` matrix `θ = [Aᵀ; Bᵀ]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut theta = DMatrix::zeros(n + m, n);
        theta.rows_mut(0, n).copy_from(&self.a.transpose());
        theta.rows_mut(n, m).copy_from(&self.b.transpose());
        theta
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.a.norm_squared() + self.b.norm_squared()).sqrt()
    }

    pub fn same_shape(&self, other: &ThetaParams) -> bool {
        self.n() == other.n() && self.m() == other.m()
    }

    fn check_shape(&self, other: &ThetaParams, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dims(
                context,
                format!("n={}, m={}", self.n(), self.m()),
                format!("n={}, m={}", other.n(), other.m()),
            ))
        }
    }

    pub fn try_add(&self, other: &ThetaParams) -> Result<ThetaParams> {
        self.check_shape(other, "ThetaParams::try_add")?;
        Ok(Self {
            a: &self.a + &other.a,
            b: &self.b + &other.b,
        })
    }

    pub fn try_sub(&self, other: &ThetaParams) -> Result<ThetaParams> {
        self.check_shape(other, "ThetaParams::try_sub")?;
        Ok(Self {
            a: &self.a - &other.a,
            b: &self.b - &other.b,
        })
    }

    /// `self + t·(other − self)`.
    pub fn lerp(&self, other: &ThetaParams, t: f64) -> Result<ThetaParams> {
        self.check_shape(other, "ThetaParams::lerp")?;
        Ok(Self {
            a: &self.a + (&other.a - &self.a) * t,
            b: &self.b + (&other.b - &self.b) * t,
        })
    }
}

/// State and input weights of the quadratic cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrices {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl CostMatrices {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        check_spd("q_matrix", &q)?;
        check_spd("r_matrix", &r)?;
        Ok(Self { q, r })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m),
        }
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn fits(&self, theta: &ThetaParams) -> bool {
        self.q.nrows() == theta.n() && self.r.nrows() == theta.m()
    }

    fn check_fits(&self, theta: &ThetaParams) -> Result<()> {
        if self.fits(theta) {
            Ok(())
        } else {
            Err(Error::dims(
                "CostMatrices",
                format!("Q {0}x{0}, R {1}x{1}", theta.n(), theta.m()),
                format!("Q {0}x{0}, R {1}x{1}", self.q.nrows(), self.r.nrows()),
            ))
        }
    }
}

fn check_spd(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::InvalidMatrix {
            name,
            reason: format!("expected non-empty square, got {}x{}", m.nrows(), m.ncols()),
        });
    }
    if !linalg::all_finite(m) {
        return Err(Error::InvalidMatrix {
            name,
            reason: "non-finite entry".into(),
        });
    }
    if !linalg::is_symmetric(m, 1e-12) {
        return Err(Error::InvalidMatrix {
            name,
            reason: "not symmetric".into(),
        });
    }
    let lmin = linalg::lambda_min(m);
    if !(lmin > 0.0) {
        return Err(Error::InvalidMatrix {
            name,
            reason: format!("not positive definite (lambda_min = {lmin:.3e})"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// `‖P‖_F` above this is treated as divergence.
    pub divergence_ceiling: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 10_000,
            divergence_ceiling: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p_matrix: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// `J(θ) = Tr(P(θ))`.
    pub avg_cost: f64,
    pub iterations: usize,
}

/// `K(P) = -(R + BᵀPB)⁻¹ BᵀPA`.
pub fn gain_from_value(theta: &ThetaParams, costs: &CostMatrices, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = (theta.a(), theta.b());
    let bt_p = b.transpose() * p;
    let lhs = costs.r() + &bt_p * b;
    let rhs = -(bt_p * a);
    let chol = linalg::symmetrize(&lhs).cholesky().ok_or_else(|| {
        Error::NonStabilizable("R + BᵀPB lost positive definiteness".into())
    })?;
    Ok(chol.solve(&rhs))
}

/// One application of the Riccati map, returning `(map(P), K(P))`.
pub fn riccati_map(
    theta: &ThetaParams,
    costs: &CostMatrices,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = gain_from_value(theta, costs, p)?;
    let a = theta.a();
    let at_p = a.transpose() * p;
    let next = costs.q() + &at_p * a + at_p * theta.b() * &k;
    Ok((linalg::symmetrize(&next), k))
}

enum Stop {
    Converged(RiccatiSolution),
    TraceExceeded,
}

fn iterate_dare(
    theta: &ThetaParams,
    costs: &CostMatrices,
    opts: &SolverOptions,
    trace_ceiling: Option<f64>,
) -> Result<Stop> {
    costs.check_fits(theta)?;
    if !(opts.tol > 0.0) || opts.max_iters == 0 {
        return Err(Error::Domain(format!(
            "solver needs tol > 0 and max_iters >= 1, got tol={}, max_iters={}",
            opts.tol, opts.max_iters
        )));
    }
    let mut p = costs.q().clone();
    for iter in 1..=opts.max_iters {
        let (next, _) = riccati_map(theta, costs, &p)?;
        let norm = next.norm();
        if !norm.is_finite() || norm > opts.divergence_ceiling {
            return Err(Error::NonStabilizable(format!(
                "value iteration diverged (‖P‖_F = {norm:.3e}) after {iter} steps"
            )));
        }
        if let Some(ceiling) = trace_ceiling {
            if next.trace() > ceiling {
                return Ok(Stop::TraceExceeded);
            }
        }
        let step = (&next - &p).norm();
        p = next;
        if step <= opts.tol {
            let gain = gain_from_value(theta, costs, &p)?;
            let avg_cost = p.trace();
            return Ok(Stop::Converged(RiccatiSolution {
                p_matrix: p,
                gain,
                avg_cost,
                iterations: iter,
            }));
        }
    }
    Err(Error::NonStabilizable(format!(
        "value iteration did not converge within {} steps",
        opts.max_iters
    )))
}

/// Solves the DARE for `θ` by fixed-point iteration.
pub fn solve_dare(theta: &ThetaParams, costs: &CostMatrices, opts: &SolverOptions) -> Result<RiccatiSolution> {
    match iterate_dare(theta, costs, opts, None)? {
        Stop::Converged(sol) => Ok(sol),
        Stop::TraceExceeded => unreachable!("no trace ceiling was set"),
    }
}

/// Solves the DARE but gives up as soon as `Tr(P_k)` exceeds `trace_ceiling`.
/// Returns `Ok(None)` in that case.
pub fn solve_dare_bounded(
    theta: &ThetaParams,
    costs: &CostMatrices,
    opts: &SolverOptions,
    trace_ceiling: f64,
) -> Result<Option<RiccatiSolution>> {
    match iterate_dare(theta, costs, opts, Some(trace_ceiling))? {
        Stop::Converged(sol) => Ok(Some(sol)),
        Stop::TraceExceeded => Ok(None),
    }
}

/// `‖A + BK‖₂`.
pub fn closed_loop_norm(theta: &ThetaParams, gain: &DMatrix<f64>) -> Result<f64> {
    if gain.nrows() != theta.m() || gain.ncols() != theta.n() {
        return Err(Error::dims(
            "closed_loop_norm",
            format!("{}x{} gain", theta.m(), theta.n()),
            format!("{}x{}", gain.nrows(), gain.ncols()),
        ));
    }
    Ok(linalg::spectral_norm(&(theta.a() + theta.b() * gain)))
}

/// The rejection set for sampled parameters: bounded optimal cost and a
/// contractive closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSetQ {
    /// `M_P`, bound on `Tr(P(θ))`.
    pub m_p: f64,
    /// `ρ`, bound on the closed-loop spectral norm.
    pub rho: f64,
    /// Largest `‖K(θ)‖₂` seen among accepted parameters, if tracked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_k_cache: Option<f64>,
}

impl ConstraintSetQ {
    pub fn new(m_p: f64, rho: f64) -> Result<Self> {
        if !(m_p > 0.0) {
            return Err(Error::config("set_q.m_p", format!("M_P must be > 0, got {m_p}")));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::config("set_q.rho", format!("rho must lie in (0,1), got {rho}")));
        }
        Ok(Self {
            m_p,
            rho,
            m_k_cache: None,
        })
    }

    pub fn observe_gain(&mut self, gain: &DMatrix<f64>) {
        let k = linalg::spectral_norm(gain);
        self.m_k_cache = Some(self.m_k_cache.map_or(k, |prev| prev.max(k)));
    }

    /// Membership test returning the Riccati solution when `θ ∈ Q`.
    ///
    /// The closed loop is evaluated with θ's own `(A, B)`; the true system is
    /// not observable at runtime.
    pub fn admit(&self, theta: &ThetaParams, costs: &CostMatrices, opts: &SolverOptions) -> Option<RiccatiSolution> {
        let sol = solve_dare_bounded(theta, costs, opts, self.m_p).ok()??;
        let norm = closed_loop_norm(theta, &sol.gain).ok()?;
        (sol.avg_cost <= self.m_p && norm <= self.rho).then_some(sol)
    }
}

pub fn in_set_q(theta: &ThetaParams, costs: &CostMatrices, set_q: &ConstraintSetQ) -> bool {
    set_q.admit(theta, costs, &SolverOptions::default()).is_some()
}

/// Admissible set for the offline (simulator) system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSetP {
    pub m_sim: f64,
    /// `φ`, bound on `‖θ^sim‖_F`.
    pub phi: f64,
    pub rho_sim: f64,
}

impl ConstraintSetP {
    pub fn new(m_sim: f64, phi: f64, rho_sim: f64) -> Result<Self> {
        if !(m_sim > 0.0) {
            return Err(Error::config("offline.set_p.m_sim", format!("must be > 0, got {m_sim}")));
        }
        if !(phi > 0.0) {
            return Err(Error::config("offline.set_p.phi", format!("must be > 0, got {phi}")));
        }
        if !(rho_sim > 0.0 && rho_sim < 1.0) {
            return Err(Error::config(
                "offline.set_p.rho_sim",
                format!("must lie in (0,1), got {rho_sim}"),
            ));
        }
        Ok(Self { m_sim, phi, rho_sim })
    }
}

pub fn in_set_p(theta: &ThetaParams, costs: &CostMatrices, set_p: &ConstraintSetP) -> bool {
    if theta.frobenius_norm() > set_p.phi {
        return false;
    }
    let Ok(Some(sol)) = solve_dare_bounded(theta, costs, &SolverOptions::default(), set_p.m_sim) else {
        return false;
    };
    match closed_loop_norm(theta, &sol.gain) {
        Ok(norm) => sol.avg_cost <= set_p.m_sim && norm <= set_p.rho_sim,
        Err(_) => false,
    }
}

/// The system used in the numerical study: `(θ_*, θ_*^sim)`.
pub fn reference_systems() -> (ThetaParams, ThetaParams) {
    let b_rows = |b00: f64| vec![vec![b00, 0.5], vec![0.5, 1.0], vec![0.5, 0.5]];
    let a_rows = |a00: f64| vec![vec![a00, 0.5, 0.4], vec![0.0, 0.5, 0.4], vec![0.0, 0.0, 0.4]];
    let star = ThetaParams::from_rows(&a_rows(0.6), &b_rows(1.0)).expect("valid literal");
    let sim = ThetaParams::from_rows(&a_rows(0.7), &b_rows(1.1)).expect("valid literal");
    (star, sim)
}
