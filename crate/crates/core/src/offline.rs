//! Offline data from the auxiliary (simulator) system.
//!
//! The default learner is certainty-equivalence control with Gaussian dither:
//! `v_s = K̂ ξ_s + ν_s`, where `K̂` is the LQR gain of the running
//! least-squares estimate, refreshed every `gain_refresh` steps. The result
//! is summarized as the regularized precision `U_S = λ₀I + Σ y_s y_sᵀ`, the
//! ridge estimate `θ̂_S = U_S⁻¹ Σ y_s ξ_{s+1}ᵀ` and a confidence radius
//! `α_S(δ₁)` from the self-normalized log-det bound.

use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lqr::{self, ConstraintSetP, CostMatrices, SolverOptions, ThetaParams};
use crate::sim::{stack_z, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    #[default]
    CeDither,
    FixedGain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineConfig {
    pub dither_std: f64,
    /// `λ₀` in `U₀ = λ₀I`.
    pub regularizer: f64,
    pub controller_mode: ControllerMode,
    pub fixed_gain: Option<DMatrix<f64>>,
    pub set_p: ConstraintSetP,
    /// Steps between gain refreshes in `ce_dither` mode.
    pub gain_refresh: usize,
    pub state_ceiling: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            dither_std: 1.0,
            regularizer: 1.0,
            controller_mode: ControllerMode::CeDither,
            fixed_gain: None,
            set_p: ConstraintSetP {
                m_sim: 50.0,
                phi: 5.0,
                rho_sim: 0.99,
            },
            gain_refresh: 50,
            state_ceiling: 1e6,
        }
    }
}

impl OfflineConfig {
    fn validate(&self, n: usize, m: usize) -> Result<()> {
        if !(self.dither_std > 0.0) {
            return Err(Error::config("offline.dither_std", "must be > 0"));
        }
        if !(self.regularizer > 0.0) {
            return Err(Error::config("offline.regularizer", "must be > 0"));
        }
        if self.gain_refresh == 0 {
            return Err(Error::config("offline.gain_refresh", "must be >= 1"));
        }
        if self.controller_mode == ControllerMode::FixedGain {
            match &self.fixed_gain {
                Some(k) if k.shape() == (m, n) => {}
                Some(k) => {
                    return Err(Error::config(
                        "offline.fixed_gain",
                        format!("expected {m}x{n}, got {}x{}", k.nrows(), k.ncols()),
                    ))
                }
                None => return Err(Error::config("offline.fixed_gain", "required in fixed_gain mode")),
            }
        }
        Ok(())
    }
}

/// What the online learner needs to know about one offline dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSummary {
    /// `U_S`, including the `λ₀I` regularizer.
    pub u_matrix: DMatrix<f64>,
    pub theta_hat_sim: ThetaParams,
    /// `α_S(δ₁)`.
    pub alpha: f64,
    pub s_len: usize,
    /// `M_δ`, the known bound on `‖θ_* − θ_sim‖_F`.
    pub m_delta: f64,
    pub delta1: f64,
    /// The `λ₀` folded into `u_matrix`; zero when there is none.
    pub regularizer: f64,
}

impl OfflineSummary {
    pub fn n(&self) -> usize {
        self.theta_hat_sim.n()
    }

    pub fn m(&self) -> usize {
        self.theta_hat_sim.m()
    }

    /// `U_S − λ₀I`, the unregularized Gram matrix.
    pub fn data_gram(&self) -> DMatrix<f64> {
        let d = self.u_matrix.nrows();
        &self.u_matrix - DMatrix::identity(d, d) * self.regularizer
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.n() + self.m();
        if self.u_matrix.shape() != (d, d) {
            return Err(Error::dims(
                "OfflineSummary",
                format!("{d}x{d} precision"),
                format!("{}x{}", self.u_matrix.nrows(), self.u_matrix.ncols()),
            ));
        }
        if !linalg::is_symmetric(&self.u_matrix, 1e-10) {
            return Err(Error::SingularPrecision("U_S is not symmetric".into()));
        }
        if !(linalg::lambda_min(&self.u_matrix) > 0.0) {
            return Err(Error::SingularPrecision("U_S is not positive definite".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Domain(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.m_delta >= 0.0) {
            return Err(Error::Domain(format!("m_delta must be >= 0, got {}", self.m_delta)));
        }
        Ok(())
    }
}

/// The recorded offline trajectory: `states` has `S + 1` entries, `controls` `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineTrajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct OfflineRun {
    pub summary: OfflineSummary,
    pub trajectory: OfflineTrajectory,
    /// Number of gain refreshes that kept the previous gain because the
    /// estimate was not stabilizable.
    pub skipped_refreshes: usize,
}

/// `α = n·√(2·log(det(U)^{1/2} det(λ₀I)^{-1/2} / δ₁)) + √λ₀·φ`.
pub fn alpha_from_bound(u_matrix: &DMatrix<f64>, n: usize, delta1: f64, regularizer: f64, phi: f64) -> Result<f64> {
    if !(delta1 > 0.0 && delta1 < 1.0) {
        return Err(Error::Domain(format!("delta1 must lie in (0,1), got {delta1}")));
    }
    if !(regularizer > 0.0) {
        return Err(Error::Domain(format!("regularizer must be > 0, got {regularizer}")));
    }
    let d = u_matrix.nrows();
    let logdet_u = linalg::logdet_spd(u_matrix)
        .ok_or_else(|| Error::SingularPrecision("U_S is not positive definite".into()))?;
    let log_arg = 0.5 * logdet_u - 0.5 * d as f64 * regularizer.ln() - delta1.ln();
    Ok(n as f64 * (2.0 * log_arg.max(0.0)).sqrt() + regularizer.sqrt() * phi)
}

/// Simulates the auxiliary system for `s_len` steps and summarizes the data.
pub fn run_offline(
    theta_sim: &ThetaParams,
    costs: &CostMatrices,
    s_len: usize,
    cfg: &OfflineConfig,
    delta1: f64,
    m_delta: f64,
    rng: &mut RngStream,
) -> Result<OfflineRun> {
    let (n, m) = (theta_sim.n(), theta_sim.m());
    let d = n + m;
    if s_len == 0 {
        return Err(Error::Domain("offline trajectory length S must be >= 1".into()));
    }
    if !(delta1 > 0.0 && delta1 < 1.0) {
        return Err(Error::Domain(format!("delta1 must lie in (0,1), got {delta1}")));
    }
    if !(m_delta >= 0.0) {
        return Err(Error::Domain(format!("m_delta must be >= 0, got {m_delta}")));
    }
    cfg.validate(n, m)?;
    if !costs.fits(theta_sim) {
        return Err(Error::dims("run_offline", format!("costs for n={n}, m={m}"), "other"));
    }
    if cfg.controller_mode == ControllerMode::CeDither && !lqr::in_set_p(theta_sim, costs, &cfg.set_p) {
        return Err(Error::Domain("simulator parameter is outside the admissible set P".into()));
    }

    let opts = SolverOptions::default();
    let mut u = DMatrix::identity(d, d) * cfg.regularizer;
    let mut cross = DMatrix::zeros(d, n);
    let mut gain = match (&cfg.controller_mode, &cfg.fixed_gain) {
        (ControllerMode::FixedGain, Some(k)) => k.clone(),
        // the regularized initial estimate is θ̂ = 0, whose LQR gain is zero
        _ => DMatrix::zeros(m, n),
    };
    let mut skipped_refreshes = 0;

    let mut xi = DVector::zeros(n);
    let mut states = Vec::with_capacity(s_len + 1);
    let mut controls = Vec::with_capacity(s_len);
    states.push(xi.clone());

    for s in 0..s_len {
        if cfg.controller_mode == ControllerMode::CeDither && s > 0 && s % cfg.gain_refresh == 0 {
            let estimate = ridge_estimate(&u, &cross, n)?;
            match lqr::solve_dare(&estimate, costs, &opts) {
                Ok(sol) => gain = sol.gain,
                Err(e) => {
                    log::debug!("offline step {s}: keeping previous gain ({e})");
                    skipped_refreshes += 1;
                }
            }
        }
        let dither = rng.normal_vector(m) * cfg.dither_std;
        let v = &gain * &xi + dither;
        let w = rng.normal_vector(n);
        let next = theta_sim.a() * &xi + theta_sim.b() * &v + w;
        let y = stack_z(&xi, &v);
        u.ger(1.0, &y, &y, 1.0);
        cross.ger(1.0, &y, &next, 1.0);

        let norm = next.norm();
        if !(norm <= cfg.state_ceiling) {
            return Err(Error::UnstableRollout {
                step: s + 1,
                norm,
                ceiling: cfg.state_ceiling,
            });
        }
        controls.push(v);
        states.push(next.clone());
        xi = next;
    }

    let u = linalg::symmetrize(&u);
    let theta_hat_sim = ridge_estimate(&u, &cross, n)?;
    let alpha = alpha_from_bound(&u, n, delta1, cfg.regularizer, cfg.set_p.phi)?;
    Ok(OfflineRun {
        summary: OfflineSummary {
            u_matrix: u,
            theta_hat_sim,
            alpha,
            s_len,
            m_delta,
            delta1,
            regularizer: cfg.regularizer,
        },
        trajectory: OfflineTrajectory { states, controls },
        skipped_refreshes,
    })
}

fn ridge_estimate(u: &DMatrix<f64>, cross: &DMatrix<f64>, n: usize) -> Result<ThetaParams> {
    let chol = linalg::symmetrize(u)
        .cholesky()
        .ok_or_else(|| Error::SingularPrecision("offline precision".into()))?;
    ThetaParams::from_stacked(&chol.solve(cross), n)
}

/// Empirical check of the offline-algorithm requirements for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcitationReport {
    pub s_len: usize,
    /// `⌈200(n+m)·log(12/δ₁)⌉`.
    pub min_length: usize,
    pub length_ok: bool,
    pub lambda_min_regularized: f64,
    pub lambda_min_data: f64,
    /// `λ_min(Σ y yᵀ) ≥ S/40`, on the unregularized Gram matrix.
    pub excitation_ok: bool,
    pub estimation_error: f64,
    pub alpha: f64,
    pub covered: bool,
}

impl ExcitationReport {
    pub fn key_values(&self, prefix: &str) -> Vec<(String, String)> {
        vec![
            (format!("{prefix}S"), self.s_len.to_string()),
            (format!("{prefix}MIN_LENGTH"), self.min_length.to_string()),
            (format!("{prefix}LENGTH_OK"), self.length_ok.to_string()),
            (format!("{prefix}LAMBDA_MIN_REGULARIZED"), format!("{:.6e}", self.lambda_min_regularized)),
            (format!("{prefix}LAMBDA_MIN_DATA"), format!("{:.6e}", self.lambda_min_data)),
            (format!("{prefix}EXCITATION_OK"), self.excitation_ok.to_string()),
            (format!("{prefix}ESTIMATION_ERROR"), format!("{:.6e}", self.estimation_error)),
            (format!("{prefix}ALPHA"), format!("{:.6e}", self.alpha)),
            (format!("{prefix}COVERED"), self.covered.to_string()),
        ]
    }
}

pub fn min_offline_length(n: usize, m: usize, delta1: f64) -> usize {
    (200.0 * (n + m) as f64 * (12.0 / delta1).ln()).ceil() as usize
}

pub fn check_offline_data(summary: &OfflineSummary, theta_sim_true: &ThetaParams) -> ExcitationReport {
    let (n, m) = (summary.n(), summary.m());
    let min_length = min_offline_length(n, m, summary.delta1);
    let lambda_min_regularized = linalg::lambda_min(&summary.u_matrix);
    let lambda_min_data = linalg::lambda_min(&summary.data_gram());
    let estimation_error = summary
        .theta_hat_sim
        .try_sub(theta_sim_true)
        .map(|d| linalg::weighted_frobenius(&summary.u_matrix, &d.stacked()))
        .unwrap_or(f64::NAN);
    ExcitationReport {
        s_len: summary.s_len,
        min_length,
        length_ok: summary.s_len >= min_length,
        lambda_min_regularized,
        lambda_min_data,
        excitation_ok: lambda_min_data >= summary.s_len as f64 / 40.0,
        estimation_error,
        alpha: summary.alpha,
        covered: estimation_error <= summary.alpha,
    }
}

/// Writes `s,xi_1..xi_n,v_1..v_m`, one row per offline step.
pub fn write_trajectory_csv(path: &Path, traj: &OfflineTrajectory) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let n = traj.states.first().map_or(0, |s| s.len());
    let m = traj.controls.first().map_or(0, |c| c.len());
    let mut header = vec!["s".to_string()];
    header.extend((1..=n).map(|i| format!("xi_{i}")));
    header.extend((1..=m).map(|i| format!("v_{i}")));
    let write = |out: &mut BufWriter<std::fs::File>| -> std::io::Result<()> {
        writeln!(out, "{}", header.join(","))?;
        for (s, (xi, v)) in traj.states.iter().zip(&traj.controls).enumerate() {
            write!(out, "{}", s + 1)?;
            for x in xi.iter().chain(v.iter()) {
                write!(out, ",{x:.16e}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryFile {
    n: usize,
    m: usize,
    s_len: usize,
    m_delta: f64,
    delta1: f64,
    alpha: f64,
    regularizer: f64,
    u_matrix: Vec<Vec<f64>>,
    a_hat: Vec<Vec<f64>>,
    b_hat: Vec<Vec<f64>>,
}

/// JSON sidecar holding everything in an [`OfflineSummary`].
pub fn write_summary(path: &Path, summary: &OfflineSummary) -> Result<()> {
    let file = SummaryFile {
        n: summary.n(),
        m: summary.m(),
        s_len: summary.s_len,
        m_delta: summary.m_delta,
        delta1: summary.delta1,
        alpha: summary.alpha,
        regularizer: summary.regularizer,
        u_matrix: linalg::matrix_to_rows(&summary.u_matrix),
        a_hat: linalg::matrix_to_rows(summary.theta_hat_sim.a()),
        b_hat: linalg::matrix_to_rows(summary.theta_hat_sim.b()),
    };
    let text = serde_json::to_string_pretty(&file).expect("summary serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<OfflineSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SummaryFile = serde_json::from_str(&text)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    let theta_hat_sim = ThetaParams::from_rows(&file.a_hat, &file.b_hat)?;
    if theta_hat_sim.n() != file.n || theta_hat_sim.m() != file.m {
        return Err(Error::config(path.display().to_string(), "n/m disagree with matrices"));
    }
    let summary = OfflineSummary {
        u_matrix: linalg::matrix_from_rows("u_matrix", &file.u_matrix)?,
        theta_hat_sim,
        alpha: file.alpha,
        s_len: file.s_len,
        m_delta: file.m_delta,
        delta1: file.delta1,
        regularizer: file.regularizer,
    };
    summary.validate()?;
    Ok(summary)
}
