//! Offline-informed Thompson sampling for LQR.
//!
//! The belief is the regularized least-squares posterior seeded by the
//! offline summaries:
//!
//! ```text
//!   V_t = Σ_i U_{S_i} + Σ_{k<t} z_k z_kᵀ
//!   θ̂_t = V_t⁻¹ (Σ_{k<t} z_k x_{k+1}ᵀ + Σ_i U_{S_i} θ̂_{S_i})
//! ```
//!
//! Each step samples `θ̂_t + β_t V_t^{-1/2} η` (η standard normal), rejects
//! samples outside `Q`, and plays the LQR gain of the accepted sample. The
//! width is
//!
//! ```text
//!   β_t = n √(2 log(det(V_t)^{1/2} det(V_0)^{-1/2} / δ₂)) + Σ α_i + Σ √λ_max(U_i)·M_{δ,i}
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lqr::{self, ConstraintSetQ, CostMatrices, SolverOptions, ThetaParams};
use crate::offline::OfflineSummary;
use crate::sim::{step_system, RngStream, SimState};
use crate::trace::{RegretTrace, Variant};

/// One or more offline summaries sharing `(n, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSourceSummary {
    summaries: Vec<OfflineSummary>,
}

impl MultiSourceSummary {
    pub fn new(summaries: Vec<OfflineSummary>) -> Result<Self> {
        let first = summaries
            .first()
            .ok_or_else(|| Error::Domain("at least one offline summary is required".into()))?;
        let (n, m) = (first.n(), first.m());
        for s in &summaries {
            if s.n() != n || s.m() != m {
                return Err(Error::dims(
                    "MultiSourceSummary",
                    format!("n={n}, m={m}"),
                    format!("n={}, m={}", s.n(), s.m()),
                ));
            }
            s.validate()?;
        }
        Ok(Self { summaries })
    }

    pub fn single(summary: OfflineSummary) -> Result<Self> {
        Self::new(vec![summary])
    }

    pub fn summaries(&self) -> &[OfflineSummary] {
        &self.summaries
    }

    pub fn n(&self) -> usize {
        self.summaries[0].n()
    }

    pub fn m(&self) -> usize {
        self.summaries[0].m()
    }

    /// `S = Σ S_i`.
    pub fn total_len(&self) -> usize {
        self.summaries.iter().map(|s| s.s_len).sum()
    }
}

/// Everything the online loop takes from the offline side.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTerms {
    pub v0: DMatrix<f64>,
    pub cross0: DMatrix<f64>,
    pub theta0: ThetaParams,
    /// `Σ α_{S_i}`.
    pub alpha_sum: f64,
    /// `Σ √λ_max(U_{S_i})·M_{δ,i}`.
    pub dissimilarity: f64,
}

impl PriorTerms {
    pub fn from_single(summary: &OfflineSummary) -> Self {
        Self {
            v0: summary.u_matrix.clone(),
            cross0: &summary.u_matrix * summary.theta_hat_sim.stacked(),
            theta0: summary.theta_hat_sim.clone(),
            alpha_sum: summary.alpha,
            dissimilarity: linalg::lambda_max(&summary.u_matrix).sqrt() * summary.m_delta,
        }
    }

    pub fn from_sources(sources: &MultiSourceSummary) -> Result<Self> {
        let (n, m) = (sources.n(), sources.m());
        let d = n + m;
        let mut v0 = DMatrix::zeros(d, d);
        let mut cross0 = DMatrix::zeros(d, n);
        let mut alpha_sum = 0.0;
        let mut dissimilarity = 0.0;
        for s in sources.summaries() {
            v0 += &s.u_matrix;
            cross0 += &s.u_matrix * s.theta_hat_sim.stacked();
            alpha_sum += s.alpha;
            dissimilarity += linalg::lambda_max(&s.u_matrix).sqrt() * s.m_delta;
        }
        let theta0 = match sources.summaries() {
            [only] => only.theta_hat_sim.clone(),
            _ => {
                let chol = v0
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::SingularPrecision("Σ U_{S_i} is not positive definite".into()))?;
                ThetaParams::from_stacked(&chol.solve(&cross0), n)?
            }
        };
        Ok(Self {
            v0,
            cross0,
            theta0,
            alpha_sum,
            dissimilarity,
        })
    }

    /// The prior a given variant actually uses.
    pub fn for_variant(&self, variant: Variant, regularizer: f64) -> PriorTerms {
        let (n, m) = (self.theta0.n(), self.theta0.m());
        let d = n + m;
        match variant {
            Variant::Tsod | Variant::Oracle => self.clone(),
            Variant::TsNoOffline => PriorTerms {
                v0: DMatrix::identity(d, d) * regularizer,
                cross0: DMatrix::zeros(d, n),
                theta0: ThetaParams::zeros(n, m),
                alpha_sum: 0.0,
                dissimilarity: 0.0,
            },
            Variant::OfflineEstimateOnly => PriorTerms {
                v0: DMatrix::identity(d, d) * regularizer,
                cross0: self.theta0.stacked() * regularizer,
                theta0: self.theta0.clone(),
                alpha_sum: 0.0,
                dissimilarity: 0.0,
            },
        }
    }
}

/// Online posterior `(V_t, θ̂_t)` with cached log-determinants.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub v_matrix: DMatrix<f64>,
    pub theta_hat: ThetaParams,
    pub logdet_v: f64,
    /// `log det V_0`, fixed.
    pub logdet_u: f64,
    pub t: usize,
    /// `Σ z_k x_{k+1}ᵀ + Σ U_i θ̂_i`.
    pub cross_term: DMatrix<f64>,
}

impl BeliefState {
    pub fn from_prior(prior: &PriorTerms) -> Result<Self> {
        let logdet = linalg::logdet_spd(&prior.v0)
            .ok_or_else(|| Error::SingularPrecision("initial precision is not positive definite".into()))?;
        Ok(Self {
            v_matrix: prior.v0.clone(),
            theta_hat: prior.theta0.clone(),
            logdet_v: logdet,
            logdet_u: logdet,
            t: 0,
            cross_term: prior.cross0.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.theta_hat.n()
    }

    pub fn dim(&self) -> usize {
        self.v_matrix.nrows()
    }

    /// Folds in one transition and returns `‖V_t^{-1/2} z‖²` under the
    /// pre-update precision.
    pub fn update(&mut self, z: &DVector<f64>, next_state: &DVector<f64>) -> Result<f64> {
        if z.len() != self.dim() || next_state.len() != self.n() {
            return Err(Error::dims(
                "update_belief",
                format!("z of {}, x of {}", self.dim(), self.n()),
                format!("z of {}, x of {}", z.len(), next_state.len()),
            ));
        }
        self.t += 1;
        if z.iter().all(|&v| v == 0.0) {
            return Ok(0.0);
        }
        let chol = self
            .v_matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SingularPrecision(format!("V_t at t={}", self.t - 1)))?;
        let weighted = z.dot(&chol.solve(z));
        self.logdet_v += weighted.ln_1p();
        self.v_matrix.ger(1.0, z, z, 1.0);
        self.cross_term.ger(1.0, z, next_state, 1.0);
        let chol = self
            .v_matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SingularPrecision(format!("V_t at t={}", self.t)))?;
        self.theta_hat = ThetaParams::from_stacked(&chol.solve(&self.cross_term), self.n())?;
        Ok(weighted)
    }

    /// `‖V_t^{1/2}(θ̂_t − θ)‖_F`.
    pub fn confidence_distance(&self, theta: &ThetaParams) -> Result<f64> {
        let diff = self.theta_hat.try_sub(theta)?;
        Ok(linalg::weighted_frobenius(&self.v_matrix, &diff.stacked()))
    }
}

pub fn init_belief(sources: &MultiSourceSummary) -> Result<BeliefState> {
    BeliefState::from_prior(&PriorTerms::from_sources(sources)?)
}

pub fn update_belief(belief: &BeliefState, z: &DVector<f64>, next_state: &DVector<f64>) -> Result<BeliefState> {
    let mut next = belief.clone();
    next.update(z, next_state)?;
    Ok(next)
}

/// `β_t(δ₂)` from the belief's log-determinants and the offline terms.
pub fn beta_from_terms(belief: &BeliefState, alpha_sum: f64, dissimilarity: f64, delta2: f64) -> Result<f64> {
    if !(delta2 > 0.0 && delta2 < 1.0) {
        return Err(Error::Domain(format!("delta2 must lie in (0,1), got {delta2}")));
    }
    let half_ratio = 0.5 * (belief.logdet_v - belief.logdet_u);
    if half_ratio < -1e-9 {
        return Err(Error::Domain(format!(
            "log det V_t fell below log det V_0 by {:.3e}",
            -half_ratio
        )));
    }
    let log_arg = half_ratio.max(0.0) - delta2.ln();
    Ok(belief.n() as f64 * (2.0 * log_arg).sqrt() + alpha_sum + dissimilarity)
}

pub fn compute_beta(belief: &BeliefState, sources: &MultiSourceSummary, delta2: f64) -> Result<f64> {
    let prior = PriorTerms::from_sources(sources)?;
    beta_from_terms(belief, prior.alpha_sum, prior.dissimilarity, delta2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub theta_tilde: ThetaParams,
    pub gain: DMatrix<f64>,
    pub rejections: usize,
    pub beta_value: f64,
    pub fallback_used: bool,
}

/// Rejection-samples `θ̂ + β V^{-1/2} η` onto `Q`.
///
/// After `max_attempts` failures this falls back to `previous` if given,
/// otherwise to the first of `θ̂` shrunk toward `anchor` (then toward zero)
/// that lies in `Q`. If nothing qualifies the gain is zero.
#[allow(clippy::too_many_arguments)]
pub fn sample_constrained(
    belief: &BeliefState,
    beta: f64,
    set_q: &ConstraintSetQ,
    costs: &CostMatrices,
    rng: &mut RngStream,
    max_attempts: usize,
    previous: Option<&SampleOutcome>,
    anchor: &ThetaParams,
) -> Result<SampleOutcome> {
    if !(beta >= 0.0) || max_attempts == 0 {
        return Err(Error::Domain(format!(
            "need beta >= 0 and max_attempts >= 1, got {beta} and {max_attempts}"
        )));
    }
    let opts = SolverOptions::default();
    let (n, d) = (belief.n(), belief.dim());
    let scale = linalg::inv_sqrt_spd(&belief.v_matrix)? * beta;
    let center = belief.theta_hat.stacked();
    for attempt in 0..max_attempts {
        let eta = rng.normal_matrix(d, n);
        let candidate = ThetaParams::from_stacked(&(&center + &scale * eta), n)?;
        if let Some(sol) = set_q.admit(&candidate, costs, &opts) {
            return Ok(SampleOutcome {
                theta_tilde: candidate,
                gain: sol.gain,
                rejections: attempt,
                beta_value: beta,
                fallback_used: false,
            });
        }
    }

    log::debug!("t={}: {max_attempts} samples rejected, using fallback", belief.t);
    let fallback = |theta_tilde: ThetaParams, gain: DMatrix<f64>| SampleOutcome {
        theta_tilde,
        gain,
        rejections: max_attempts,
        beta_value: beta,
        fallback_used: true,
    };
    if let Some(prev) = previous {
        return Ok(fallback(prev.theta_tilde.clone(), prev.gain.clone()));
    }
    let zero = ThetaParams::zeros(n, belief.theta_hat.m());
    for target in [anchor, &zero] {
        for k in 0..=12 {
            let candidate = target.lerp(&belief.theta_hat, 0.5f64.powi(k))?;
            if let Some(sol) = set_q.admit(&candidate, costs, &opts) {
                return Ok(fallback(candidate, sol.gain));
            }
        }
    }
    Ok(fallback(belief.theta_hat.clone(), DMatrix::zeros(belief.theta_hat.m(), n)))
}

/// `δ₁ = δ/(16·max(S, T+1))`, `δ₂ = δ/(16T)`.
pub fn delta_schedule(delta: f64, s_len: usize, horizon: usize) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0,1), got {delta}")));
    }
    let delta1 = delta / (16.0 * s_len.max(horizon + 1) as f64);
    let delta2 = delta / (16.0 * horizon.max(1) as f64);
    Ok((delta1, delta2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub delta2: f64,
    pub variant: Variant,
    pub set_q: ConstraintSetQ,
    pub max_attempts: usize,
    /// Multiplier on the dissimilarity term of `β_t`; 1 is the literal width.
    pub beta_mdelta_scale: f64,
    /// `λ₀` of the baselines' prior.
    pub regularizer: f64,
    pub state_ceiling: f64,
    /// Values of `t` (number of updates) at which coverage is recorded.
    pub checkpoints: Vec<usize>,
    pub run_id: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn new(horizon: usize, delta2: f64, variant: Variant, set_q: ConstraintSetQ) -> Self {
        Self {
            horizon,
            delta2,
            variant,
            set_q,
            max_attempts: 100,
            beta_mdelta_scale: 1.0,
            regularizer: 1.0,
            state_ceiling: 1e6,
            checkpoints: default_checkpoints(horizon),
            run_id: 0,
            seed: 0,
        }
    }
}

/// `{T/4, T/2, T}`, deduplicated and without zero.
pub fn default_checkpoints(horizon: usize) -> Vec<usize> {
    let mut cps: Vec<usize> = [horizon / 4, horizon / 2, horizon]
        .into_iter()
        .filter(|&t| t > 0)
        .collect();
    cps.dedup();
    cps
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointCoverage {
    pub t: usize,
    pub distance: f64,
    pub beta: f64,
}

impl CheckpointCoverage {
    pub fn covered(&self) -> bool {
        self.distance <= self.beta
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeDiagnostics {
    /// `Z = max_k ‖z_k‖`.
    pub z_max: f64,
    /// `Σ_k ‖V_k^{-1/2} z_k‖²` with `V_k` the pre-update precision.
    pub sum_weighted_z: f64,
    /// `log(det V_T / det V_0)`.
    pub logdet_ratio: f64,
    pub checkpoints: Vec<CheckpointCoverage>,
    pub fallbacks: usize,
    pub total_rejections: usize,
    /// Accepted samples whose gain fails `‖A_* + B_* K(θ̃)‖₂ ≤ ρ` on the
    /// true system.
    pub true_closed_loop_violations: usize,
    pub accepted_samples: usize,
    pub max_gain_norm: f64,
}

impl EpisodeDiagnostics {
    pub fn all_covered(&self) -> bool {
        self.checkpoints.iter().all(CheckpointCoverage::covered)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub trace: RegretTrace,
    pub belief: BeliefState,
    pub diagnostics: EpisodeDiagnostics,
}

pub fn run_episode(
    theta_star: &ThetaParams,
    sources: &MultiSourceSummary,
    costs: &CostMatrices,
    cfg: &EpisodeConfig,
    noise: &mut RngStream,
    sampler: &mut RngStream,
) -> Result<EpisodeResult> {
    run_with_prior(theta_star, &PriorTerms::from_sources(sources)?, costs, cfg, noise, sampler)
}

/// Same as [`run_episode`] for one offline summary, without aggregation.
pub fn run_episode_single(
    theta_star: &ThetaParams,
    summary: &OfflineSummary,
    costs: &CostMatrices,
    cfg: &EpisodeConfig,
    noise: &mut RngStream,
    sampler: &mut RngStream,
) -> Result<EpisodeResult> {
    summary.validate()?;
    run_with_prior(theta_star, &PriorTerms::from_single(summary), costs, cfg, noise, sampler)
}

pub fn run_with_prior(
    theta_star: &ThetaParams,
    prior: &PriorTerms,
    costs: &CostMatrices,
    cfg: &EpisodeConfig,
    noise: &mut RngStream,
    sampler: &mut RngStream,
) -> Result<EpisodeResult> {
    if !theta_star.same_shape(&prior.theta0) {
        return Err(Error::dims(
            "run_episode",
            format!("n={}, m={}", prior.theta0.n(), prior.theta0.m()),
            format!("n={}, m={}", theta_star.n(), theta_star.m()),
        ));
    }
    let opts = SolverOptions::default();
    let star = lqr::solve_dare(theta_star, costs, &opts)?;
    let prior = prior.for_variant(cfg.variant, cfg.regularizer);
    let dissimilarity = prior.dissimilarity * cfg.beta_mdelta_scale;
    let mut belief = BeliefState::from_prior(&prior)?;
    let mut trace = RegretTrace::new(star.avg_cost, cfg.run_id, cfg.variant, cfg.seed);
    let mut diag = EpisodeDiagnostics::default();
    let mut state = SimState::zero(theta_star.n());
    let mut last: Option<SampleOutcome> = None;
    let mut set_q = cfg.set_q;

    for _ in 0..cfg.horizon {
        let beta = beta_from_terms(&belief, prior.alpha_sum, dissimilarity, cfg.delta2)?;
        let outcome = match cfg.variant {
            Variant::Oracle => SampleOutcome {
                theta_tilde: theta_star.clone(),
                gain: star.gain.clone(),
                rejections: 0,
                beta_value: beta,
                fallback_used: false,
            },
            _ => sample_constrained(
                &belief,
                beta,
                &set_q,
                costs,
                sampler,
                cfg.max_attempts,
                last.as_ref(),
                &prior.theta0,
            )?,
        };
        diag.total_rejections += outcome.rejections;
        if outcome.fallback_used {
            diag.fallbacks += 1;
        } else {
            diag.accepted_samples += 1;
            set_q.observe_gain(&outcome.gain);
            if lqr::closed_loop_norm(theta_star, &outcome.gain)? > set_q.rho {
                diag.true_closed_loop_violations += 1;
            }
        }

        let state_norm = state.state.norm();
        let control = &outcome.gain * &state.state;
        let record = step_system(theta_star, &mut state, &control, costs, noise)?;
        trace.push(record.cost, beta, outcome.rejections, state_norm);

        let next_norm = record.next_state.norm();
        if !(next_norm <= cfg.state_ceiling) {
            return Err(Error::UnstableRollout {
                step: state.step,
                norm: next_norm,
                ceiling: cfg.state_ceiling,
            });
        }
        diag.z_max = diag.z_max.max(record.z_vector.norm());
        diag.sum_weighted_z += belief.update(&record.z_vector, &record.next_state)?;
        if cfg.checkpoints.contains(&belief.t) {
            let beta_t = beta_from_terms(&belief, prior.alpha_sum, dissimilarity, cfg.delta2)?;
            diag.checkpoints.push(CheckpointCoverage {
                t: belief.t,
                distance: belief.confidence_distance(theta_star)?,
                beta: beta_t,
            });
        }
        if !outcome.fallback_used {
            last = Some(outcome);
        }
    }
    diag.logdet_ratio = belief.logdet_v - belief.logdet_u;
    diag.max_gain_norm = set_q.m_k_cache.unwrap_or(0.0);
    Ok(EpisodeResult {
        trace,
        belief,
        diagnostics: diag,
    })
}

/// `Σ_k ‖V_k^{-1/2} z_k‖² ≤ 2·max{1, 40Z²/S}·log(det V_T / det U_S)`.
pub fn bound_z_t_holds(diag: &EpisodeDiagnostics, s_len: usize) -> bool {
    let rhs = 2.0 * f64::max(1.0, 40.0 * diag.z_max.powi(2) / s_len as f64) * diag.logdet_ratio;
    diag.sum_weighted_z <= rhs * (1.0 + 1e-9) + 1e-12
}

/// `log(det V_T / det U_S) ≤ (n+m)·log(1 + 40·T·Z²/((n+m)·S))`.
pub fn polylog_beta_holds(diag: &EpisodeDiagnostics, horizon: usize, s_len: usize, dim: usize) -> bool {
    let d = dim as f64;
    let rhs = d * (40.0 * horizon as f64 * diag.z_max.powi(2) / (d * s_len as f64)).ln_1p();
    diag.logdet_ratio <= rhs * (1.0 + 1e-9) + 1e-12
}
