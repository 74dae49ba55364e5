//! Thompson sampling for LQR control, warm-started from offline data
//! generated by a similar but different linear system.
//!
//! Module map:
//! - [`lqr`]: Riccati fixed point, optimal gain, constraint sets `Q` and `P`.
//! - [`sim`]: ground-truth linear simulation and reproducible noise.
//! - [`offline`]: offline data generation and its summary.
//! - [`controller`]: the online belief, confidence width, constrained
//!   sampling and episode loop, including the two baselines.
//! - [`harness`]: Monte-Carlo experiments, aggregation, diagnostics, plots.
//! - [`config`] and [`cli`]: the `tsod` command-line tool.

// NaN must fail these range checks, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod controller;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lqr;
pub mod offline;
pub mod sim;
pub mod trace;

pub use controller::{
    compute_beta, init_belief, run_episode, sample_constrained, update_belief, BeliefState, EpisodeConfig,
    EpisodeResult, MultiSourceSummary, SampleOutcome,
};
pub use error::{Error, Result};
pub use lqr::{
    closed_loop_norm, in_set_p, in_set_q, solve_dare, ConstraintSetP, ConstraintSetQ, CostMatrices, RiccatiSolution,
    SolverOptions, ThetaParams,
};
pub use offline::{alpha_from_bound, check_offline_data, run_offline, OfflineConfig, OfflineSummary};
pub use sim::{make_true_theta, sample_theta_delta, step_system, RngStream};
pub use trace::{RegretTrace, Variant};
