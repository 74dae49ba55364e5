//! Monte-Carlo orchestration: runs every (S, run, variant) cell, aggregates
//! cumulative regret, and writes CSV, SVG and `KEY=VALUE` reports.
//!
//! Output layout under the output directory:
//!
//! ```text
//! runs/<label>_run<id>.csv   one per episode
//! aggregate.csv              t,mean_cum_regret,std_cum_regret,variant,n_runs
//! regret.svg
//! summary.txt                KEY=VALUE
//! diagnostics.txt            written by `run_diagnostics`
//! scaling.csv                written by `scaling_study`
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::controller::{
    bound_z_t_holds, default_checkpoints, polylog_beta_holds, run_episode, EpisodeConfig, EpisodeDiagnostics,
    MultiSourceSummary,
};
use crate::error::{Error, Result};
use crate::lqr::{ConstraintSetQ, CostMatrices, SolverOptions, ThetaParams};
use crate::offline::{self, check_offline_data, run_offline, ExcitationReport, OfflineSummary};
use crate::sim::{derive_seed, sample_theta_delta, RngStream};
use crate::trace::{RegretTrace, Variant};

const OFFLINE_TAG: u64 = 0x6f66_666c;
const DELTA_TAG: u64 = 0x6465_6c74;
/// Redraws allowed when a sampled true parameter falls outside `Q`.
const DELTA_REDRAWS: u64 = 1000;

/// One finished episode.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub s_len: usize,
    pub variant: Variant,
    pub run_id: usize,
    pub trace: RegretTrace,
    pub diagnostics: EpisodeDiagnostics,
    pub offline: ExcitationReport,
    pub horizon: usize,
    pub dim: usize,
}

impl RunOutput {
    /// Whether the confidence-width inequalities' deterministic precondition holds.
    pub fn excited(&self) -> bool {
        self.offline.excitation_ok
    }

    pub fn bound_z_t_ok(&self) -> bool {
        bound_z_t_holds(&self.diagnostics, self.s_len)
    }

    pub fn polylog_beta_ok(&self) -> bool {
        polylog_beta_holds(&self.diagnostics, self.horizon, self.s_len, self.dim)
    }
}

/// Mean and sample standard deviation of cumulative regret across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub label: String,
    pub variant: Variant,
    pub s_len: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_runs: usize,
    pub fingerprint: String,
}

impl AggregateResult {
    pub fn from_traces(label: String, variant: Variant, s_len: usize, traces: &[&RegretTrace], fingerprint: &str) -> Self {
        let n_runs = traces.len();
        let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
        let mut mean = Vec::with_capacity(len);
        let mut std = Vec::with_capacity(len);
        for i in 0..len {
            let values: Vec<f64> = traces.iter().map(|t| t.records[i].cum_regret).collect();
            let (mu, sd) = mean_std(&values);
            mean.push(mu);
            std.push(sd);
        }
        Self {
            label,
            variant,
            s_len,
            mean,
            std,
            n_runs,
            fingerprint: fingerprint.to_string(),
        }
    }

    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(0.0)
    }

    pub fn final_std(&self) -> f64 {
        self.std.last().copied().unwrap_or(0.0)
    }
}

/// Mean and sample (n−1) standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub aggregates: Vec<AggregateResult>,
    pub runs: Vec<RunOutput>,
    pub fingerprint: String,
}

impl ExperimentOutput {
    pub fn aggregate(&self, variant: Variant, s_len: usize) -> Option<&AggregateResult> {
        self.aggregates.iter().find(|a| a.variant == variant && a.s_len == s_len)
    }
}

/// What one (S, run) cell needs, shared by all variants.
struct Cell {
    s_len: usize,
    run_id: usize,
    theta_star: ThetaParams,
    summary: OfflineSummary,
    report: ExcitationReport,
    delta2: f64,
}

struct Plan<'a> {
    cfg: &'a ExperimentConfig,
    costs: CostMatrices,
    set_q: ConstraintSetQ,
    theta_sim: ThetaParams,
    theta_star: Option<ThetaParams>,
}

impl<'a> Plan<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            costs: cfg.costs()?,
            set_q: cfg.set_q()?,
            theta_sim: cfg.theta_sim()?,
            theta_star: cfg.theta_star()?,
        })
    }

    fn true_theta(&self, run_id: usize) -> Result<ThetaParams> {
        if let Some(star) = &self.theta_star {
            return Ok(star.clone());
        }
        let sys = &self.cfg.system;
        let seed = derive_seed(&[self.cfg.experiment.seed, DELTA_TAG, run_id as u64]);
        let opts = SolverOptions::default();
        for stream in 0..DELTA_REDRAWS {
            let mut rng = RngStream::new(seed, stream);
            let delta = sample_theta_delta(sys.m_delta, sys.n, sys.m, &mut rng)?;
            let star = self.theta_sim.try_add(&delta)?;
            if self.set_q.admit(&star, &self.costs, &opts).is_some() {
                return Ok(star);
            }
        }
        Err(Error::config(
            "system.m_delta",
            format!("no θ_sim + δ draw landed in Q after {DELTA_REDRAWS} attempts"),
        ))
    }

    fn offline_summary(&self, s_len: usize, run_id: usize, delta1: f64) -> Result<OfflineSummary> {
        let exp = &self.cfg.experiment;
        let data_run = if exp.share_offline { 0 } else { run_id };
        if let Some(dir) = &exp.offline_dir {
            return offline::read_summary(&dir.join(offline_file_stem(s_len, data_run)).with_extension("json"));
        }
        let seed = derive_seed(&[exp.seed, OFFLINE_TAG, data_run as u64, s_len as u64]);
        let mut rng = RngStream::new(seed, 0);
        let run = run_offline(
            &self.theta_sim,
            &self.costs,
            s_len,
            &self.cfg.offline_config()?,
            delta1,
            self.cfg.system.m_delta,
            &mut rng,
        )?;
        Ok(run.summary)
    }

    fn cell(&self, s_len: usize, run_id: usize, horizon: usize) -> Result<Cell> {
        let (delta1, delta2) = self.cfg.deltas(s_len, horizon)?;
        let summary = self.offline_summary(s_len, run_id, delta1)?;
        let report = check_offline_data(&summary, &self.theta_sim);
        Ok(Cell {
            s_len,
            run_id,
            theta_star: self.true_theta(run_id)?,
            summary,
            report,
            delta2,
        })
    }

    fn episode(&self, cell: &Cell, variant: Variant, horizon: usize, checkpoints: &[usize]) -> Result<RunOutput> {
        let exp = &self.cfg.experiment;
        let seed = derive_seed(&[exp.seed, variant.id(), cell.run_id as u64, cell.s_len as u64]);
        let mut ep = EpisodeConfig::new(horizon, cell.delta2, variant, self.set_q);
        ep.max_attempts = exp.max_attempts;
        ep.beta_mdelta_scale = exp.beta_mdelta_scale;
        ep.regularizer = self.cfg.offline.regularizer;
        ep.state_ceiling = exp.state_ceiling;
        ep.checkpoints = checkpoints.to_vec();
        ep.run_id = cell.run_id;
        ep.seed = seed;
        let sources = MultiSourceSummary::single(cell.summary.clone())?;
        let mut noise = RngStream::new(seed, 0);
        let mut sampler = RngStream::new(seed, 1);
        let result = run_episode(&cell.theta_star, &sources, &self.costs, &ep, &mut noise, &mut sampler)?;
        Ok(RunOutput {
            s_len: cell.s_len,
            variant,
            run_id: cell.run_id,
            trace: result.trace,
            diagnostics: result.diagnostics,
            offline: cell.report.clone(),
            horizon,
            dim: self.cfg.system.n + self.cfg.system.m,
        })
    }

    /// Runs every variant for every (S, run), in a deterministic order.
    fn simulate(
        &self,
        s_values: &[usize],
        horizon: usize,
        variants: &[Variant],
        num_runs: usize,
        checkpoints: &[usize],
    ) -> Result<Vec<RunOutput>> {
        let units: Vec<(usize, usize)> = s_values
            .iter()
            .flat_map(|&s| (0..num_runs).map(move |r| (s, r)))
            .collect();
        let work = || -> Result<Vec<RunOutput>> {
            let per_unit: Vec<Vec<RunOutput>> = units
                .par_iter()
                .map(|&(s, r)| {
                    let cell = self.cell(s, r, horizon)?;
                    variants
                        .iter()
                        .map(|&v| self.episode(&cell, v, horizon, checkpoints))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            Ok(per_unit.into_iter().flatten().collect())
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.experiment.workers)
            .build()
            .map_err(|e| Error::Domain(format!("cannot start worker pool: {e}")))?;
        pool.install(work)
    }
}

pub fn offline_file_stem(s_len: usize, run_id: usize) -> String {
    format!("offline_S{s_len}_run{run_id:03}")
}

fn series_label(variant: Variant, s_len: usize, multi_s: bool) -> String {
    if multi_s {
        format!("{}_S{s_len}", variant.name())
    } else {
        variant.name().to_string()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs the configured experiment. With `out_dir`, writes per-run CSVs,
/// `aggregate.csv`, `regret.svg` and `summary.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    let plan = Plan::new(cfg)?;
    let exp = &cfg.experiment;
    let fingerprint = cfg.fingerprint();
    let checkpoints = default_checkpoints(exp.t);
    let runs = plan.simulate(&exp.s, exp.t, &exp.variants, exp.num_runs, &checkpoints)?;
    let multi_s = exp.s.len() > 1;

    if let Some(dir) = out_dir {
        // per-run files
        for run in &runs {
            let label = series_label(run.variant, run.s_len, multi_s);
            let path = dir.join("runs").join(format!("{label}_run{:03}.csv", run.run_id));
            write_file(&path, &run.trace.to_csv())?;
        }
    }

    let mut aggregates = Vec::new();
    for &s in &exp.s {
        for &variant in &exp.variants {
            let traces: Vec<&RegretTrace> = runs
                .iter()
                .filter(|r| r.s_len == s && r.variant == variant)
                .map(|r| &r.trace)
                .collect();
            let label = series_label(variant, s, multi_s);
            aggregates.push(AggregateResult::from_traces(label, variant, s, &traces, &fingerprint));
        }
    }

    if let Some(dir) = out_dir {
        write_file(&dir.join("aggregate.csv"), &aggregate_csv(&aggregates))?;
        write_file(&dir.join("regret.svg"), &render_svg(&aggregates, "Cumulative regret"))?;
        let mut summary = String::new();
        let _ = writeln!(summary, "FINGERPRINT={fingerprint}");
        let _ = writeln!(summary, "T={}", exp.t);
        let _ = writeln!(summary, "NUM_RUNS={}", exp.num_runs);
        for a in &aggregates {
            let key = a.label.to_uppercase();
            let _ = writeln!(summary, "FINAL_MEAN_CUM_REGRET_{key}={:.6e}", a.final_mean());
            let _ = writeln!(summary, "FINAL_STD_CUM_REGRET_{key}={:.6e}", a.final_std());
        }
        write_file(&dir.join("summary.txt"), &summary)?;
    }

    Ok(ExperimentOutput {
        aggregates,
        runs,
        fingerprint,
    })
}

pub const AGGREGATE_HEADER: &str = "t,mean_cum_regret,std_cum_regret,variant,n_runs";

pub fn aggregate_csv(aggregates: &[AggregateResult]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for a in aggregates {
        for (i, (mu, sd)) in a.mean.iter().zip(&a.std).enumerate() {
            let _ = writeln!(out, "{},{mu:.16e},{sd:.16e},{},{}", i + 1, a.label, a.n_runs);
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Mean line with a ±1 std band per series on a 960×540 canvas.
pub fn render_svg(aggregates: &[AggregateResult], title: &str) -> String {
    const W: f64 = 960.0;
    const H: f64 = 540.0;
    const LEFT: f64 = 80.0;
    const RIGHT: f64 = 30.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 60.0;
    const MAX_POINTS: usize = 600;

    let t_max = aggregates.iter().map(|a| a.mean.len()).max().unwrap_or(0).max(1) as f64;
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for a in aggregates {
        for (mu, sd) in a.mean.iter().zip(&a.std) {
            y_lo = y_lo.min(mu - sd);
            y_hi = y_hi.max(mu + sd);
        }
    }
    if !(y_lo.is_finite() && y_hi.is_finite()) {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    y_lo = y_lo.min(0.0);
    if y_hi - y_lo < 1e-12 {
        y_hi = y_lo + 1.0;
    }
    let px = |t: f64| LEFT + (t / t_max) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - (y - y_lo) / (y_hi - y_lo) * (H - TOP - BOTTOM);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{title}</text>"#, W / 2.0);

    // axes and ticks
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=5 {
        let t = t_max * k as f64 / 5.0;
        let x = px(t);
        let _ = writeln!(svg, r#"<line x1="{x:.1}" y1="{y0}" x2="{x:.1}" y2="{}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{t:.0}</text>"#, y0 + 20.0);
        let y = y_lo + (y_hi - y_lo) * k as f64 / 5.0;
        let yy = py(y);
        let _ = writeln!(svg, r##"<line x1="{x0}" y1="{yy:.1}" x2="{x1}" y2="{yy:.1}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.3}</text>"#, x0 - 8.0, yy + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">t</text>"#, (x0 + x1) / 2.0, H - 15.0);
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">cumulative regret</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    for (idx, a) in aggregates.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let len = a.mean.len();
        if len == 0 {
            continue;
        }
        let stride = len.div_ceil(MAX_POINTS).max(1);
        let mut picks: Vec<usize> = (0..len).step_by(stride).collect();
        if picks.last() != Some(&(len - 1)) {
            picks.push(len - 1);
        }
        let upper: Vec<String> = picks
            .iter()
            .map(|&i| format!("{:.1},{:.1}", px((i + 1) as f64), py(a.mean[i] + a.std[i])))
            .collect();
        let lower: Vec<String> = picks
            .iter()
            .rev()
            .map(|&i| format!("{:.1},{:.1}", px((i + 1) as f64), py(a.mean[i] - a.std[i])))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = picks
            .iter()
            .map(|&i| format!("{:.1},{:.1}", px((i + 1) as f64), py(a.mean[i])))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * idx as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            LEFT + 15.0,
            LEFT + 40.0
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, LEFT + 48.0, ly + 4.0, a.label);
    }
    svg.push_str("</svg>\n");
    svg
}

/// `P(X ≤ k)` for `X ~ Binomial(n, p)`, summed in log space.
pub fn binomial_cdf(k: usize, n: usize, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut log_pmf = n as f64 * lq;
    let mut terms = vec![log_pmf];
    for i in 0..k {
        log_pmf += ((n - i) as f64).ln() - ((i + 1) as f64).ln() + lp - lq;
        terms.push(log_pmf);
    }
    let hi = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi + terms.iter().map(|t| (t - hi).exp()).sum::<f64>().ln()).exp().min(1.0)
}

/// Least squares `y ≈ slope·x + intercept`, with R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some((slope, intercept, r2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub num_runs: usize,
    pub s_len: usize,
    pub horizon: usize,
    pub delta1: f64,
    pub delta2: f64,
    pub covered_runs: usize,
    /// `P(X ≤ covered)` under coverage probability `1 − δ₁ − δ₂`.
    pub coverage_p_value: f64,
    pub excited_runs: usize,
    pub bound_z_t_pass: usize,
    pub bound_z_t_fail: usize,
    pub polylog_beta_pass: usize,
    pub polylog_beta_fail: usize,
    pub offline_length_ok: usize,
    pub offline_covered: usize,
    pub accepted_samples: usize,
    pub true_closed_loop_violations: usize,
    pub fallbacks: usize,
    pub matched_simulator: bool,
    /// `(slope, intercept, R²)` of mean cumulative regret against `log t`.
    pub log_fit: Option<(f64, f64, f64)>,
    pub mean_final_regret: f64,
}

impl DiagnosticsReport {
    pub fn coverage(&self) -> f64 {
        self.covered_runs as f64 / self.num_runs.max(1) as f64
    }

    pub fn coverage_target(&self) -> f64 {
        1.0 - self.delta1 - self.delta2
    }

    /// One-sided binomial test at 99%: coverage `≥ 1 − δ₁ − δ₂` is not rejected.
    pub fn coverage_ok(&self) -> bool {
        self.coverage_p_value > 0.01
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("NUM_RUNS", self.num_runs.to_string());
        kv("S", self.s_len.to_string());
        kv("T", self.horizon.to_string());
        kv("DELTA1", format!("{:.6e}", self.delta1));
        kv("DELTA2", format!("{:.6e}", self.delta2));
        kv("THM1_COVERAGE", format!("{:.6}", self.coverage()));
        kv("COVERAGE_TARGET", format!("{:.6}", self.coverage_target()));
        kv("COVERAGE_P_VALUE", format!("{:.6e}", self.coverage_p_value));
        kv("COVERAGE_PASS", self.coverage_ok().to_string());
        kv("EXCITED_RUNS", self.excited_runs.to_string());
        kv("BOUND_Z_T_PASS", self.bound_z_t_pass.to_string());
        kv("BOUND_Z_T_FAIL", self.bound_z_t_fail.to_string());
        kv("POLYLOG_BETA_PASS", self.polylog_beta_pass.to_string());
        kv("POLYLOG_BETA_FAIL", self.polylog_beta_fail.to_string());
        kv("OFFLINE_EXCITATION_OK", self.excited_runs.to_string());
        kv("OFFLINE_LENGTH_OK", self.offline_length_ok.to_string());
        kv("OFFLINE_ALPHA_COVERED", self.offline_covered.to_string());
        kv("ACCEPTED_SAMPLES", self.accepted_samples.to_string());
        kv("TRUE_CLOSED_LOOP_VIOLATIONS", self.true_closed_loop_violations.to_string());
        kv("FALLBACKS", self.fallbacks.to_string());
        kv("MATCHED_SIMULATOR", self.matched_simulator.to_string());
        kv("MEAN_FINAL_CUM_REGRET", format!("{:.6e}", self.mean_final_regret));
        match self.log_fit {
            Some((slope, intercept, r2)) => {
                kv("LOGFIT_SLOPE", format!("{slope:.6e}"));
                kv("LOGFIT_INTERCEPT", format!("{intercept:.6e}"));
                kv("LOGFIT_R2", format!("{r2:.6}"));
            }
            None => kv("LOGFIT_R2", "nan".into()),
        }
        out
    }
}

/// Runs `num_runs` TSOD episodes at the first configured S and checks the
/// coverage and confidence-width inequalities.
pub fn run_diagnostics(cfg: &ExperimentConfig, num_runs: usize, out_dir: Option<&Path>) -> Result<DiagnosticsReport> {
    if num_runs == 0 {
        return Err(Error::config("experiment.diagnostics_runs", "must be >= 1"));
    }
    let plan = Plan::new(cfg)?;
    let exp = &cfg.experiment;
    let s_len = exp.s[0];
    let horizon = exp.t;
    let (delta1, delta2) = cfg.deltas(s_len, horizon)?;
    let runs = plan.simulate(&[s_len], horizon, &[Variant::Tsod], num_runs, &default_checkpoints(horizon))?;
    let report = diagnostics_from_runs(cfg, &runs, delta1, delta2)?;
    if let Some(dir) = out_dir {
        write_file(&dir.join("diagnostics.txt"), &report.to_text())?;
    }
    Ok(report)
}

fn diagnostics_from_runs(cfg: &ExperimentConfig, runs: &[RunOutput], delta1: f64, delta2: f64) -> Result<DiagnosticsReport> {
    let num_runs = runs.len();
    let covered_runs = runs.iter().filter(|r| r.diagnostics.all_covered()).count();
    let excited: Vec<&RunOutput> = runs.iter().filter(|r| r.excited()).collect();
    let bound_pass = excited.iter().filter(|r| r.bound_z_t_ok()).count();
    let poly_pass = excited.iter().filter(|r| r.polylog_beta_ok()).count();
    let traces: Vec<&RegretTrace> = runs.iter().map(|r| &r.trace).collect();
    let agg = AggregateResult::from_traces("tsod".into(), Variant::Tsod, runs[0].s_len, &traces, "");
    let (xs, ys): (Vec<f64>, Vec<f64>) = agg
        .mean
        .iter()
        .enumerate()
        .map(|(i, &y)| (((i + 1) as f64).ln(), y))
        .unzip();
    let matched_simulator = cfg.system.m_delta == 0.0
        && match cfg.theta_star()? {
            Some(star) => star == cfg.theta_sim()?,
            None => true,
        };
    Ok(DiagnosticsReport {
        num_runs,
        s_len: runs[0].s_len,
        horizon: runs[0].horizon,
        delta1,
        delta2,
        covered_runs,
        coverage_p_value: binomial_cdf(covered_runs, num_runs, (1.0 - delta1 - delta2).max(0.0)),
        excited_runs: excited.len(),
        bound_z_t_pass: bound_pass,
        bound_z_t_fail: excited.len() - bound_pass,
        polylog_beta_pass: poly_pass,
        polylog_beta_fail: excited.len() - poly_pass,
        offline_length_ok: runs.iter().filter(|r| r.offline.length_ok).count(),
        offline_covered: runs.iter().filter(|r| r.offline.covered).count(),
        accepted_samples: runs.iter().map(|r| r.diagnostics.accepted_samples).sum(),
        true_closed_loop_violations: runs.iter().map(|r| r.diagnostics.true_closed_loop_violations).sum(),
        fallbacks: runs.iter().map(|r| r.diagnostics.fallbacks).sum(),
        matched_simulator,
        log_fit: linear_fit(&xs, &ys),
        mean_final_regret: agg.final_mean(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingCell {
    pub s_len: usize,
    pub horizon: usize,
    pub mean_final_regret: f64,
    pub std_final_regret: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub cells: Vec<ScalingCell>,
    /// Slope of `log(mean final regret)` against `log(T/S)` over cells with
    /// positive regret.
    pub slope_t_over_s: Option<f64>,
}

impl ScalingTable {
    pub fn cell(&self, s_len: usize, horizon: usize) -> Option<&ScalingCell> {
        self.cells.iter().find(|c| c.s_len == s_len && c.horizon == horizon)
    }

    /// Log-log slope of regret against `T` at fixed `S`.
    pub fn slope_vs_t(&self, s_len: usize) -> Option<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .cells
            .iter()
            .filter(|c| c.s_len == s_len && c.mean_final_regret > 0.0)
            .map(|c| ((c.horizon as f64).ln(), c.mean_final_regret.ln()))
            .unzip();
        linear_fit(&xs, &ys).map(|f| f.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,t,mean_final_regret,std_final_regret,n_runs\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{:.16e},{:.16e},{}",
                c.s_len, c.horizon, c.mean_final_regret, c.std_final_regret, c.n_runs
            );
        }
        out
    }
}

/// Mean final TSOD regret on the `S × T` grid.
pub fn scaling_study(
    cfg: &ExperimentConfig,
    s_values: &[usize],
    t_values: &[usize],
    out_dir: Option<&Path>,
) -> Result<ScalingTable> {
    if s_values.is_empty() || t_values.is_empty() {
        return Err(Error::config("experiment.s", "scaling study needs at least one S and one T"));
    }
    let plan = Plan::new(cfg)?;
    let num_runs = cfg.experiment.num_runs;
    let mut cells = Vec::new();
    for &t in t_values {
        for &s in s_values {
            if s <= t {
                log::warn!("scaling cell S = {s}, T = {t} violates S > T");
            }
        }
        let runs = plan.simulate(s_values, t, &[Variant::Tsod], num_runs, &default_checkpoints(t))?;
        for &s in s_values {
            let finals: Vec<f64> = runs
                .iter()
                .filter(|r| r.s_len == s)
                .map(|r| r.trace.final_regret())
                .collect();
            let (mean, std) = mean_std(&finals);
            cells.push(ScalingCell {
                s_len: s,
                horizon: t,
                mean_final_regret: mean,
                std_final_regret: std,
                n_runs: finals.len(),
            });
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = cells
        .iter()
        .filter(|c| c.mean_final_regret > 0.0)
        .map(|c| ((c.horizon as f64 / c.s_len as f64).ln(), c.mean_final_regret.ln()))
        .unzip();
    let table = ScalingTable {
        cells,
        slope_t_over_s: linear_fit(&xs, &ys).map(|f| f.0),
    };
    if let Some(dir) = out_dir {
        write_file(&dir.join("scaling.csv"), &table.to_csv())?;
        let slope = table.slope_t_over_s.map_or("nan".to_string(), |s| format!("{s:.6}"));
        write_file(&dir.join("scaling.txt"), &format!("SLOPE_LOG_REGRET_VS_LOG_T_OVER_S={slope}\n"))?;
    }
    Ok(table)
}

/// Generates and caches offline summaries for every configured (S, run).
pub fn generate_offline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(PathBuf, ExcitationReport)>> {
    let plan = Plan::new(cfg)?;
    let exp = &cfg.experiment;
    let runs = if exp.share_offline { 1 } else { exp.num_runs };
    let offline_cfg = cfg.offline_config()?;
    let mut written = Vec::new();
    for &s in &exp.s {
        let (delta1, _) = cfg.deltas(s, exp.t)?;
        for run_id in 0..runs {
            let seed = derive_seed(&[exp.seed, OFFLINE_TAG, run_id as u64, s as u64]);
            let mut rng = RngStream::new(seed, 0);
            let run = run_offline(&plan.theta_sim, &plan.costs, s, &offline_cfg, delta1, cfg.system.m_delta, &mut rng)?;
            let stem = out_dir.join(offline_file_stem(s, run_id));
            std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            let json = stem.with_extension("json");
            offline::write_summary(&json, &run.summary)?;
            offline::write_trajectory_csv(&stem.with_extension("csv"), &run.trajectory)?;
            written.push((json, check_offline_data(&run.summary, &plan.theta_sim)));
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert_relative_eq!(s, (5.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn binomial_cdf_matches_direct_sum() {
        // n = 10, p = 0.3, brute force with exact binomial coefficients
        let direct = |k: usize| -> f64 {
            (0..=k)
                .map(|i| {
                    let c = (0..i).fold(1.0, |acc, j| acc * (10 - j) as f64 / (j + 1) as f64);
                    c * 0.3f64.powi(i as i32) * 0.7f64.powi(10 - i as i32)
                })
                .sum()
        };
        for k in 0..10 {
            assert_relative_eq!(binomial_cdf(k, 10, 0.3), direct(k), max_relative = 1e-12);
        }
        assert_eq!(binomial_cdf(10, 10, 0.3), 1.0);
        // far tail: 350 of 400 at p = 0.95 is strongly rejected
        assert!(binomial_cdf(350, 400, 0.95) < 1e-6);
        assert!(binomial_cdf(395, 400, 0.95) > 0.5);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        let (slope, intercept, r2) = linear_fit(&xs, &ys).unwrap();
        assert_relative_eq!(slope, 3.0, epsilon = 1e-12);
        assert_relative_eq!(intercept, -1.0, epsilon = 1e-12);
        assert_relative_eq!(r2, 1.0, epsilon = 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn svg_has_fixed_canvas_and_legend() {
        let agg = AggregateResult {
            label: "tsod".into(),
            variant: Variant::Tsod,
            s_len: 10,
            mean: vec![1.0, 2.0, 3.0],
            std: vec![0.1, 0.2, 0.3],
            n_runs: 2,
            fingerprint: String::new(),
        };
        let svg = render_svg(&[agg], "x");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(r#"width="960" height="540""#));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("<polygon"));
        assert!(svg.contains(">tsod</text>"));
    }
}
