//! Experiment configuration: a TOML key tree with matrices as nested arrays.
//!
//! ```toml
//! [system]
//! n = 3
//! m = 2
//! a_star = [[0.6, 0.5, 0.4], [0.0, 0.5, 0.4], [0.0, 0.0, 0.4]]
//! b_star = [[1.0, 0.5], [0.5, 1.0], [0.5, 0.5]]
//! a_sim  = [[0.7, 0.5, 0.4], [0.0, 0.5, 0.4], [0.0, 0.0, 0.4]]
//! b_sim  = [[1.1, 0.5], [0.5, 1.0], [0.5, 0.5]]
//! m_delta = 0.15
//!
//! [experiment]
//! s = [3000]
//! t = 1500
//! ```
//!
//! Every section except `system` may be omitted; see [`KEYS`] for the full
//! list of scalar keys and their defaults.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::controller::delta_schedule;
use crate::error::{Error, Result};
use crate::linalg;
use crate::lqr::{ConstraintSetP, ConstraintSetQ, CostMatrices, SolverOptions, ThetaParams};
use crate::offline::{ControllerMode, OfflineConfig};
use crate::trace::Variant;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub set_q: SetQSection,
    #[serde(default)]
    pub offline: OfflineSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n: usize,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_star: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_star: Option<Rows>,
    pub a_sim: Rows,
    pub b_sim: Rows,
    /// Defaults to the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_matrix: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_matrix: Option<Rows>,
    #[serde(default)]
    pub m_delta: f64,
    /// Draw `θ_* = θ_sim + δ` with `‖δ‖_F ≤ M_δ` per run instead of using
    /// `a_star`/`b_star`.
    #[serde(default)]
    pub sample_delta: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub s: Vec<usize>,
    pub t: usize,
    pub t_values: Vec<usize>,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta2: Option<f64>,
    pub num_runs: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
    pub beta_mdelta_scale: f64,
    pub max_attempts: usize,
    pub share_offline: bool,
    pub workers: usize,
    pub diagnostics_runs: usize,
    pub state_ceiling: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offline_dir: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            s: vec![3000],
            t: 1500,
            t_values: Vec::new(),
            delta: 0.1,
            delta1: None,
            delta2: None,
            num_runs: 10,
            seed: 0,
            variants: vec![Variant::Tsod, Variant::TsNoOffline, Variant::OfflineEstimateOnly],
            beta_mdelta_scale: 1.0,
            max_attempts: 100,
            share_offline: false,
            workers: 0,
            diagnostics_runs: 200,
            state_ceiling: 1e6,
            offline_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetQSection {
    pub m_p: f64,
    pub rho: f64,
}

impl Default for SetQSection {
    fn default() -> Self {
        Self { m_p: 50.0, rho: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineSection {
    pub dither_std: f64,
    pub regularizer: f64,
    pub controller_mode: ControllerMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_gain: Option<Rows>,
    pub gain_refresh: usize,
    pub set_p: SetPSection,
}

impl Default for OfflineSection {
    fn default() -> Self {
        Self {
            dither_std: 1.0,
            regularizer: 1.0,
            controller_mode: ControllerMode::CeDither,
            fixed_gain: None,
            gain_refresh: 50,
            set_p: SetPSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetPSection {
    pub m_sim: f64,
    pub phi: f64,
    pub rho_sim: f64,
}

impl Default for SetPSection {
    fn default() -> Self {
        Self {
            m_sim: 50.0,
            phi: 5.0,
            rho_sim: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    Int,
    Float,
    Bool,
    Text,
    IntList,
    TextList,
    /// Nested numeric arrays; file-only.
    Matrix,
}

pub struct ConfigKey {
    pub path: &'static str,
    pub symbol: &'static str,
    pub kind: KeyKind,
    pub help: &'static str,
}

const fn key(path: &'static str, symbol: &'static str, kind: KeyKind, help: &'static str) -> ConfigKey {
    ConfigKey { path, symbol, kind, help }
}

/// Every recognised key. Listed in `--help`; `--set` accepts the non-matrix ones.
pub const KEYS: &[ConfigKey] = &[
    key("system.n", "n", KeyKind::Int, "state dimension"),
    key("system.m", "m", KeyKind::Int, "input dimension"),
    key("system.a_star", "A_*", KeyKind::Matrix, "true state matrix (n x n)"),
    key("system.b_star", "B_*", KeyKind::Matrix, "true input matrix (n x m)"),
    key("system.a_sim", "A_*^sim", KeyKind::Matrix, "simulator state matrix"),
    key("system.b_sim", "B_*^sim", KeyKind::Matrix, "simulator input matrix"),
    key("system.q_matrix", "Q", KeyKind::Matrix, "state cost weight [default: I]"),
    key("system.r_matrix", "R", KeyKind::Matrix, "input cost weight [default: I]"),
    key("system.m_delta", "M_δ", KeyKind::Float, "known bound on ‖θ_* − θ_*^sim‖_F [default: 0]"),
    key("system.sample_delta", "", KeyKind::Bool, "draw θ_* = θ_sim + δ per run [default: false]"),
    key("experiment.s", "S", KeyKind::IntList, "offline trajectory length(s) [default: 3000]"),
    key("experiment.t", "T", KeyKind::Int, "online horizon [default: 1500]"),
    key("experiment.t_values", "T", KeyKind::IntList, "horizons for `sweep` [default: t]"),
    key("experiment.delta", "δ", KeyKind::Float, "total failure probability [default: 0.1]"),
    key("experiment.delta1", "δ₁", KeyKind::Float, "offline confidence level [default: δ/(16 max(S,T+1))]"),
    key("experiment.delta2", "δ₂", KeyKind::Float, "online confidence level [default: δ/(16T)]"),
    key("experiment.num_runs", "", KeyKind::Int, "Monte-Carlo runs per cell [default: 10]"),
    key("experiment.seed", "", KeyKind::Int, "base seed [default: 0]"),
    key("experiment.variants", "", KeyKind::TextList, "tsod, ts_no_offline, offline_estimate_only, oracle"),
    key("experiment.beta_mdelta_scale", "", KeyKind::Float, "scale on √λ_max(U_S)·M_δ in β [default: 1]"),
    key("experiment.max_attempts", "", KeyKind::Int, "rejection-sampling attempts per step [default: 100]"),
    key("experiment.share_offline", "", KeyKind::Bool, "reuse one offline dataset for all runs [default: false]"),
    key("experiment.workers", "", KeyKind::Int, "worker threads, 0 = all cores [default: 0]"),
    key("experiment.diagnostics_runs", "", KeyKind::Int, "runs used by `diagnostics` [default: 200]"),
    key("experiment.state_ceiling", "", KeyKind::Float, "abort when ‖x_t‖ exceeds this [default: 1e6]"),
    key("experiment.offline_dir", "", KeyKind::Text, "reuse summaries written by `offline`"),
    key("set_q.m_p", "M_P", KeyKind::Float, "bound on Tr(P(θ)) [default: 50]"),
    key("set_q.rho", "ρ", KeyKind::Float, "closed-loop spectral norm bound [default: 0.99]"),
    key("offline.dither_std", "", KeyKind::Float, "std of the offline exploration noise ν_s [default: 1]"),
    key("offline.regularizer", "λ₀", KeyKind::Float, "ridge regularizer, also the baselines' prior [default: 1]"),
    key("offline.controller_mode", "", KeyKind::Text, "ce_dither or fixed_gain [default: ce_dither]"),
    key("offline.fixed_gain", "K", KeyKind::Matrix, "gain for fixed_gain mode (m x n)"),
    key("offline.gain_refresh", "τ₀", KeyKind::Int, "steps between offline gain refreshes [default: 50]"),
    key("offline.set_p.m_sim", "M_sim", KeyKind::Float, "bound on Tr(P(θ_sim)) [default: 50]"),
    key("offline.set_p.phi", "φ", KeyKind::Float, "bound on ‖θ_sim‖_F [default: 5]"),
    key("offline.set_p.rho_sim", "ρ^sim", KeyKind::Float, "simulator closed-loop bound [default: 0.99]"),
    key("output.dir", "", KeyKind::Text, "output directory [default: tsod_out]"),
];

pub fn keys_help() -> String {
    let mut out = String::from("Config keys (symbol):\n");
    for k in KEYS {
        let symbol = if k.symbol.is_empty() {
            String::new()
        } else {
            format!(" ({})", k.symbol)
        };
        out.push_str(&format!("  {}{symbol}\n      {}\n", k.path, k.help));
    }
    out
}

/// Problems with `--set` overrides, reported as usage errors.
#[derive(Debug, thiserror::Error)]
pub enum OverrideError {
    #[error("override `{0}` is not of the form KEY=VALUE")]
    Malformed(String),
    #[error("unknown config key `{0}` (see --help for the key list)")]
    UnknownKey(String),
    #[error("config key `{0}` is a matrix and can only be set in the file")]
    MatrixKey(String),
    #[error("cannot parse `{value}` for `{key}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
}

fn parse_scalar(key: &str, kind: KeyKind, raw: &str) -> Result<toml::Value, OverrideError> {
    let bad = |expected| OverrideError::BadValue {
        key: key.to_string(),
        value: raw.to_string(),
        expected,
    };
    let int = |s: &str| s.trim().parse::<i64>().map(toml::Value::Integer);
    Ok(match kind {
        KeyKind::Int => int(raw).map_err(|_| bad("an integer"))?,
        KeyKind::Float => toml::Value::Float(raw.trim().parse::<f64>().map_err(|_| bad("a number"))?),
        KeyKind::Bool => toml::Value::Boolean(raw.trim().parse::<bool>().map_err(|_| bad("true or false"))?),
        KeyKind::Text => toml::Value::String(raw.to_string()),
        KeyKind::IntList => toml::Value::Array(
            raw.split(',')
                .map(int)
                .collect::<Result<_, _>>()
                .map_err(|_| bad("comma-separated integers"))?,
        ),
        KeyKind::TextList => toml::Value::Array(raw.split(',').map(|s| toml::Value::String(s.trim().into())).collect()),
        KeyKind::Matrix => return Err(OverrideError::MatrixKey(key.to_string())),
    })
}

/// Applies one `KEY=VALUE` override to a parsed config tree.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), OverrideError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| OverrideError::Malformed(assignment.to_string()))?;
    let path = path.trim();
    let spec = KEYS
        .iter()
        .find(|k| k.path == path)
        .ok_or_else(|| OverrideError::UnknownKey(path.to_string()))?;
    let value = parse_scalar(path, spec.kind, raw)?;
    let mut parts: Vec<&str> = path.split('.').collect();
    let leaf = parts.pop().expect("keys are non-empty");
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(OverrideError::UnknownKey(path.to_string())),
        };
    }
    node.insert(leaf.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(error_key(&e), e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Missing {
            path: path.to_path_buf(),
            source,
        })?;
        let mut table: toml::Table = toml::from_str(&text)
            .map_err(|e| LoadError::Invalid(Error::config(path.display().to_string(), e.to_string())))?;
        for o in overrides {
            apply_override(&mut table, o).map_err(LoadError::Override)?;
        }
        let cfg = Self::from_table(table).map_err(LoadError::Invalid)?;
        cfg.validate().map_err(LoadError::Invalid)?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hash of every input.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn theta_sim(&self) -> Result<ThetaParams> {
        self.theta("system.a_sim", &self.system.a_sim, "system.b_sim", &self.system.b_sim)
    }

    /// The fixed true parameter, or `None` in `sample_delta` mode.
    pub fn theta_star(&self) -> Result<Option<ThetaParams>> {
        if self.system.sample_delta {
            return Ok(None);
        }
        match (&self.system.a_star, &self.system.b_star) {
            (Some(a), Some(b)) => Ok(Some(self.theta("system.a_star", a, "system.b_star", b)?)),
            _ => Err(Error::config(
                "system.a_star",
                "a_star and b_star are required unless sample_delta = true",
            )),
        }
    }

    fn theta(&self, a_key: &str, a: &Rows, b_key: &str, b: &Rows) -> Result<ThetaParams> {
        let (n, m) = (self.system.n, self.system.m);
        let a = shaped(a_key, a, n, n)?;
        let b = shaped(b_key, b, n, m)?;
        ThetaParams::new(a, b).map_err(|e| Error::config(a_key, e.to_string()))
    }

    pub fn costs(&self) -> Result<CostMatrices> {
        let (n, m) = (self.system.n, self.system.m);
        let q = match &self.system.q_matrix {
            Some(rows) => shaped("system.q_matrix", rows, n, n)?,
            None => DMatrix::identity(n, n),
        };
        let r = match &self.system.r_matrix {
            Some(rows) => shaped("system.r_matrix", rows, m, m)?,
            None => DMatrix::identity(m, m),
        };
        CostMatrices::new(q, r).map_err(|e| {
            let key = if e.to_string().contains("q_matrix") {
                "system.q_matrix"
            } else {
                "system.r_matrix"
            };
            Error::config(key, e.to_string())
        })
    }

    pub fn set_q(&self) -> Result<ConstraintSetQ> {
        ConstraintSetQ::new(self.set_q.m_p, self.set_q.rho)
    }

    pub fn offline_config(&self) -> Result<OfflineConfig> {
        let o = &self.offline;
        let fixed_gain = o
            .fixed_gain
            .as_ref()
            .map(|rows| shaped("offline.fixed_gain", rows, self.system.m, self.system.n))
            .transpose()?;
        Ok(OfflineConfig {
            dither_std: o.dither_std,
            regularizer: o.regularizer,
            controller_mode: o.controller_mode,
            fixed_gain,
            set_p: ConstraintSetP::new(o.set_p.m_sim, o.set_p.phi, o.set_p.rho_sim)?,
            gain_refresh: o.gain_refresh,
            state_ceiling: self.experiment.state_ceiling,
        })
    }

    /// `(δ₁, δ₂)` for an offline length `s_len` and horizon `horizon`.
    pub fn deltas(&self, s_len: usize, horizon: usize) -> Result<(f64, f64)> {
        let (d1, d2) = delta_schedule(self.experiment.delta, s_len, horizon)
            .map_err(|e| Error::config("experiment.delta", e.to_string()))?;
        Ok((self.experiment.delta1.unwrap_or(d1), self.experiment.delta2.unwrap_or(d2)))
    }

    pub fn sweep_t_values(&self) -> Vec<usize> {
        if self.experiment.t_values.is_empty() {
            vec![self.experiment.t]
        } else {
            self.experiment.t_values.clone()
        }
    }

    /// Checks everything that can be checked before running.
    pub fn validate(&self) -> Result<()> {
        let sys = &self.system;
        if sys.n == 0 {
            return Err(Error::config("system.n", "must be >= 1"));
        }
        if sys.m == 0 {
            return Err(Error::config("system.m", "must be >= 1"));
        }
        if !(sys.m_delta >= 0.0 && sys.m_delta.is_finite()) {
            return Err(Error::config("system.m_delta", "must be finite and >= 0"));
        }
        let costs = self.costs()?;
        let theta_sim = self.theta_sim()?;
        let theta_star = self.theta_star()?;
        let set_q = self.set_q()?;
        self.offline_config()?;

        let exp = &self.experiment;
        if exp.t == 0 {
            return Err(Error::config("experiment.t", "T must be >= 1"));
        }
        if exp.t_values.contains(&0) {
            return Err(Error::config("experiment.t_values", "every T must be >= 1"));
        }
        if exp.s.is_empty() || exp.s.contains(&0) {
            return Err(Error::config("experiment.s", "need at least one S, each >= 1"));
        }
        if exp.num_runs == 0 {
            return Err(Error::config("experiment.num_runs", "must be >= 1"));
        }
        if exp.variants.is_empty() {
            return Err(Error::config("experiment.variants", "need at least one variant"));
        }
        if exp.max_attempts == 0 {
            return Err(Error::config("experiment.max_attempts", "must be >= 1"));
        }
        if !(exp.beta_mdelta_scale >= 0.0) {
            return Err(Error::config("experiment.beta_mdelta_scale", "must be >= 0"));
        }
        if !(exp.delta > 0.0 && exp.delta < 1.0) {
            return Err(Error::config("experiment.delta", "must lie in (0,1)"));
        }
        for (key, v) in [("experiment.delta1", exp.delta1), ("experiment.delta2", exp.delta2)] {
            if let Some(v) = v {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::config(key, "must lie in (0,1)"));
                }
            }
        }

        let reference = theta_star.as_ref().unwrap_or(&theta_sim);
        if set_q.admit(reference, &costs, &SolverOptions::default()).is_none() {
            let which = if theta_star.is_some() { "θ_*" } else { "θ_sim" };
            return Err(Error::config(
                "set_q",
                format!("{which} is not in Q (Tr P <= {}, closed-loop norm <= {})", set_q.m_p, set_q.rho),
            ));
        }
        if let Some(star) = &theta_star {
            let gap = star.try_sub(&theta_sim)?.frobenius_norm();
            if gap > sys.m_delta + 1e-12 {
                log::warn!("‖θ_* − θ_sim‖_F = {gap:.4} exceeds system.m_delta = {}", sys.m_delta);
            }
        }
        for &s in &exp.s {
            for t in self.sweep_t_values().into_iter().chain([exp.t]) {
                if s <= t {
                    log::warn!("S = {s} <= T = {t}: the confidence schedule assumes S > T");
                }
            }
        }
        Ok(())
    }
}

fn shaped(key: &str, rows: &Rows, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    let m = linalg::matrix_from_rows("matrix", rows).map_err(|e| Error::config(key, e.to_string()))?;
    if m.shape() != (nrows, ncols) {
        return Err(Error::config(
            key,
            format!("expected {nrows}x{ncols}, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m)
}

fn error_key(e: &toml::de::Error) -> String {
    let msg = e.to_string();
    // serde names the offending field in backticks
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "<file>".into())
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read config file {}: {source}", path.display())]
    Missing { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Override(OverrideError),
    #[error(transparent)]
    Invalid(Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[system]
n = 1
m = 1
a_star = [[0.5]]
b_star = [[1.0]]
a_sim = [[0.5]]
b_sim = [[1.0]]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.experiment.t, 1500);
        assert_eq!(cfg.set_q.m_p, 50.0);
        assert_eq!(cfg.costs().unwrap(), CostMatrices::identity(1, 1));
    }

    #[test]
    fn non_pd_r_is_named() {
        let text = format!("{MINIMAL}r_matrix = [[-1.0]]\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("r_matrix"), "{err}");
    }

    #[test]
    fn unknown_field_is_named() {
        let text = format!("{MINIMAL}\n[experiment]\nhorizon = 5\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");
    }

    #[test]
    fn overrides_replace_scalars() {
        let mut table: toml::Table = toml::from_str(MINIMAL).unwrap();
        apply_override(&mut table, "experiment.t=20").unwrap();
        apply_override(&mut table, "experiment.s=100,200").unwrap();
        apply_override(&mut table, "set_q.rho=0.95").unwrap();
        apply_override(&mut table, "experiment.variants=tsod,oracle").unwrap();
        let cfg = ExperimentConfig::from_table(table).unwrap();
        assert_eq!(cfg.experiment.t, 20);
        assert_eq!(cfg.experiment.s, vec![100, 200]);
        assert_eq!(cfg.set_q.rho, 0.95);
        assert_eq!(cfg.experiment.variants, vec![Variant::Tsod, Variant::Oracle]);
    }

    #[test]
    fn bad_overrides() {
        let mut table: toml::Table = toml::from_str(MINIMAL).unwrap();
        assert!(matches!(apply_override(&mut table, "experiment.t"), Err(OverrideError::Malformed(_))));
        assert!(matches!(apply_override(&mut table, "nope=1"), Err(OverrideError::UnknownKey(_))));
        assert!(matches!(apply_override(&mut table, "system.a_star=1"), Err(OverrideError::MatrixKey(_))));
        assert!(matches!(
            apply_override(&mut table, "experiment.t=abc"),
            Err(OverrideError::BadValue { .. })
        ));
    }

    #[test]
    fn true_parameter_outside_q_is_a_config_error() {
        let text = MINIMAL.replace("a_star = [[0.5]]\nb_star = [[1.0]]", "a_star = [[3.0]]\nb_star = [[0.01]]");
        let err = ExperimentConfig::from_toml_str(&text).unwrap().validate().unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "set_q"), "{err}");
    }

    #[test]
    fn help_lists_symbols() {
        let help = keys_help();
        for sym in ["(S)", "(T)", "(M_δ)", "(δ)", "(M_P)", "(ρ)", "(φ)"] {
            assert!(help.contains(sym), "missing {sym}");
        }
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.experiment.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
