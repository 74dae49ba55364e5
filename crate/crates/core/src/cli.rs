//! The `tsod` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{self, ExperimentConfig, LoadError};
use crate::error::Error;
use crate::harness;
use crate::lqr::{self, SolverOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const DEFAULT_OUT_DIR: &str = "tsod_out";

#[derive(Debug, Parser)]
#[command(name = "tsod", version, about = "Thompson sampling for LQR with offline data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory [fallbacks: output.dir, $TSOD_OUT_DIR, ./tsod_out].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Override a scalar config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Base seed, same as --set experiment.seed=N.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads, same as --set experiment.workers=N.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate and cache offline summaries for every S and run.
    Offline,
    /// Run the configured experiment and write CSV and SVG output.
    Run,
    /// Coverage and confidence-width inequality checks over many runs.
    Diagnostics {
        /// Number of runs [default: experiment.diagnostics_runs].
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Final regret over the S × T grid (experiment.s × experiment.t_values).
    Sweep,
    /// Print P, K and J for the configured true parameter.
    Riccati,
}

/// A parsed command line with its validated config.
#[derive(Debug)]
pub struct Invocation {
    pub command: Command,
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub verbosity: u8,
    pub config: ExperimentConfig,
}

#[derive(Debug)]
pub enum CliError {
    /// Help or version output; not a failure.
    Info(String),
    Usage(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => EXIT_OK,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Info(m) | CliError::Usage(m) | CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn command() -> clap::Command {
    Cli::command().after_long_help(config::keys_help())
}

pub fn parse_and_validate<I, T>(args: I) -> Result<Invocation, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Info(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    })?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| CliError::Usage("missing required --config PATH".into()))?;

    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("experiment.seed={seed}"));
    }
    if let Some(workers) = cli.workers {
        overrides.push(format!("experiment.workers={workers}"));
    }
    let config = ExperimentConfig::load(&config_path, &overrides).map_err(|e| match e {
        LoadError::Missing { .. } | LoadError::Override(_) => CliError::Usage(e.to_string()),
        LoadError::Invalid(inner) => CliError::Config(inner.to_string()),
    })?;

    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .or_else(|| std::env::var_os("TSOD_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    Ok(Invocation {
        command: cli.command,
        config_path,
        out_dir,
        verbosity: cli.verbose,
        config,
    })
}

pub fn dispatch(inv: &Invocation, stdout: &mut impl Write) -> Result<(), CliError> {
    let cfg = &inv.config;
    let out = inv.out_dir.as_path();
    let io = |e: std::io::Error| CliError::Runtime(e.to_string());
    match inv.command {
        Command::Riccati => {
            let theta = match cfg.theta_star()? {
                Some(t) => t,
                None => cfg.theta_sim()?,
            };
            let costs = cfg.costs()?;
            let sol = lqr::solve_dare(&theta, &costs, &SolverOptions::default())?;
            let norm = lqr::closed_loop_norm(&theta, &sol.gain)?;
            writeln!(stdout, "P={}", rows_json(&sol.p_matrix)).map_err(io)?;
            writeln!(stdout, "K={}", rows_json(&sol.gain)).map_err(io)?;
            writeln!(stdout, "J={:.12e}", sol.avg_cost).map_err(io)?;
            writeln!(stdout, "ITERATIONS={}", sol.iterations).map_err(io)?;
            writeln!(stdout, "CLOSED_LOOP_NORM={norm:.12e}").map_err(io)?;
        }
        Command::Offline => {
            let dir = out.join("offline");
            for (path, report) in harness::generate_offline(cfg, &dir)? {
                writeln!(stdout, "SUMMARY={}", path.display()).map_err(io)?;
                for (k, v) in report.key_values("") {
                    writeln!(stdout, "{k}={v}").map_err(io)?;
                }
            }
        }
        Command::Run => {
            let result = harness::run_experiment(cfg, Some(out))?;
            writeln!(stdout, "FINGERPRINT={}", result.fingerprint).map_err(io)?;
            for a in &result.aggregates {
                writeln!(
                    stdout,
                    "{}: final mean cumulative regret {:.4} ± {:.4} over {} runs",
                    a.label,
                    a.final_mean(),
                    a.final_std(),
                    a.n_runs
                )
                .map_err(io)?;
            }
            writeln!(stdout, "wrote {}", out.join("aggregate.csv").display()).map_err(io)?;
        }
        Command::Diagnostics { runs } => {
            let runs = runs.unwrap_or(cfg.experiment.diagnostics_runs);
            let report = harness::run_diagnostics(cfg, runs, Some(out))?;
            write!(stdout, "{}", report.to_text()).map_err(io)?;
        }
        Command::Sweep => {
            let table = harness::scaling_study(cfg, &cfg.experiment.s, &cfg.sweep_t_values(), Some(out))?;
            write!(stdout, "{}", table.to_csv()).map_err(io)?;
            match table.slope_t_over_s {
                Some(s) => writeln!(stdout, "SLOPE_LOG_REGRET_VS_LOG_T_OVER_S={s:.6}").map_err(io)?,
                None => writeln!(stdout, "SLOPE_LOG_REGRET_VS_LOG_T_OVER_S=nan").map_err(io)?,
            }
        }
    }
    Ok(())
}

fn rows_json(m: &nalgebra::DMatrix<f64>) -> String {
    serde_json::to_string(&crate::linalg::matrix_to_rows(m)).expect("finite matrix serializes")
}

fn level_for(verbosity: u8) -> log::LevelFilter {
    match verbosity {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    }
}

/// Parses, validates and dispatches; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::new()
        .filter_level(log::LevelFilter::Debug)
        .format_timestamp(None)
        .try_init();
    log::set_max_level(log::LevelFilter::Warn);
    let result = parse_and_validate(args).and_then(|inv| {
        log::set_max_level(level_for(inv.verbosity));
        log::info!("config {} -> {}", inv.config_path.display(), inv.out_dir.display());
        ensure_parent(&inv.out_dir)?;
        dispatch(&inv, &mut std::io::stdout().lock())
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Info(text)) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            let prefix = match e {
                CliError::Usage(_) => "usage error",
                CliError::Config(_) => "config error",
                _ => "error",
            };
            eprintln!("{prefix}: {}", e.message().trim_end());
            e.exit_code()
        }
    }
}

fn ensure_parent(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}
