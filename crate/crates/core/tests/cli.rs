use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tsod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsod"))
        .args(args)
        .env_remove("TSOD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn example(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("examples")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_usage_error_naming_path() {
    let out = tsod(&["run", "--config", "/nonexistent/experiment.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/experiment.cfg"), "{}", stderr(&out));
}

#[test]
fn missing_config_flag_is_usage_error() {
    let out = tsod(&["run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--config"));
}

#[test]
fn bad_flag_is_usage_error() {
    assert_eq!(tsod(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(tsod(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn unknown_override_key_is_usage_error() {
    let cfg = example("riccati_trivial.cfg");
    let out = tsod(&["riccati", "--config", &cfg, "--set", "experiment.horizon=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("experiment.horizon"));
}

#[test]
fn non_pd_r_is_config_error_naming_r_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(example("riccati_trivial.cfg"))
        .unwrap()
        .replace("r_matrix = [[1.0]]", "r_matrix = [[0.0]]");
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, text).unwrap();
    let out = tsod(&["riccati", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("r_matrix"), "{}", stderr(&out));
}

#[test]
fn riccati_on_zero_dynamics_prints_q_and_zero_gain() {
    let out = tsod(&["riccati", "--config", &example("riccati_trivial.cfg")]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let value = |key: &str| -> String {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("no {key} line in {text}"))
            .to_string()
    };
    let p: Vec<Vec<f64>> = serde_json::from_str(&value("P")).unwrap();
    assert_eq!(p, vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
    let k: Vec<Vec<f64>> = serde_json::from_str(&value("K")).unwrap();
    assert!(k.iter().flatten().all(|&v| v == 0.0));
    assert_eq!(value("J").parse::<f64>().unwrap(), 3.0);
}

#[test]
fn help_lists_keys_with_symbols() {
    let out = tsod(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for (key, sym) in [
        ("experiment.s", "(S)"),
        ("experiment.t", "(T)"),
        ("system.m_delta", "(M_δ)"),
        ("experiment.delta", "(δ)"),
        ("set_q.m_p", "(M_P)"),
        ("set_q.rho", "(ρ)"),
        ("offline.set_p.phi", "(φ)"),
    ] {
        assert!(text.contains(&format!("{key} {sym}")), "missing {key} {sym}");
    }
}

#[test]
fn shipped_configs_validate() {
    for name in [
        "paper_fig1.cfg",
        "paper_fig2.cfg",
        "corollary1.cfg",
        "scalar_coverage.cfg",
        "riccati_trivial.cfg",
    ] {
        let out = tsod(&["riccati", "--config", &example(name)]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", stderr(&out));
    }
}

#[test]
fn diagnostics_reports_coverage_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsod(&[
        "diagnostics",
        "--config",
        &example("scalar_coverage.cfg"),
        "--runs",
        "200",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("diagnostics.txt")).unwrap();
    assert_eq!(report, stdout(&out));
    let coverage: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("THM1_COVERAGE="))
        .expect("coverage line")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&coverage));
    for line in report.lines() {
        assert!(line.split_once('=').is_some(), "not KEY=VALUE: {line}");
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_writes_only_under_out_dir_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example("paper_fig1.cfg");
    let mut listings = Vec::new();
    for name in ["first", "second"] {
        let out_dir = dir.path().join(name);
        let out = tsod(&[
            "run",
            "--config",
            &cfg,
            "--out",
            out_dir.to_str().unwrap(),
            "--set",
            "experiment.num_runs=2",
            "--set",
            "experiment.t=200",
            "--workers",
            "2",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        listings.push(files_under(&out_dir));
    }
    assert_eq!(listings[0], listings[1]);
    assert!(listings[0].contains(&PathBuf::from("aggregate.csv")));
    assert!(listings[0].contains(&PathBuf::from("regret.svg")));
    assert_eq!(listings[0].iter().filter(|p| p.starts_with("runs")).count(), 6);
    for rel in &listings[0] {
        let a = std::fs::read(dir.path().join("first").join(rel)).unwrap();
        let b = std::fs::read(dir.path().join("second").join(rel)).unwrap();
        assert!(a == b, "{} differs", rel.display());
    }
    assert_eq!(files_under(dir.path()).len(), 2 * listings[0].len());
}

#[test]
fn out_dir_falls_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tsod"))
        .args(["offline", "--config", &example("scalar_coverage.cfg"), "--set", "experiment.num_runs=2"])
        .env("TSOD_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let files = files_under(dir.path());
    assert!(files.contains(&PathBuf::from("offline/offline_S400_run000.json")), "{files:?}");
    assert!(files.contains(&PathBuf::from("offline/offline_S400_run001.csv")));
    assert!(stdout(&out).contains("EXCITATION_OK="));
}

#[test]
fn cached_offline_summaries_reproduce_the_fresh_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example("scalar_coverage.cfg");
    let base = dir.path().to_str().unwrap();
    let common = ["--set", "experiment.num_runs=3", "--set", "experiment.t=50"];
    let gen = tsod(&[&["offline", "--config", &cfg, "--out", base][..], &common].concat());
    assert_eq!(gen.status.code(), Some(0), "{}", stderr(&gen));

    let fresh_dir = format!("{base}/fresh");
    let cached_dir = format!("{base}/cached");
    let offline_key = format!("experiment.offline_dir={base}/offline");
    let fresh = tsod(&[&["run", "--config", &cfg, "--out", &fresh_dir][..], &common].concat());
    let cached = tsod(
        &[
            &["run", "--config", &cfg, "--out", &cached_dir, "--set", &offline_key][..],
            &common,
        ]
        .concat(),
    );
    assert_eq!(fresh.status.code(), Some(0), "{}", stderr(&fresh));
    assert_eq!(cached.status.code(), Some(0), "{}", stderr(&cached));
    let a = std::fs::read(format!("{fresh_dir}/aggregate.csv")).unwrap();
    let b = std::fs::read(format!("{cached_dir}/aggregate.csv")).unwrap();
    assert!(a == b);
}

#[test]
fn sweep_writes_scaling_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsod(&[
        "sweep",
        "--config",
        &example("corollary1.cfg"),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "experiment.num_runs=2",
        "--set",
        "experiment.t_values=50,100",
        "--set",
        "experiment.s=400",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = std::fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(stdout(&out).contains("SLOPE_LOG_REGRET_VS_LOG_T_OVER_S="));
}
