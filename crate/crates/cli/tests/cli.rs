use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cl_estimator::golden::RunManifest;

const SHORT: &str = r#"
[sim]
duration = 8.0
steady_state_window = 2.0

[purge]
dwell = 0.5

[sweep]
k = [20.0]
xi = [1.0]
window = [21]
order = [2]
variances = [0.0, 0.005]
trials = 1
threads = 1
"#;

fn clest(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clest"))
        .current_dir(dir)
        .env_remove("CLEST_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("short.toml"), SHORT).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_writes_log_and_manifest() {
    let dir = setup();
    let o = clest(dir.path(), &["--config", "short.toml", "--out-dir", "run", "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trajectory.csv", "stacks.csv", "metrics.csv", "manifest.toml"] {
        assert!(dir.path().join("run").join(f).exists(), "{f} missing");
    }
    let m = RunManifest::from_toml_str(&fs::read_to_string(dir.path().join("run/manifest.toml")).unwrap()).unwrap();
    assert_eq!(m.outputs, ["trajectory.csv", "stacks.csv", "metrics.csv"]);
}

#[test]
fn unknown_key_is_named() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[observer]\nk2 = 1.0\n").unwrap();
    let o = clest(dir.path(), &["--config", "bad.toml", "simulate"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("k2") && err.contains("line 2"), "{err}");
}

#[test]
fn noise_override_lands_in_manifest() {
    let dir = setup();
    let o = clest(dir.path(), &["--config", "short.toml", "--noise-variance", "0.1", "--out-dir", "run", "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = RunManifest::from_toml_str(&fs::read_to_string(dir.path().join("run/manifest.toml")).unwrap()).unwrap();
    assert_eq!(m.config.sim.noise_variance, 0.1);
}

#[test]
fn manifest_rerun_is_byte_identical() {
    let dir = setup();
    assert!(clest(dir.path(), &["--config", "short.toml", "--seed", "7", "--out-dir", "a", "simulate"]).status.success());
    assert!(clest(dir.path(), &["--config", "a/manifest.toml", "--out-dir", "b", "simulate"]).status.success());
    for f in ["trajectory.csv", "stacks.csv", "metrics.csv", "manifest.toml"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn out_dir_from_environment() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_clest"))
        .current_dir(dir.path())
        .env("CLEST_OUT_DIR", "from_env")
        .args(["--config", "short.toml", "simulate"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("from_env/trajectory.csv").exists());
}

#[test]
fn print_config_is_loadable() {
    let dir = setup();
    let o = clest(dir.path(), &["--config", "short.toml", "--seed", "9", "--print-config"]);
    assert!(o.status.success());
    let cfg = cl_estimator::SimConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.sim.seed, 9);
    assert_eq!(cfg.sim.duration, 8.0);
}

#[test]
fn divergence_exits_two_with_partial_log() {
    let dir = setup();
    fs::write(
        dir.path().join("div.toml"),
        "[sim]\nduration = 4.0\nsteady_state_window = 1.0\n[estimator]\ntheta_bound = 0.01\ntheta_hat0 = [0.1, 0.1, 0.1, 0.1]\n",
    )
    .unwrap();
    let o = clest(dir.path(), &["--config", "div.toml", "--out-dir", "run", "simulate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(dir.path().join("run/trajectory.csv").exists());
}

#[test]
fn compare_table_shape() {
    let dir = setup();
    let o = clest(dir.path(), &["--config", "short.toml", "--out-dir", "cmp", "compare"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("cmp/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    let text = fs::read_to_string(dir.path().join("cmp/comparison.txt")).unwrap();
    assert!(text.contains("var 0.005"));

    let o = clest(dir.path(), &["--config", "short.toml", "--noise-variance", "0.005", "--out-dir", "one", "compare", "--trials", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("one/comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("numerical,") && rows[1].starts_with("observer,"));
}

fn with_bounds(a_lower: f64) -> String {
    format!(
        "[estimator]\nk = 1.0\n[observer]\nk1 = 100.0\nalpha1 = 100.0\n[bounds]\nf_bar = 1.0\nf1_bar = 1.0\nx_bar = 1.0\ny_bar = 1.0\ngamma_bar = 1.0\na_bar = 1.0\na_lower = {a_lower:?}\n"
    )
}

#[test]
fn check_gains_exit_status_and_arithmetic() {
    let dir = setup();
    fs::write(dir.path().join("pass.toml"), with_bounds(1.0)).unwrap();
    fs::write(dir.path().join("fail.toml"), with_bounds(0.0)).unwrap();
    let o = clest(dir.path(), &["--config", "pass.toml", "--out-dir", "g", "check-gains"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("g/gain_conditions.csv")).unwrap();
    let (head, row) = csv.split_once('\n').unwrap();
    let cols: Vec<&str> = head.split(',').collect();
    let vals: Vec<&str> = row.trim().split(',').collect();
    let get = |name: &str| vals[cols.iter().position(|c| *c == name).unwrap()].parse::<f64>().unwrap();
    assert!((get("cond1_rhs") - (3.0 / 100.0 + 4.0 / 100.0 + 4.0 / 100.0)).abs() < 1e-12);
    assert!((get("cond2_rhs") - 6.0 / 100.0).abs() < 1e-12);

    let o = clest(dir.path(), &["--config", "fail.toml", "--out-dir", "g", "check-gains"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_gains_without_bounds_or_log_is_usage_error() {
    let dir = setup();
    let o = clest(dir.path(), &["--config", "short.toml", "check-gains"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--log"));
}

#[test]
fn gains_and_dwell_time_from_a_log() {
    let dir = setup();
    assert!(clest(dir.path(), &["--config", "short.toml", "--out-dir", "run", "simulate"]).status.success());
    let o = clest(dir.path(), &["--config", "short.toml", "--out-dir", "g", "check-gains", "--log", "run"]);
    assert!(matches!(o.status.code(), Some(0) | Some(1)), "{}", stderr(&o));
    assert!(dir.path().join("g/gain_conditions.csv").exists());

    let o = clest(dir.path(), &["--config", "short.toml", "--out-dir", "d", "dwell-time", "--log", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("d/dwell_time.csv")).unwrap();
    let dwell: f64 = csv.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!(dwell.is_finite() && dwell >= 0.0);
}

#[test]
fn dwell_time_rejects_one_switch_log() {
    let dir = setup();
    fs::write(dir.path().join("one.toml"), format!("{SHORT}\n").replace("dwell = 0.5", "dwell = 5.0")).unwrap();
    assert!(clest(dir.path(), &["--config", "one.toml", "--out-dir", "run", "simulate"]).status.success());
    let stacks = fs::read_to_string(dir.path().join("run/stacks.csv")).unwrap();
    assert!(stacks.lines().count() <= 3, "expected at most one switch");
    let o = clest(dir.path(), &["--config", "one.toml", "--out-dir", "d", "dwell-time", "--log", "run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at least 2 switches"));
}

#[test]
fn fixture_record_and_check() {
    let dir = setup();
    assert!(clest(dir.path(), &["--config", "short.toml", "fixture", "--path", "fx.toml"]).status.success());
    assert!(clest(dir.path(), &["--config", "short.toml", "fixture", "--path", "fx.toml", "--check"]).status.success());
    let o = clest(dir.path(), &["--config", "short.toml", "--seed", "2", "fixture", "--path", "fx.toml", "--check"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_subcommand_is_usage_error() {
    let dir = setup();
    assert_eq!(clest(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(clest(dir.path(), &["frobnicate"]).status.code(), Some(1));
}
