use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cl_estimator::analysis::{analyze, bounds_for, dwell_time_inputs, gain_report};
use cl_estimator::estimator::min_dwell_time;
use cl_estimator::golden::{regression_check, GoldenFixture, RunManifest, STEP_BUDGET_NS};
use cl_estimator::sim::{compare_methods, RunMetrics, Simulation};
use cl_estimator::{run_experiment, Error, Method, SimConfig, TrajectoryLog};

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

/// Concurrent-learning estimator experiments.
///
/// Exit status: 0 success, 1 usage or config error or a failed check,
/// 2 numerical divergence, 3 internal error.
#[derive(Parser, Debug)]
#[command(name = "clest", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config or a run manifest; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "CLEST_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    noise_variance: Option<f64>,
    /// `observer` or `numerical`.
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write its trajectory, stacks and metrics.
    Simulate,
    /// Run the method comparison sweep.
    Compare {
        /// Overrides `sweep.trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Evaluate the sufficient gain conditions.
    CheckGains {
        /// Output directory of a previous `simulate`, used when the config has no bounds.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Minimum dwell time implied by a logged run.
    DwellTime {
        #[arg(long)]
        log: PathBuf,
    },
    /// Switch-decrease and envelope monitors over a logged run.
    Monitor {
        #[arg(long)]
        log: PathBuf,
    },
    /// Record a golden fixture, or check a fresh run against one.
    Fixture {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        check: bool,
    },
    /// Time the per-step cost of the full estimator loop.
    Bench {
        #[arg(long, default_value_t = 20_000)]
        steps: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Diverged(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::StaleFixture { .. } | Error::Log(_) => Failure::Usage(e.to_string()),
            Error::Diverged { .. } | Error::Integration { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<SimConfig, Failure> {
    let mut cfg = match &common.config {
        None => SimConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            match RunManifest::from_toml_str(&text) {
                Ok(m) => m.config,
                Err(_) => SimConfig::load(path)?,
            }
        }
    };
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    if let Some(v) = common.noise_variance {
        cfg.sim.noise_variance = v;
    }
    if let Some(m) = common.method {
        cfg.sim.method = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_outputs(dir: &Path, cfg: &SimConfig, files: &[(&str, Vec<u8>)]) -> CmdResult {
    fs::create_dir_all(dir)?;
    for (name, body) in files {
        fs::write(dir.join(name), body)?;
    }
    let names = files.iter().map(|(n, _)| n.to_string()).collect();
    fs::write(dir.join("manifest.toml"), RunManifest::new(cfg, names).to_toml_string())?;
    Ok(())
}

fn log_files(log: &TrajectoryLog) -> Result<Vec<(&'static str, Vec<u8>)>, Failure> {
    let mut traj = Vec::new();
    log.write_csv(&mut traj)?;
    let mut stacks = Vec::new();
    log.write_stacks_csv(&mut stacks)?;
    Ok(vec![("trajectory.csv", traj), ("stacks.csv", stacks)])
}

fn read_log(dir: &Path, cfg: &SimConfig) -> Result<TrajectoryLog, Failure> {
    let open = |name: &str| {
        let p = dir.join(name);
        fs::File::open(&p)
            .map(BufReader::new)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))
    };
    Ok(TrajectoryLog::read_csv(open("trajectory.csv")?, open("stacks.csv")?, cfg.plant.theta())?)
}

fn simulate(cfg: &SimConfig, out: &Path) -> CmdResult {
    match run_experiment(cfg) {
        Ok(log) => {
            let metrics = RunMetrics::from_log(cfg, &log)?;
            let mut files = log_files(&log)?;
            files.push(("metrics.csv", metrics.to_csv().into_bytes()));
            write_outputs(out, cfg, &files)?;
            println!(
                "final relative error {:.3e}, steady-state RMS {:.4e}, {} switches; wrote {}",
                metrics.final_relative_error,
                metrics.rms_steady_state,
                metrics.switches,
                out.display()
            );
            Ok(())
        }
        Err(Error::Diverged { t, reason, log }) => {
            write_outputs(out, cfg, &log_files(&log)?)?;
            Err(Failure::Diverged(format!("run diverged at t = {t}: {reason}; partial log in {}", out.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn compare(cfg: &mut SimConfig, trials: Option<usize>, noise_override: bool, out: &Path) -> CmdResult {
    if let Some(t) = trials {
        cfg.sweep.trials = t;
    }
    if noise_override {
        cfg.sweep.variances = vec![cfg.sim.noise_variance];
    }
    let table = compare_methods(cfg, &cfg.sweep.variances.clone(), cfg.sweep.trials)?;
    let text = table.to_text();
    print!("{text}");
    let errors: String = table.cells.iter().flat_map(|c| c.errors.iter().map(|e| format!("{e}\n"))).collect();
    let mut files = vec![("comparison.csv", table.to_csv().into_bytes()), ("comparison.txt", text.into_bytes())];
    if !errors.is_empty() {
        files.push(("errors.txt", errors.into_bytes()));
    }
    write_outputs(out, cfg, &files)
}

fn check_gains(cfg: &SimConfig, log: Option<&Path>, out: &Path) -> CmdResult {
    let log = match (cfg.bounds, log) {
        (None, None) => {
            return Err(Failure::Usage(
                "check-gains needs a [bounds] section in the config or --log <simulate output dir>".into(),
            ))
        }
        (Some(_), _) => None,
        (None, Some(dir)) => Some(read_log(dir, cfg)?),
    };
    let b = bounds_for(cfg, log.as_ref())?;
    let report = gain_report(cfg, &b)?;
    print!("{}", report.to_text());
    write_outputs(out, cfg, &[("gain_conditions.csv", report.to_csv().into_bytes())])?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Usage("gain conditions not satisfied".into()))
    }
}

fn dwell_time(cfg: &SimConfig, dir: &Path, out: &Path) -> CmdResult {
    let log = read_log(dir, cfg)?;
    let analysis = analyze(cfg, &log)?;
    let inputs = dwell_time_inputs(&analysis, &log).map_err(|e| Failure::Usage(e.to_string()))?;
    let dwell = min_dwell_time(&inputs)?;
    println!(
        "minimum dwell time {dwell:.6e} s over {} switching indices (configured {} s)",
        inputs.iotas.len(),
        cfg.purge.dwell
    );
    let body = format!("dwell_time,switching_indices,configured\n{dwell:e},{},{}\n", inputs.iotas.len(), cfg.purge.dwell);
    write_outputs(out, cfg, &[("dwell_time.csv", body.into_bytes())])
}

fn monitor(cfg: &SimConfig, dir: &Path, out: &Path) -> CmdResult {
    let log = read_log(dir, cfg)?;
    let a = analyze(cfg, &log)?;
    print!("{}", a.switch_decrease.to_text("switch decrease"));
    print!("{}", a.envelope.to_text("inter-switch envelope"));
    write_outputs(
        out,
        cfg,
        &[
            ("switch_decrease.csv", a.switch_decrease.to_csv().into_bytes()),
            ("envelope.csv", a.envelope.to_csv().into_bytes()),
        ],
    )?;
    if a.switch_decrease.is_clean() && a.envelope.is_clean() {
        Ok(())
    } else {
        Err(Failure::Usage("Lyapunov monitors reported violations".into()))
    }
}

fn fixture(cfg: &SimConfig, path: &Path, check: bool) -> CmdResult {
    if !check {
        GoldenFixture::record(cfg)?.save(path)?;
        println!("recorded {}", path.display());
        return Ok(());
    }
    let fx = GoldenFixture::load(path)?;
    let outcome = regression_check(&fx, cfg)?;
    for (name, expected, found) in &outcome.mismatches {
        println!("{name}: expected {expected:e}, found {found:e}");
    }
    if outcome.passed() {
        println!("fixture {} matches", path.display());
        Ok(())
    } else {
        Err(Failure::Usage("fixture metrics differ".into()))
    }
}

fn bench(cfg: &SimConfig, steps: u64, out: &Path) -> CmdResult {
    let mut sim = Simulation::new(cfg)?;
    let start = Instant::now();
    let mut done = 0u64;
    while done < steps && sim.step()? {
        done += 1;
    }
    let ns = start.elapsed().as_nanos() as f64 / done.max(1) as f64;
    println!("{done} steps, {ns:.0} ns/step (budget {STEP_BUDGET_NS:.0} ns)");
    let body = format!("method,steps,ns_per_step,budget_ns\n{},{done},{ns:.1},{STEP_BUDGET_NS}\n", cfg.sim.method.label());
    write_outputs(out, cfg, &[("bench.csv", body.into_bytes())])
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = load_config(&cli.common)?;
    if cli.common.print_config {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    let out = cli.common.out_dir.as_path();
    let Some(command) = cli.command else {
        return Err(Failure::Usage("no subcommand given; see --help".into()));
    };
    match command {
        Command::Simulate => simulate(&cfg, out),
        Command::Compare { trials } => compare(&mut cfg, trials, cli.common.noise_variance.is_some(), out),
        Command::CheckGains { log } => check_gains(&cfg, log.as_deref(), out),
        Command::DwellTime { log } => dwell_time(&cfg, &log, out),
        Command::Monitor { log } => monitor(&cfg, &log, out),
        Command::Fixture { path, check } => fixture(&cfg, &path, check),
        Command::Bench { steps } => bench(&cfg, steps, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (EXIT_USAGE, m),
                Failure::Diverged(m) => (EXIT_DIVERGED, m),
                Failure::Internal(m) => (EXIT_INTERNAL, m),
            };
            eprintln!("clest: {msg}");
            ExitCode::from(code)
        }
    }
}
