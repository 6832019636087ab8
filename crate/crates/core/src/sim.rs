//! Closed-loop experiment runner: configuration, measurement noise, the
//! trajectory log and its CSV form, steady-state metrics, and the method
//! comparison sweep.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{q_vector, theta_hat_dot_with, BoundConstants, EstimatorGains};
use crate::history_stack::{initialize_h, sampling_gate, try_insert, DataPoint, PurgeState};
use crate::lyapunov::{compute_v_with_inverse, compute_vr, gamma_inverse, LyapunovSample};
use crate::numerics::{all_finite, min_eigenvalue_symmetric, rk4_step, spectral_norm, Matrix, Vector};
use crate::observer::{
    observer_rates_with_terms, BaselineConfig, NumericalDifferentiator, ObserverGains, ObserverState,
};
use crate::plant::{excitation_controller, ControllerConfig, Plant, TwoLinkParams, TwoLinkPlant};

/// Formats with 17 significant digits, which round-trips every `f64`.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Derivative estimates from the dynamic state-derivative observer.
    Observer,
    /// Derivative estimates from smoothing and polynomial regression.
    Numerical,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Observer => "observer",
            Method::Numerical => "numerical",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Method::Observer => "Developed (observer CL)",
            Method::Numerical => "Numerical differentiation CL",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observer" => Ok(Method::Observer),
            "numerical" => Ok(Method::Numerical),
            other => Err(Error::Config(format!("unknown method `{other}` (expected observer or numerical)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub dt: f64,
    pub duration: f64,
    pub noise_variance: f64,
    pub seed: u64,
    pub method: Method,
    /// Spacing of candidate data points for the history stack.
    pub record_period: f64,
    /// Spacing of rows in the trajectory log.
    pub log_period: f64,
    /// Trailing window for the steady-state RMS metric.
    pub steady_state_window: f64,
    pub x0: Vec<f64>,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            duration: 120.0,
            noise_variance: 0.0,
            seed: 1,
            method: Method::Observer,
            record_period: 0.05,
            log_period: 0.01,
            steady_state_window: 30.0,
            x0: vec![0.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub k: f64,
    /// Diagonal of the adaptation gain.
    pub gamma: Vec<f64>,
    pub theta_hat0: Vec<f64>,
    pub theta_bound: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            k: 20.0,
            gamma: vec![0.01; 4],
            theta_hat0: vec![0.0; 4],
            theta_bound: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PurgeSection {
    pub capacity: usize,
    pub xi: f64,
    pub dwell: f64,
}

impl Default for PurgeSection {
    fn default() -> Self {
        Self {
            capacity: 20,
            xi: 0.9,
            dwell: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub k: Vec<f64>,
    pub window: Vec<usize>,
    pub order: Vec<usize>,
    pub xi: Vec<f64>,
    pub variances: Vec<f64>,
    pub trials: usize,
    /// Worker threads for the sweep; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            k: vec![1.0, 5.0, 20.0],
            window: vec![11, 21, 41],
            order: vec![2, 3],
            xi: vec![0.5, 0.9, 1.0],
            variances: vec![0.005, 0.1],
            trials: 5,
            threads: 0,
        }
    }
}

/// Complete experiment configuration; every section may be omitted in TOML.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub sim: SimSection,
    pub plant: TwoLinkParams,
    pub controller: ControllerConfig,
    pub observer: ObserverGains,
    pub estimator: EstimatorSection,
    pub purge: PurgeSection,
    pub baseline: BaselineConfig,
    pub sweep: SweepSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundConstants>,
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("SimConfig always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(Error::Config(format!("sim.dt must be positive, got {}", s.dt)));
        }
        if !(s.duration > s.dt && s.duration.is_finite()) {
            return Err(Error::Config("sim.duration must exceed sim.dt".into()));
        }
        if !(s.noise_variance >= 0.0 && s.noise_variance.is_finite()) {
            return Err(Error::Config("sim.noise_variance must be nonnegative".into()));
        }
        if !(s.record_period >= s.dt * (1.0 - 1e-9)) {
            return Err(Error::Config("sim.record_period must be at least sim.dt".into()));
        }
        if !(s.log_period >= s.dt * (1.0 - 1e-9)) {
            return Err(Error::Config("sim.log_period must be at least sim.dt".into()));
        }
        if !(s.steady_state_window > 0.0 && s.steady_state_window <= s.duration) {
            return Err(Error::Config("sim.steady_state_window must lie in (0, duration]".into()));
        }
        if s.x0.len() != 4 || !all_finite(&s.x0) {
            return Err(Error::Config("sim.x0 must hold 4 finite values".into()));
        }
        self.plant.validate()?;
        self.controller.validate()?;
        self.observer.validate()?;
        self.baseline.validate()?;
        let e = &self.estimator;
        if e.gamma.len() != 4 || e.theta_hat0.len() != 4 {
            return Err(Error::Config("estimator.gamma and estimator.theta_hat0 must hold 4 values".into()));
        }
        self.estimator_gains()?.validate()?;
        if self.purge.capacity < 1 {
            return Err(Error::Config("purge.capacity must be positive".into()));
        }
        if !(self.purge.xi > 0.0 && self.purge.xi <= 1.0) {
            return Err(Error::Config(format!("purge.xi must lie in (0, 1], got {}", self.purge.xi)));
        }
        if !(self.purge.dwell >= 0.0) {
            return Err(Error::Config("purge.dwell must be nonnegative".into()));
        }
        let sw = &self.sweep;
        if sw.k.is_empty() || sw.xi.is_empty() || sw.window.is_empty() || sw.order.is_empty() {
            return Err(Error::Config("sweep lists must be nonempty".into()));
        }
        if sw.trials < 1 {
            return Err(Error::Config("sweep.trials must be at least 1".into()));
        }
        if sw.variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("sweep.variances must be nonnegative".into()));
        }
        if let Some(b) = &self.bounds {
            b.validate()?;
        }
        Ok(())
    }

    pub fn estimator_gains(&self) -> Result<EstimatorGains> {
        Ok(EstimatorGains {
            k: self.estimator.k,
            gamma: Matrix::from_diagonal(&Vector::from_column_slice(&self.estimator.gamma)),
            theta_bound: self.estimator.theta_bound,
        })
    }
}

/// Adds iid zero-mean Gaussian noise of the given variance to each component.
pub fn add_measurement_noise<R: Rng + ?Sized>(x: &Vector, variance: f64, rng: &mut R) -> Result<Vector> {
    if !(variance >= 0.0) {
        return Err(Error::contract(format!("measurement noise variance must be nonnegative, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(x.clone());
    }
    let sd = variance.sqrt();
    Ok(x.map(|v| v + sd * rng.sample::<f64, _>(StandardNormal)))
}

/// Summary of one active stack, indexed by switching index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StackStats {
    pub s: usize,
    /// Time the stack became active; 0 for the initial stack.
    pub t: f64,
    pub size: usize,
    pub sigma_min: f64,
    pub a_min: f64,
    pub a_norm: f64,
    /// Norm of the ground-truth derivative error vector `Q_s`.
    pub q_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogSample {
    pub t: f64,
    pub x: Vector,
    pub x_meas: Vector,
    pub x_hat: Vector,
    pub x_dot: Vector,
    pub x_hat_dot: Vector,
    pub u: Vector,
    pub theta_hat: Vector,
    /// Measured state error `x_meas - x_hat` as seen by the estimator.
    pub x_tilde: Vector,
    pub s: usize,
    pub sigma_min_h: f64,
    pub a_min_h: f64,
    pub a_norm_h: f64,
    pub lyapunov: LyapunovSample,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub samples: Vec<LogSample>,
    /// `stacks[s - 1]` describes the stack active with switching index `s`.
    pub stacks: Vec<StackStats>,
    pub theta_true: Vector,
}

const SAMPLE_VECTORS: [&str; 9] = ["x", "x_meas", "x_hat", "x_dot", "x_hat_dot", "u", "theta_hat", "x_tilde", ""];
const SAMPLE_SCALARS: [&str; 10] = [
    "s",
    "sigma_min_h",
    "a_min_h",
    "a_norm_h",
    "V",
    "V_r",
    "norm_theta_tilde",
    "norm_x_tilde",
    "norm_r",
    "norm_x_tilde_dot",
];
const STACK_COLUMNS: &str = "s,t,size,sigma_min,a_min,a_norm,q_norm";

impl TrajectoryLog {
    /// Times at which the active stack was replaced.
    pub fn switch_times(&self) -> Vec<f64> {
        self.stacks.iter().skip(1).map(|s| s.t).collect()
    }

    pub fn lyapunov_samples(&self) -> Vec<LyapunovSample> {
        self.samples.iter().map(|s| s.lyapunov).collect()
    }

    pub fn final_relative_error(&self) -> Option<f64> {
        let last = self.samples.last()?;
        Some((&self.theta_true - &last.theta_hat).norm() / self.theta_true.norm())
    }

    fn dims(&self) -> (usize, usize, usize) {
        self.samples
            .first()
            .map_or((0, 0, 0), |s| (s.x.len(), s.u.len(), s.theta_hat.len()))
    }

    fn header(n: usize, m: usize, p: usize) -> String {
        let mut cols = vec!["t".to_string()];
        for name in SAMPLE_VECTORS.iter().filter(|n| !n.is_empty()) {
            let len = match *name {
                "u" => m,
                "theta_hat" => p,
                _ => n,
            };
            cols.extend((1..=len).map(|i| format!("{name}_{i}")));
        }
        cols.extend(SAMPLE_SCALARS.iter().map(|s| s.to_string()));
        cols.join(",")
    }

    /// One row per logged sample, with a header naming every column.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (n, m, p) = self.dims();
        writeln!(w, "{}", Self::header(n, m, p))?;
        let mut row = String::new();
        for s in &self.samples {
            row.clear();
            row.push_str(&fmt_float(s.t));
            for v in [&s.x, &s.x_meas, &s.x_hat, &s.x_dot, &s.x_hat_dot, &s.u, &s.theta_hat, &s.x_tilde] {
                for c in v.iter() {
                    row.push(',');
                    row.push_str(&fmt_float(*c));
                }
            }
            let _ = write!(row, ",{}", s.s);
            let l = &s.lyapunov;
            for c in [
                s.sigma_min_h,
                s.a_min_h,
                s.a_norm_h,
                l.v,
                l.v_r,
                l.norm_theta_tilde,
                l.norm_x_tilde,
                l.norm_r,
                l.norm_x_tilde_dot,
            ] {
                row.push(',');
                row.push_str(&fmt_float(c));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    pub fn write_stacks_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{STACK_COLUMNS}")?;
        for s in &self.stacks {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.s,
                fmt_float(s.t),
                s.size,
                fmt_float(s.sigma_min),
                fmt_float(s.a_min),
                fmt_float(s.a_norm),
                fmt_float(s.q_norm)
            )?;
        }
        Ok(())
    }

    /// Parses the two CSV files written by [`write_csv`](Self::write_csv) and
    /// [`write_stacks_csv`](Self::write_stacks_csv).
    pub fn read_csv<R1: BufRead, R2: BufRead>(samples: R1, stacks: R2, theta_true: Vector) -> Result<Self> {
        let mut lines = samples.lines();
        let header = lines.next().ok_or_else(|| Error::Log("empty trajectory file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let count = |prefix: &str| cols.iter().filter(|c| c.strip_prefix(prefix).is_some_and(|r| r.parse::<usize>().is_ok())).count();
        let (n, m, p) = (count("x_"), count("u_"), count("theta_hat_"));
        if n == 0 || Self::header(n, m, p) != header {
            return Err(Error::Log("unrecognized trajectory header".into()));
        }
        let mut log = TrajectoryLog { theta_true, ..Default::default() };
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Log(format!("row {}: expected {} fields, got {}", lineno + 2, cols.len(), fields.len())));
            }
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .map_err(|_| Error::Log(format!("row {}: bad number `{}` in column {}", lineno + 2, fields[i], cols[i])))
            };
            let mut at = 1;
            let mut take = |len: usize| -> Result<Vector> {
                let v = (at..at + len).map(num).collect::<Result<Vec<_>>>()?;
                at += len;
                Ok(Vector::from_vec(v))
            };
            let x = take(n)?;
            let x_meas = take(n)?;
            let x_hat = take(n)?;
            let x_dot = take(n)?;
            let x_hat_dot = take(n)?;
            let u = take(m)?;
            let theta_hat = take(p)?;
            let x_tilde = take(n)?;
            let sc = take(SAMPLE_SCALARS.len())?;
            let t = num(0)?;
            let s = sc[0] as usize;
            log.samples.push(LogSample {
                t,
                x,
                x_meas,
                x_hat,
                x_dot,
                x_hat_dot,
                u,
                theta_hat,
                x_tilde,
                s,
                sigma_min_h: sc[1],
                a_min_h: sc[2],
                a_norm_h: sc[3],
                lyapunov: LyapunovSample {
                    t,
                    s,
                    v: sc[4],
                    v_r: sc[5],
                    norm_theta_tilde: sc[6],
                    norm_x_tilde: sc[7],
                    norm_r: sc[8],
                    norm_x_tilde_dot: sc[9],
                },
            });
        }
        let mut lines = stacks.lines();
        let header = lines.next().ok_or_else(|| Error::Log("empty stack file".into()))??;
        if header != STACK_COLUMNS {
            return Err(Error::Log("unrecognized stack header".into()));
        }
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Log(format!("bad stack row `{line}`"));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            log.stacks.push(StackStats {
                s: f[0].parse().map_err(|_| bad())?,
                t: num(1)?,
                size: f[2].parse().map_err(|_| bad())?,
                sigma_min: num(3)?,
                a_min: num(4)?,
                a_norm: num(5)?,
                q_norm: num(6)?,
            });
        }
        Ok(log)
    }
}

/// Root-mean-square of `|theta_hat - theta|` over the trailing `window` seconds.
pub fn rms_steady_state_error(log: &TrajectoryLog, window: f64) -> Result<f64> {
    let (Some(first), Some(last)) = (log.samples.first(), log.samples.last()) else {
        return Err(Error::contract("rms_steady_state_error: empty log"));
    };
    if !(window > 0.0) || window > last.t - first.t + 1e-9 {
        return Err(Error::contract(format!(
            "rms_steady_state_error: window {window} exceeds log span {}",
            last.t - first.t
        )));
    }
    let start = last.t - window - 1e-9;
    let (sum, count) = log
        .samples
        .iter()
        .filter(|s| s.t >= start)
        .fold((0.0, 0usize), |(acc, c), s| (acc + (&s.theta_hat - &log.theta_true).norm_squared(), c + 1));
    Ok((sum / count as f64).sqrt())
}

/// Scalar outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub method: Method,
    pub noise_variance: f64,
    pub seed: u64,
    pub final_relative_error: f64,
    pub rms_steady_state: f64,
    pub switches: usize,
    /// Smallest gap between consecutive switches; infinite with fewer than two.
    pub min_switch_gap: f64,
    /// Every activated stack was full when it became active.
    pub stacks_full_at_switch: bool,
}

impl RunMetrics {
    pub fn from_log(cfg: &SimConfig, log: &TrajectoryLog) -> Result<Self> {
        let times = log.switch_times();
        let min_gap = times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        Ok(Self {
            method: cfg.sim.method,
            noise_variance: cfg.sim.noise_variance,
            seed: cfg.sim.seed,
            final_relative_error: log.final_relative_error().unwrap_or(f64::NAN),
            rms_steady_state: rms_steady_state_error(log, cfg.sim.steady_state_window)?,
            switches: times.len(),
            min_switch_gap: min_gap,
            stacks_full_at_switch: log.stacks.iter().skip(1).all(|s| s.size == cfg.purge.capacity),
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "method,noise_variance,seed,final_relative_error,rms_steady_state,switches,min_switch_gap,stacks_full_at_switch\n{},{},{},{},{},{},{},{}\n",
            self.method.label(),
            fmt_float(self.noise_variance),
            self.seed,
            fmt_float(self.final_relative_error),
            fmt_float(self.rms_steady_state),
            self.switches,
            fmt_float(self.min_switch_gap),
            self.stacks_full_at_switch
        )
    }
}

const INIT_SEED_SALT: u64 = 0x5DEE_CE66_D1CE_5EED;

struct MeasuredRates {
    u: Vector,
    y_meas: Matrix,
    x_hat_dot: Vector,
    mu_dot: Vector,
}

/// Stepwise closed-loop simulation; [`run_experiment`] drives it to completion.
pub struct Simulation {
    cfg: SimConfig,
    plant: TwoLinkPlant,
    theta: Vector,
    gains: EstimatorGains,
    gamma_inv: Matrix,
    step: u64,
    steps: u64,
    log_stride: u64,
    x: Vector,
    obs: ObserverState,
    theta_hat: Vector,
    purge: PurgeState,
    rng: ChaCha8Rng,
    diff: Option<NumericalDifferentiator>,
    /// Raw `(t, x_meas, u)` history for the baseline's delayed data points.
    raw_hist: VecDeque<(f64, Vector, Vector)>,
    last_record: f64,
    log: TrajectoryLog,
}

impl Simulation {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let plant = TwoLinkPlant::new(cfg.plant.clone());
        let theta = cfg.plant.theta();
        let gains = cfg.estimator_gains()?;
        let gamma_inv = gamma_inverse(&gains.gamma)?;
        let theta_hat = Vector::from_column_slice(&cfg.estimator.theta_hat0);
        let h = initialize_h(&plant, &theta_hat, cfg.purge.capacity, cfg.sim.seed ^ INIT_SEED_SALT)?;
        let purge = PurgeState::new(h, cfg.purge.xi, cfg.purge.dwell)?;
        let x = Vector::from_column_slice(&cfg.sim.x0);
        let diff = match cfg.sim.method {
            Method::Observer => None,
            Method::Numerical => Some(NumericalDifferentiator::new(cfg.baseline)?),
        };
        let steps = (cfg.sim.duration / cfg.sim.dt).round() as u64;
        let log_stride = ((cfg.sim.log_period / cfg.sim.dt).round() as u64).max(1);
        let mut sim = Self {
            cfg: cfg.clone(),
            obs: ObserverState::from_measurement(&x),
            plant,
            theta: theta.clone(),
            gains,
            gamma_inv,
            step: 0,
            steps,
            log_stride,
            x,
            theta_hat,
            purge,
            rng: ChaCha8Rng::seed_from_u64(cfg.sim.seed),
            diff,
            raw_hist: VecDeque::with_capacity(cfg.baseline.window + cfg.baseline.smoothing),
            last_record: 0.0,
            log: TrajectoryLog {
                samples: Vec::with_capacity((steps / log_stride + 1) as usize),
                stacks: Vec::new(),
                theta_true: theta,
            },
        };
        let stats = sim.stack_stats(0.0)?;
        sim.log.stacks.push(stats);
        Ok(sim)
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.sim.dt
    }

    pub fn is_done(&self) -> bool {
        self.step > self.steps
    }

    pub fn theta_hat(&self) -> &Vector {
        &self.theta_hat
    }

    pub fn purge_state(&self) -> &PurgeState {
        &self.purge
    }

    pub fn log(&self) -> &TrajectoryLog {
        &self.log
    }

    fn stack_stats(&self, t: f64) -> Result<StackStats> {
        let h = &self.purge.h;
        Ok(StackStats {
            s: self.purge.switch_index,
            t,
            size: h.len(),
            sigma_min: h.sigma_min(),
            a_min: min_eigenvalue_symmetric(h.gram())?,
            a_norm: spectral_norm(h.gram())?,
            q_norm: q_vector(h, &self.plant, &self.theta)?.norm(),
        })
    }

    fn controller(&self, t: f64, x: &Vector) -> Result<Vector> {
        excitation_controller(t, x, &self.cfg.controller, &self.plant, self.theta.as_slice())
    }

    /// Controller and observer rates at one state; none of these depend on the stacks.
    fn measured_rates(&self, t: f64, x: &Vector, x_meas: &Vector, obs: &ObserverState, theta_hat: &Vector) -> Result<MeasuredRates> {
        let u = self.controller(t, x)?;
        let terms = self.plant.terms(x_meas)?;
        let (x_hat_dot, mu_dot) = observer_rates_with_terms(obs, x_meas, &u, theta_hat, &self.cfg.observer, &terms)?;
        Ok(MeasuredRates { u, y_meas: terms.y, x_hat_dot, mu_dot })
    }

    /// Stacks `[x_dot, x_hat_dot, mu_dot, theta_hat_dot]`.
    fn assemble(&self, x: &Vector, x_meas: &Vector, obs: &ObserverState, theta_hat: &Vector, m: &MeasuredRates) -> Result<Vector> {
        let n = x.len();
        let p = theta_hat.len();
        let x_dot = self.plant.terms(x)?.derivative(&m.u, &self.theta);
        let x_tilde = x_meas - &obs.x_hat;
        let th_dot = theta_hat_dot_with(theta_hat, &x_tilde, &m.y_meas, &self.purge.h, &self.gains)?;
        let mut out = Vector::zeros(3 * n + p);
        out.rows_mut(0, n).copy_from(&x_dot);
        out.rows_mut(n, n).copy_from(&m.x_hat_dot);
        out.rows_mut(2 * n, n).copy_from(&m.mu_dot);
        out.rows_mut(3 * n, p).copy_from(&th_dot);
        Ok(out)
    }

    /// Joint right-hand side of plant, observer and estimator for `z = [x, x_hat, mu, theta_hat]`.
    fn rhs(&self, t: f64, z: &Vector, noise: &Vector) -> Result<Vector> {
        let n = 4;
        let x = z.rows(0, n).into_owned();
        let obs = ObserverState {
            x_hat: z.rows(n, n).into_owned(),
            mu: z.rows(2 * n, n).into_owned(),
        };
        let theta_hat = z.rows(3 * n, self.theta.len()).into_owned();
        let x_meas = &x + noise;
        let m = self.measured_rates(t, &x, &x_meas, &obs, &theta_hat)?;
        self.assemble(&x, &x_meas, &obs, &theta_hat, &m)
    }

    fn diverged(&self, t: f64, reason: String) -> Error {
        Error::Diverged {
            t,
            reason,
            log: Box::new(self.log.clone()),
        }
    }

    /// Processes the sample at the current time, then advances one step.
    ///
    /// Returns `Ok(false)` once the final sample has been processed.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        let t = self.time();
        let noise = add_measurement_noise(&Vector::zeros(4), self.cfg.sim.noise_variance, &mut self.rng)?;
        let x_meas = &self.x + &noise;
        let rates = self
            .measured_rates(t, &self.x, &x_meas, &self.obs, &self.theta_hat)
            .map_err(|e| self.map_numeric(t, e))?;
        self.bookkeep(t, &x_meas, &rates).map_err(|e| self.map_numeric(t, e))?;
        if self.step < self.steps {
            let z = self.pack();
            // The first stage is evaluated after bookkeeping so it sees a purge made at t.
            let mut first = Some(
                self.assemble(&self.x, &x_meas, &self.obs, &self.theta_hat, &rates)
                    .map_err(|e| self.map_numeric(t, e))?,
            );
            let next = rk4_step(
                |tau, z| match first.take() {
                    Some(k1) => Ok(k1),
                    None => self.rhs(tau, z, &noise),
                },
                t,
                &z,
                self.cfg.sim.dt,
            )
            .map_err(|e| self.map_numeric(t, e))?;
            self.unpack(&next);
            let t_next = t + self.cfg.sim.dt;
            if !all_finite(next.as_slice()) {
                return Err(self.diverged(t_next, "non-finite state".into()));
            }
            let limit = 10.0 * self.gains.theta_bound;
            if self.theta_hat.norm() > limit {
                return Err(self.diverged(t_next, format!("|theta_hat| = {} exceeds {limit}", self.theta_hat.norm())));
            }
        }
        self.step += 1;
        Ok(!self.is_done())
    }

    fn map_numeric(&self, t: f64, e: Error) -> Error {
        match e {
            Error::Integration { .. } | Error::Singular { .. } | Error::Domain(_) => self.diverged(t, e.to_string()),
            other => other,
        }
    }

    fn pack(&self) -> Vector {
        let mut z = Vector::zeros(16);
        z.rows_mut(0, 4).copy_from(&self.x);
        z.rows_mut(4, 4).copy_from(&self.obs.x_hat);
        z.rows_mut(8, 4).copy_from(&self.obs.mu);
        z.rows_mut(12, 4).copy_from(&self.theta_hat);
        z
    }

    fn unpack(&mut self, z: &Vector) {
        self.x.copy_from(&z.rows(0, 4));
        self.obs.x_hat.copy_from(&z.rows(4, 4));
        self.obs.mu.copy_from(&z.rows(8, 4));
        self.theta_hat.copy_from(&z.rows(12, 4));
    }

    fn bookkeep(&mut self, t: f64, x_meas: &Vector, rates: &MeasuredRates) -> Result<()> {
        let (u, x_hat_dot) = (&rates.u, &rates.x_hat_dot);

        if let Some(diff) = self.diff.as_mut() {
            diff.push(t, &x_meas)?;
            if self.raw_hist.len() == self.cfg.baseline.window + self.cfg.baseline.smoothing {
                self.raw_hist.pop_front();
            }
            self.raw_hist.push_back((t, x_meas.clone(), u.clone()));
        }

        if self.step > 0 && sampling_gate(self.last_record, t, self.cfg.sim.record_period) {
            self.last_record = t;
            let point = match &self.diff {
                None => Some(DataPoint { x_hat_dot: x_hat_dot.clone(), x: x_meas.clone(), u: u.clone(), t }),
                Some(diff) => diff.estimate_midpoint()?.map(|est| {
                    let (x, u) = interpolate(&self.raw_hist, est.t);
                    DataPoint { x_hat_dot: est.x_dot, x, u, t: est.t }
                }),
            };
            if let Some(p) = point {
                try_insert(&mut self.purge.g, p, &self.plant)?;
                if self.purge.maybe_purge(t) {
                    let stats = self.stack_stats(t)?;
                    self.log.stacks.push(stats);
                }
            }
        }

        if self.step % self.log_stride == 0 {
            let x_dot = self.plant.terms(&self.x)?.derivative(&u, &self.theta);
            let x_tilde_true = &self.x - &self.obs.x_hat;
            let x_tilde_dot = &x_dot - x_hat_dot;
            let r = &x_tilde_dot + &x_tilde_true * self.cfg.observer.alpha1;
            let theta_tilde = &self.theta - &self.theta_hat;
            let stats = self.log.stacks.last().copied().expect("initial stack recorded");
            let lyapunov = LyapunovSample {
                t,
                s: self.purge.switch_index,
                v: compute_v_with_inverse(&r, &x_tilde_true, &theta_tilde, &self.gamma_inv),
                v_r: compute_vr(&r, &x_tilde_true),
                norm_theta_tilde: theta_tilde.norm(),
                norm_x_tilde: x_tilde_true.norm(),
                norm_r: r.norm(),
                norm_x_tilde_dot: x_tilde_dot.norm(),
            };
            self.log.samples.push(LogSample {
                t,
                x_tilde: x_meas - &self.obs.x_hat,
                x: self.x.clone(),
                x_meas: x_meas.clone(),
                x_hat: self.obs.x_hat.clone(),
                x_dot,
                x_hat_dot: x_hat_dot.clone(),
                u: u.clone(),
                theta_hat: self.theta_hat.clone(),
                s: self.purge.switch_index,
                sigma_min_h: stats.sigma_min,
                a_min_h: stats.a_min,
                a_norm_h: stats.a_norm,
                lyapunov,
            });
        }
        Ok(())
    }

    pub fn finish(self) -> TrajectoryLog {
        self.log
    }
}

/// Measurement and input at `t` by linear interpolation in a time-sorted
/// history, clamped at the ends. Exact when `t` is a sample time.
fn interpolate(hist: &VecDeque<(f64, Vector, Vector)>, t: f64) -> (Vector, Vector) {
    let idx = hist.partition_point(|(ti, _, _)| *ti < t - 1e-12);
    if idx == hist.len() {
        let (_, x, u) = &hist[idx - 1];
        return (x.clone(), u.clone());
    }
    let (t1, x1, u1) = &hist[idx];
    if idx == 0 || (t1 - t).abs() <= 1e-12 {
        return (x1.clone(), u1.clone());
    }
    let (t0, x0, u0) = &hist[idx - 1];
    let w = (t - t0) / (t1 - t0);
    (x0 * (1.0 - w) + x1 * w, u0 * (1.0 - w) + u1 * w)
}

/// Runs one closed-loop experiment to completion.
///
/// The controller sees the true state; the observer, the estimator and the
/// history stack see noisy measurements.
pub fn run_experiment(cfg: &SimConfig) -> Result<TrajectoryLog> {
    let mut sim = Simulation::new(cfg)?;
    while sim.step()? {}
    Ok(sim.finish())
}

/// Runs an experiment and reduces it to metrics.
pub fn run_metrics(cfg: &SimConfig) -> Result<RunMetrics> {
    RunMetrics::from_log(cfg, &run_experiment(cfg)?)
}

/// One point of the comparison sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub k: f64,
    pub xi: f64,
    pub window: Option<usize>,
    pub order: Option<usize>,
}

impl SweepPoint {
    fn apply(&self, cfg: &mut SimConfig) {
        cfg.estimator.k = self.k;
        cfg.purge.xi = self.xi;
        if let (Some(w), Some(d)) = (self.window, self.order) {
            cfg.baseline.window = w;
            cfg.baseline.order = d;
        }
    }

    fn describe(&self) -> String {
        match (self.window, self.order) {
            (Some(w), Some(d)) => format!("k={} xi={} W={w} d={d}", self.k, self.xi),
            _ => format!("k={} xi={}", self.k, self.xi),
        }
    }
}

fn sweep_points(cfg: &SimConfig, method: Method) -> Vec<SweepPoint> {
    let sw = &cfg.sweep;
    let mut out = Vec::new();
    for &k in &sw.k {
        for &xi in &sw.xi {
            match method {
                Method::Observer => out.push(SweepPoint { k, xi, window: None, order: None }),
                Method::Numerical => {
                    for &w in &sw.window {
                        for &d in &sw.order {
                            out.push(SweepPoint { k, xi, window: Some(w), order: Some(d) });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Best sweep point of one method at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonCell {
    pub method: Method,
    pub variance: f64,
    /// Lowest mean steady-state RMS over the sweep; `None` if every point failed.
    pub best_rms: Option<f64>,
    pub best_point: Option<SweepPoint>,
    pub points: usize,
    pub failed_runs: usize,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub variances: Vec<f64>,
    pub trials: usize,
    pub cells: Vec<ComparisonCell>,
}

impl ComparisonTable {
    pub fn cell(&self, method: Method, variance: f64) -> Option<&ComparisonCell> {
        self.cells.iter().find(|c| c.method == method && c.variance == variance)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,variance,best_rms,k,xi,window,order,points,failed_runs\n");
        for c in &self.cells {
            let p = c.best_point;
            let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.method.label(),
                fmt_float(c.variance),
                c.best_rms.map_or("NaN".to_string(), fmt_float),
                p.map_or(String::new(), |p| p.k.to_string()),
                p.map_or(String::new(), |p| p.xi.to_string()),
                opt(p.and_then(|p| p.window)),
                opt(p.and_then(|p| p.order)),
                c.points,
                c.failed_runs
            );
        }
        s
    }

    /// Aligned text with one row per method and one column per variance.
    pub fn to_text(&self) -> String {
        let mut s = format!("Steady-state RMS parameter error (best of sweep, mean of {} trials)\n", self.trials);
        let _ = write!(s, "{:<32}", "Method");
        for v in &self.variances {
            let _ = write!(s, "{:>16}", format!("var {v}"));
        }
        s.push('\n');
        for method in [Method::Numerical, Method::Observer] {
            let _ = write!(s, "{:<32}", method.title());
            for &v in &self.variances {
                let text = self
                    .cell(method, v)
                    .and_then(|c| c.best_rms)
                    .map_or("failed".to_string(), |r| format!("{r:.4}"));
                let _ = write!(s, "{text:>16}");
            }
            s.push('\n');
        }
        for c in &self.cells {
            if let Some(p) = c.best_point {
                let _ = writeln!(s, "  {} @ var {}: {}", c.method.label(), c.variance, p.describe());
            }
        }
        s
    }
}

struct Job {
    method: Method,
    variance: f64,
    point: usize,
    trial: usize,
}

fn run_job(cfg: &SimConfig, points: &[SweepPoint], job: &Job) -> Result<f64> {
    let mut c = cfg.clone();
    c.sim.method = job.method;
    c.sim.noise_variance = job.variance;
    c.sim.seed = cfg.sim.seed.wrapping_add(job.trial as u64);
    points[job.point].apply(&mut c);
    c.validate()?;
    Ok(run_metrics(&c)?.rms_steady_state)
}

#[cfg(feature = "parallel")]
fn run_jobs(cfg: &SimConfig, points: &[Vec<SweepPoint>; 2], jobs: &[Job]) -> Result<Vec<Result<f64>>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|j| run_job(cfg, &points[j.method as usize], j))
            .collect()
    }))
}

#[cfg(not(feature = "parallel"))]
fn run_jobs(cfg: &SimConfig, points: &[Vec<SweepPoint>; 2], jobs: &[Job]) -> Result<Vec<Result<f64>>> {
    Ok(jobs.iter().map(|j| run_job(cfg, &points[j.method as usize], j)).collect())
}

/// Sweeps gains, thresholds and baseline windows for both methods at each
/// variance and keeps the sweep point with the lowest mean RMS over `trials` seeds.
///
/// Trial `i` uses seed `cfg.sim.seed + i`. Failed runs disqualify their sweep
/// point and are recorded in the cell.
pub fn compare_methods(cfg: &SimConfig, variances: &[f64], trials: usize) -> Result<ComparisonTable> {
    if trials < 1 {
        return Err(Error::contract("compare_methods: trials must be at least 1"));
    }
    cfg.validate()?;
    let points = [sweep_points(cfg, Method::Observer), sweep_points(cfg, Method::Numerical)];
    let mut jobs = Vec::new();
    for &variance in variances {
        for method in [Method::Numerical, Method::Observer] {
            for point in 0..points[method as usize].len() {
                for trial in 0..trials {
                    jobs.push(Job { method, variance, point, trial });
                }
            }
        }
    }
    let results = run_jobs(cfg, &points, &jobs)?;

    let mut cells = Vec::new();
    let mut it = jobs.iter().zip(results);
    for &variance in variances {
        for method in [Method::Numerical, Method::Observer] {
            let pts = &points[method as usize];
            let mut cell = ComparisonCell {
                method,
                variance,
                best_rms: None,
                best_point: None,
                points: pts.len(),
                failed_runs: 0,
                errors: Vec::new(),
            };
            for point in pts {
                let mut sum = 0.0;
                let mut ok = true;
                for _ in 0..trials {
                    let (job, res) = it.next().expect("one result per job");
                    match res {
                        Ok(rms) => sum += rms,
                        Err(e) => {
                            ok = false;
                            cell.failed_runs += 1;
                            cell.errors.push(format!("{} seed+{}: {e}", point.describe(), job.trial));
                        }
                    }
                }
                let mean = sum / trials as f64;
                if ok && cell.best_rms.is_none_or(|b| mean < b) {
                    cell.best_rms = Some(mean);
                    cell.best_point = Some(*point);
                }
            }
            cells.push(cell);
        }
    }
    Ok(ComparisonTable { variances: variances.to_vec(), trials, cells })
}
