//! Offline analysis of a completed run: empirical bound constants, gain
//! conditions, Lyapunov monitors and the dwell-time bound.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{
    check_gain_conditions, estimate_bound_constants, min_dwell_time, BoundConstants, DwellTimeInputs,
    GainConditionReport,
};
use crate::lyapunov::{beta2, check_interswitch_envelope, check_switch_decrease, DecayRates, ViolationReport};
use crate::plant::TwoLinkPlant;
use crate::sim::{SimConfig, StackStats, TrajectoryLog};

/// Smallest offset handed to the envelope and dwell-time checks.
pub const IOTA_FLOOR: f64 = 1e-300;

/// Bound constants from the config if present, otherwise estimated from the log.
pub fn bounds_for(cfg: &SimConfig, log: Option<&TrajectoryLog>) -> Result<BoundConstants> {
    if let Some(b) = cfg.bounds {
        b.validate()?;
        return Ok(b);
    }
    let log = log.ok_or_else(|| Error::Config("no [bounds] section and no log to estimate them from".into()))?;
    let gains = cfg.estimator_gains()?;
    let plant = TwoLinkPlant::new(cfg.plant.clone());
    estimate_bound_constants(log, &plant, &log.theta_true, cfg.observer.gamma1, &gains.gamma)
}

pub fn gain_report(cfg: &SimConfig, b: &BoundConstants) -> Result<GainConditionReport> {
    check_gain_conditions(b, cfg.estimator.k, cfg.observer.k1, cfg.observer.alpha1)
}

/// `iota_s = beta2 * |Q_s|^2` for every logged stack, in switching order.
pub fn iota_sequence(stacks: &[StackStats], beta2: f64) -> Vec<f64> {
    stacks.iter().map(|s| (beta2 * s.q_norm * s.q_norm).max(IOTA_FLOOR)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunAnalysis {
    pub bounds: BoundConstants,
    pub gains: GainConditionReport,
    pub rates: DecayRates,
    pub beta2: f64,
    pub iotas: Vec<f64>,
    pub switch_decrease: ViolationReport,
    pub envelope: ViolationReport,
}

pub fn analyze(cfg: &SimConfig, log: &TrajectoryLog) -> Result<RunAnalysis> {
    let bounds = bounds_for(cfg, Some(log))?;
    let gains = gain_report(cfg, &bounds)?;
    let gamma = cfg.estimator_gains()?.gamma;
    let rates = DecayRates::new(cfg.estimator.k, cfg.observer.k1, cfg.observer.alpha1, bounds.a_lower, &gamma)?;
    let b2 = beta2(&bounds, cfg.estimator.k, cfg.observer.k1);
    let iotas = iota_sequence(&log.stacks, b2);
    let samples = log.lyapunov_samples();
    let times = log.switch_times();
    let switch_decrease = check_switch_decrease(&samples, &times);
    let envelope = check_interswitch_envelope(&samples, &times, rates.v, rates.v_bar, &iotas)?;
    Ok(RunAnalysis { bounds, gains, rates, beta2: b2, iotas, switch_decrease, envelope })
}

/// Dwell-time inputs measured from a log.
///
/// `V1_bar` and `V_r1_bar` are the peaks of `V` and `V_r` over the first
/// interval; `iota_r1` is `v_r` times the peak of `V_r` over the last interval.
pub fn dwell_time_inputs(analysis: &RunAnalysis, log: &TrajectoryLog) -> Result<DwellTimeInputs> {
    let switches = log.switch_times();
    if switches.len() < 2 {
        return Err(Error::contract(format!(
            "dwell time needs a log with at least 2 switches, found {}",
            switches.len()
        )));
    }
    let (first, last) = (switches[0], switches[switches.len() - 1]);
    let peak = |pred: &dyn Fn(f64) -> bool, f: &dyn Fn(&crate::lyapunov::LyapunovSample) -> f64| {
        log.samples.iter().filter(|s| pred(s.t)).map(|s| f(&s.lyapunov)).fold(0.0, f64::max)
    };
    let v1_bar = peak(&|t| t < first, &|l| l.v);
    let v_r1_bar = peak(&|t| t < first, &|l| l.v_r);
    let vr_tail = peak(&|t| t >= last, &|l| l.v_r);
    Ok(DwellTimeInputs {
        iotas: analysis.iotas.clone(),
        v1_bar: v1_bar.max(IOTA_FLOOR),
        v: analysis.rates.v,
        v_bar: analysis.rates.v_bar,
        v_r: analysis.rates.v_r,
        v_r1_bar: v_r1_bar.max(IOTA_FLOOR),
        iota_r1: (analysis.rates.v_r * vr_tail).max(IOTA_FLOOR),
    })
}

pub fn dwell_time(analysis: &RunAnalysis, log: &TrajectoryLog) -> Result<f64> {
    min_dwell_time(&dwell_time_inputs(analysis, log)?)
}
