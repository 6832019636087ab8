//! Browser bindings: run a short experiment, evaluate the gain conditions and
//! compute a dwell-time bound. Inputs and outputs are JSON or TOML strings.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use cl_estimator::estimator::{check_gain_conditions, min_dwell_time, BoundConstants, DwellTimeInputs};
use cl_estimator::sim::RunMetrics;
use cl_estimator::{run_experiment, Error, SimConfig};

/// Longest run the page will start.
pub const MAX_DURATION: f64 = 120.0;
/// Points per trace sent back to the page.
pub const TRACE_POINTS: usize = 600;

#[derive(Debug, Serialize)]
pub struct Traces {
    pub t: Vec<f64>,
    pub theta_hat: Vec<Vec<f64>>,
    pub theta_true: Vec<f64>,
    pub relative_error: Vec<f64>,
    pub sigma_min: Vec<f64>,
    pub switch_times: Vec<f64>,
    pub final_relative_error: f64,
    pub rms_steady_state: f64,
    pub diverged_at: Option<f64>,
}

pub fn default_config_toml() -> String {
    let mut c = SimConfig::default();
    c.sim.duration = 60.0;
    c.sim.steady_state_window = 15.0;
    c.to_toml_string()
}

pub fn simulate_json(config_toml: &str) -> Result<String, String> {
    let cfg = SimConfig::from_toml_str(config_toml).map_err(|e| e.to_string())?;
    if cfg.sim.duration > MAX_DURATION {
        return Err(format!("duration is capped at {MAX_DURATION} s in the browser"));
    }
    let (log, diverged_at) = match run_experiment(&cfg) {
        Ok(log) => (log, None),
        Err(Error::Diverged { t, log, .. }) => (*log, Some(t)),
        Err(e) => return Err(e.to_string()),
    };
    let stride = log.samples.len().div_ceil(TRACE_POINTS).max(1);
    let norm = log.theta_true.norm();
    let picked: Vec<_> = log.samples.iter().step_by(stride).collect();
    let (final_relative_error, rms_steady_state) = match diverged_at {
        None => {
            let m = RunMetrics::from_log(&cfg, &log).map_err(|e| e.to_string())?;
            (m.final_relative_error, m.rms_steady_state)
        }
        Some(_) => (f64::NAN, f64::NAN),
    };
    let traces = Traces {
        t: picked.iter().map(|s| s.t).collect(),
        theta_hat: picked.iter().map(|s| s.theta_hat.as_slice().to_vec()).collect(),
        theta_true: log.theta_true.as_slice().to_vec(),
        relative_error: picked.iter().map(|s| s.lyapunov.norm_theta_tilde / norm).collect(),
        sigma_min: picked.iter().map(|s| s.sigma_min_h).collect(),
        switch_times: log.switch_times(),
        final_relative_error,
        rms_steady_state,
        diverged_at,
    };
    serde_json::to_string(&traces).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainQuery {
    pub bounds: BoundConstants,
    pub k: f64,
    pub k1: f64,
    pub alpha1: f64,
}

pub fn check_gains_json(query: &str) -> Result<String, String> {
    let q: GainQuery = serde_json::from_str(query).map_err(|e| e.to_string())?;
    q.bounds.validate().map_err(|e| e.to_string())?;
    let report = check_gain_conditions(&q.bounds, q.k, q.k1, q.alpha1).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

pub fn dwell_time_json(inputs: &str) -> Result<f64, String> {
    let inp: DwellTimeInputs = serde_json::from_str(inputs).map_err(|e| e.to_string())?;
    min_dwell_time(&inp).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn default_config() -> String {
    default_config_toml()
}

#[wasm_bindgen]
pub fn simulate(config_toml: &str) -> Result<String, JsValue> {
    simulate_json(config_toml).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn check_gains(query: &str) -> Result<String, JsValue> {
    check_gains_json(query).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn dwell_time(inputs: &str) -> Result<f64, JsValue> {
    dwell_time_json(inputs).map_err(|e| JsValue::from_str(&e))
}
