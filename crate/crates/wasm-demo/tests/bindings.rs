use cl_estimator_wasm::{check_gains_json, default_config_toml, dwell_time_json, simulate_json, TRACE_POINTS};

fn short_config() -> String {
    default_config_toml()
        .replace("duration = 60.0", "duration = 6.0")
        .replace("steady_state_window = 15.0", "steady_state_window = 1.0")
}

#[test]
fn default_config_round_trips() {
    let cfg = cl_estimator::SimConfig::from_toml_str(&default_config_toml()).unwrap();
    assert_eq!(cfg.sim.duration, 60.0);
}

#[test]
fn simulate_returns_bounded_traces() {
    let v: serde_json::Value = serde_json::from_str(&simulate_json(&short_config()).unwrap()).unwrap();
    let t = v["t"].as_array().unwrap();
    assert!(!t.is_empty() && t.len() <= TRACE_POINTS);
    assert_eq!(v["theta_hat"].as_array().unwrap().len(), t.len());
    assert_eq!(v["theta_true"].as_array().unwrap().len(), 4);
    assert!(v["diverged_at"].is_null());
}

#[test]
fn simulate_reports_config_errors() {
    let err = simulate_json("[sim]\nnope = 1\n").unwrap_err();
    assert!(err.contains("nope"));
    let err = simulate_json("[sim]\nduration = 500.0\n").unwrap_err();
    assert!(err.contains("capped"));
}

#[test]
fn gain_check_matches_hand_arithmetic() {
    let q = r#"{"bounds":{"f_bar":1,"f1_bar":1,"x_bar":1,"y_bar":1,"gamma_bar":1,"a_bar":1,"a_lower":1},"k":1,"k1":100,"alpha1":100}"#;
    let v: serde_json::Value = serde_json::from_str(&check_gains_json(q).unwrap()).unwrap();
    assert!((v["cond1_rhs"].as_f64().unwrap() - 0.11).abs() < 1e-12);
    assert!((v["cond2_rhs"].as_f64().unwrap() - 0.06).abs() < 1e-12);
    assert_eq!(v["cond1_pass"], true);
    assert_eq!(v["cond2_pass"], true);
}

#[test]
fn gain_check_rejects_bad_input() {
    assert!(check_gains_json("{}").is_err());
    let q = r#"{"bounds":{"f_bar":1,"f1_bar":1,"x_bar":1,"y_bar":1,"gamma_bar":1,"a_bar":1,"a_lower":1},"k":0,"k1":1,"alpha1":1}"#;
    assert!(check_gains_json(q).is_err());
}

#[test]
fn dwell_time_equal_iotas_and_too_few() {
    let inp = r#"{"iotas":[1,1,1],"v1_bar":0.5,"v":1,"v_bar":1,"v_r":1,"v_r1_bar":0.5,"iota_r1":1}"#;
    assert_eq!(dwell_time_json(inp).unwrap(), 0.0);
    let one = r#"{"iotas":[1],"v1_bar":1,"v":1,"v_bar":1,"v_r":1,"v_r1_bar":1,"iota_r1":1}"#;
    assert!(dwell_time_json(one).is_err());
}
