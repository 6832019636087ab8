//! Run manifests and golden-run regression fixtures.
//!
//! A fixture stores the manifest of a reference run, the head and tail of its
//! trajectory CSV, and its scalar metrics. Regression checks compare metrics
//! only, so small floating-point differences across machines do not matter.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim::{run_experiment, RunMetrics, SimConfig};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Rows kept from each end of the trajectory CSV.
pub const FIXTURE_ROWS: usize = 100;
/// Relative tolerance on fixture metrics.
pub const METRIC_RTOL: f64 = 1e-9;
/// Per-step budget for the full loop (plant, observer, insert trial, update law)
/// in an optimized build: twice the cost measured when it was set.
pub const STEP_BUDGET_NS: f64 = 12_000.0;

/// Fully resolved config plus the artifacts it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub config: SimConfig,
}

impl RunManifest {
    pub fn new(config: &SimConfig, outputs: Vec<String>) -> Self {
        Self {
            version: ARTIFACT_VERSION.to_string(),
            seed: config.sim.seed,
            outputs,
            config: config.clone(),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest always serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let m: RunManifest = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        m.config.validate()?;
        Ok(m)
    }
}

/// SHA-256 of the resolved config with the seed zeroed.
///
/// Seeds are excluded so a fixture is only stale when the experiment itself changes.
pub fn config_hash(cfg: &SimConfig) -> String {
    let mut c = cfg.clone();
    c.sim.seed = 0;
    hex(&Sha256::digest(c.to_toml_string().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn metric_map(m: &RunMetrics) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("final_relative_error".to_string(), m.final_relative_error),
        ("rms_steady_state".to_string(), m.rms_steady_state),
        ("switches".to_string(), m.switches as f64),
        ("min_switch_gap".to_string(), m.min_switch_gap),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenFixture {
    pub config_hash: String,
    /// SHA-256 of the metrics CSV of the reference run.
    pub metrics_sha256: String,
    pub metrics: BTreeMap<String, f64>,
    pub head: Vec<String>,
    pub tail: Vec<String>,
    pub manifest: RunManifest,
}

impl GoldenFixture {
    /// Runs `cfg` and captures the result.
    pub fn record(cfg: &SimConfig) -> Result<Self> {
        let log = run_experiment(cfg)?;
        let metrics = RunMetrics::from_log(cfg, &log)?;
        let mut csv = Vec::new();
        log.write_csv(&mut csv)?;
        let text = String::from_utf8(csv).expect("CSV is ASCII");
        let rows: Vec<&str> = text.lines().skip(1).collect();
        let head = rows.iter().take(FIXTURE_ROWS).map(|r| r.to_string()).collect();
        let tail = rows[rows.len().saturating_sub(FIXTURE_ROWS)..].iter().map(|r| r.to_string()).collect();
        Ok(Self {
            config_hash: config_hash(cfg),
            metrics_sha256: hex(&Sha256::digest(metrics.to_csv().as_bytes())),
            metrics: metric_map(&metrics),
            head,
            tail,
            manifest: RunManifest::new(cfg, vec!["trajectory.csv".into(), "metrics.csv".into()]),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let text = format!(
            "# golden fixture; regenerate with `clest fixture` when the experiment changes\n# config_hash = {}\n{body}",
            self.config_hash
        );
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionOutcome {
    /// `(metric, expected, found)` for every metric outside tolerance.
    pub mismatches: Vec<(String, f64, f64)>,
}

impl RegressionOutcome {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= METRIC_RTOL * a.abs().max(b.abs())
}

/// Reruns `cfg` and compares its metrics with the fixture.
///
/// A config whose hash differs from the fixture's is a stale-fixture error,
/// not a failed comparison.
pub fn regression_check(fixture: &GoldenFixture, cfg: &SimConfig) -> Result<RegressionOutcome> {
    let found = config_hash(cfg);
    if found != fixture.config_hash {
        return Err(Error::StaleFixture {
            expected: fixture.config_hash.clone(),
            found,
        });
    }
    let log = run_experiment(cfg)?;
    let fresh = metric_map(&RunMetrics::from_log(cfg, &log)?);
    let mut mismatches = Vec::new();
    for (name, &expected) in &fixture.metrics {
        let got = fresh.get(name).copied().unwrap_or(f64::NAN);
        if !close(expected, got) {
            mismatches.push((name.clone(), expected, got));
        }
    }
    Ok(RegressionOutcome { mismatches })
}
