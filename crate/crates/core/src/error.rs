use thiserror::Error;

use crate::sim::TrajectoryLog;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration failed at t = {t}: non-finite value in RK4 stage {stage}")]
    Integration { t: f64, stage: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is numerically singular (condition number {condition:e})")]
    Singular { condition: f64 },

    #[error("polynomial fit failed: {0}")]
    Fit(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("history stack initialization failed: no full-rank stack after {rounds} rounds")]
    Initialization { rounds: usize },

    /// The run was aborted; the log holds everything recorded up to `t`.
    #[error("run diverged at t = {t}: {reason}")]
    Diverged {
        t: f64,
        reason: String,
        log: Box<TrajectoryLog>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stale fixture: config hash {expected} does not match fresh run {found}")]
    StaleFixture { expected: String, found: String },

    #[error("malformed log: {0}")]
    Log(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
