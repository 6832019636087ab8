//! Concurrent-learning parameter estimation with a dynamic state-derivative
//! observer, a purged history stack with dwell time, and the simulation and
//! analysis tooling around it.

pub mod analysis;
pub mod error;
pub mod estimator;
pub mod golden;
pub mod history_stack;
pub mod lyapunov;
pub mod numerics;
pub mod observer;
pub mod plant;
pub mod sim;

pub use error::{Error, Result};
pub use numerics::{Matrix, Vector};
pub use plant::{Plant, TwoLinkParams, TwoLinkPlant};
pub use sim::{compare_methods, run_experiment, Method, SimConfig, TrajectoryLog};
