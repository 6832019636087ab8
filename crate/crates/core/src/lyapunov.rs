//! Lyapunov functions of the switched error system and offline monitors that
//! check a logged run against the decay claims.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::BoundConstants;
use crate::numerics::{max_eigenvalue_symmetric, min_eigenvalue_symmetric, Matrix, Vector};

/// Relative slack for the switch-instant decrease check.
pub const SWITCH_DECREASE_SLACK: f64 = 0.01;
/// Relative slack for the inter-switch envelope check.
pub const ENVELOPE_SLACK: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovSample {
    pub t: f64,
    /// Switching index active at `t`.
    pub s: usize,
    pub v: f64,
    pub v_r: f64,
    pub norm_theta_tilde: f64,
    pub norm_x_tilde: f64,
    pub norm_r: f64,
    pub norm_x_tilde_dot: f64,
}

pub fn gamma_inverse(gamma: &Matrix) -> Result<Matrix> {
    gamma
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::contract("Gamma must be positive definite"))
}

/// `V = r'r/2 + x~'x~/2 + th~' Gamma^-1 th~ / 2` with a precomputed inverse.
pub fn compute_v_with_inverse(r: &Vector, x_tilde: &Vector, theta_tilde: &Vector, gamma_inv: &Matrix) -> f64 {
    0.5 * (r.norm_squared() + x_tilde.norm_squared() + theta_tilde.dot(&(gamma_inv * theta_tilde)))
}

pub fn compute_v(r: &Vector, x_tilde: &Vector, theta_tilde: &Vector, gamma: &Matrix) -> Result<f64> {
    Ok(compute_v_with_inverse(r, x_tilde, theta_tilde, &gamma_inverse(gamma)?))
}

/// `V_r = |r|^2 + |x~|^2`.
pub fn compute_vr(r: &Vector, x_tilde: &Vector) -> f64 {
    r.norm_squared() + x_tilde.norm_squared()
}

/// Rayleigh-Ritz constants `(v_lower, v_bar)` with `v_lower |Z|^2 <= V <= v_bar |Z|^2`.
pub fn rayleigh_bounds(gamma: &Matrix) -> Result<(f64, f64)> {
    let inv = gamma_inverse(gamma)?;
    let inv = (&inv + inv.transpose()) * 0.5;
    let lo = 0.5 * min_eigenvalue_symmetric(&inv)?.min(1.0);
    let hi = 0.5 * max_eigenvalue_symmetric(&inv)?.max(1.0);
    Ok((lo, hi))
}

/// Decay rates used by the envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayRates {
    /// `min(k a_lower / 4, alpha1 / 3, k1 / 8)`.
    pub v: f64,
    pub v_bar: f64,
    pub v_lower: f64,
    /// `min(k1 / 2, alpha1)`.
    pub v_r: f64,
}

impl DecayRates {
    pub fn new(k: f64, k1: f64, alpha1: f64, a_lower: f64, gamma: &Matrix) -> Result<Self> {
        let (v_lower, v_bar) = rayleigh_bounds(gamma)?;
        Ok(Self {
            v: (k * a_lower / 4.0).min(alpha1 / 3.0).min(k1 / 8.0),
            v_bar,
            v_lower,
            v_r: (0.5 * k1).min(alpha1),
        })
    }
}

/// `beta2 = k / (2 a_lower) + k^2 Y^2 Gamma^2 / k1`, so that `iota_s = beta2 |Q_s|^2`.
pub fn beta2(b: &BoundConstants, k: f64, k1: f64) -> f64 {
    k / (2.0 * b.a_lower) + k * k * b.y_bar * b.y_bar * b.gamma_bar * b.gamma_bar / k1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    SwitchIncrease,
    EnvelopeExceeded,
    DerivativeChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub s: usize,
    /// Reference instant (previous switch, or start of the interval).
    pub t_ref: f64,
    pub t: f64,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ViolationReport {
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,s,t_ref,t,value,bound\n");
        for v in &self.violations {
            let _ = writeln!(s, "{:?},{},{},{},{},{}", v.kind, v.s, v.t_ref, v.t, v.value, v.bound);
        }
        s
    }

    pub fn to_text(&self, title: &str) -> String {
        let mut s = format!("{title}: {} checked, {} violations\n", self.checked, self.violations.len());
        for v in self.violations.iter().take(20) {
            let _ = writeln!(
                s,
                "  {:?} s={} t_ref={:.4} t={:.4} value={:.6e} bound={:.6e}",
                v.kind, v.s, v.t_ref, v.t, v.value, v.bound
            );
        }
        if self.violations.len() > 20 {
            let _ = writeln!(s, "  ... {} more", self.violations.len() - 20);
        }
        s
    }
}

fn nearest(samples: &[LyapunovSample], t: f64) -> Option<&LyapunovSample> {
    let idx = samples.partition_point(|s| s.t < t);
    let after = samples.get(idx);
    let before = idx.checked_sub(1).and_then(|i| samples.get(i));
    match (before, after) {
        (Some(b), Some(a)) => Some(if (a.t - t).abs() <= (t - b.t).abs() { a } else { b }),
        (b, a) => a.or(b),
    }
}

/// Flags consecutive switching instants where V rose by more than the slack.
pub fn check_switch_decrease(samples: &[LyapunovSample], switch_times: &[f64]) -> ViolationReport {
    let mut report = ViolationReport::default();
    for (idx, pair) in switch_times.windows(2).enumerate() {
        let (Some(prev), Some(next)) = (nearest(samples, pair[0]), nearest(samples, pair[1])) else {
            continue;
        };
        report.checked += 1;
        let bound = prev.v * (1.0 + SWITCH_DECREASE_SLACK);
        if next.v > bound {
            report.violations.push(Violation {
                kind: ViolationKind::SwitchIncrease,
                s: idx + 2,
                t_ref: pair[0],
                t: pair[1],
                value: next.v,
                bound,
            });
        }
    }
    report
}

/// Exponential envelope seeded at `(t0, v0)` for one switching interval.
pub fn envelope(v0: f64, t0: f64, t: f64, v: f64, v_bar: f64, iota: f64) -> f64 {
    let floor = v_bar / v * iota;
    (v0 - floor) * (-(v / v_bar) * (t - t0)).exp() + floor
}

/// Checks every sample against the envelope of its switching interval.
///
/// `iota_by_s[s - 1]` is the offset for the interval with switching index `s`;
/// intervals are delimited by `switch_times`.
pub fn check_interswitch_envelope(
    samples: &[LyapunovSample],
    switch_times: &[f64],
    v: f64,
    v_bar: f64,
    iota_by_s: &[f64],
) -> Result<ViolationReport> {
    if !(v > 0.0 && v_bar > 0.0) {
        return Err(Error::contract("envelope check: v and v_bar must be positive"));
    }
    if iota_by_s.len() < switch_times.len() + 1 {
        return Err(Error::contract(format!(
            "envelope check: {} iota values for {} intervals",
            iota_by_s.len(),
            switch_times.len() + 1
        )));
    }
    if iota_by_s.iter().any(|i| !(*i > 0.0)) {
        return Err(Error::contract("envelope check: iota values must be positive"));
    }
    let mut report = ViolationReport::default();
    let mut interval = 0usize;
    let mut seed: Option<(f64, f64)> = None;
    for smp in samples {
        while interval < switch_times.len() && smp.t >= switch_times[interval] {
            interval += 1;
            seed = None;
        }
        let (t0, v0) = *seed.get_or_insert((smp.t, smp.v));
        let bound = envelope(v0, t0, smp.t, v, v_bar, iota_by_s[interval]) * (1.0 + ENVELOPE_SLACK);
        report.checked += 1;
        if smp.v > bound {
            report.violations.push(Violation {
                kind: ViolationKind::EnvelopeExceeded,
                s: interval + 1,
                t_ref: t0,
                t: smp.t,
                value: smp.v,
                bound,
            });
        }
    }
    Ok(report)
}

/// Records samples where `|x~_dot|^2 > (1 + alpha1) V_r`.
///
/// The inequality drops a cross term, so counterexamples are logged, not asserted.
pub fn check_derivative_chain(samples: &[LyapunovSample], alpha1: f64) -> ViolationReport {
    let mut report = ViolationReport::default();
    for smp in samples {
        report.checked += 1;
        let lhs = smp.norm_x_tilde_dot * smp.norm_x_tilde_dot;
        let bound = (1.0 + alpha1) * smp.v_r;
        if lhs > bound * (1.0 + 1e-12) + 1e-300 {
            report.violations.push(Violation {
                kind: ViolationKind::DerivativeChain,
                s: smp.s,
                t_ref: smp.t,
                t: smp.t,
                value: lhs,
                bound,
            });
        }
    }
    report
}
