//! Concurrent-learning update law and the offline calculators built around it:
//! sufficient gain conditions, bound constants from a logged run, and the
//! minimum dwell time under finite excitation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history_stack::HistoryStack;
use crate::numerics::{is_symmetric, min_eigenvalue_symmetric, spectral_norm, Matrix, Vector};
use crate::plant::Plant;
use crate::sim::TrajectoryLog;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorGains {
    pub k: f64,
    pub gamma: Matrix,
    /// Known bound on the parameter norm; only monitored.
    pub theta_bound: f64,
}

impl EstimatorGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0) {
            return Err(Error::Config(format!("estimator.k must be nonnegative, got {}", self.k)));
        }
        if !is_symmetric(&self.gamma) || !(min_eigenvalue_symmetric(&self.gamma)? > 0.0) {
            return Err(Error::Config("estimator.gamma must be symmetric positive definite".into()));
        }
        if !(self.theta_bound > 0.0) {
            return Err(Error::Config("estimator.theta_bound must be positive".into()));
        }
        Ok(())
    }
}

/// `A_s = sum_j Y^T(x_j) Y(x_j)` of a nonempty stack.
pub fn compute_a(h: &HistoryStack) -> Result<Matrix> {
    if h.is_empty() {
        return Err(Error::contract("compute_A: empty history stack"));
    }
    Ok(h.gram().clone())
}

/// `sum_j Y^T(x_j) (x_hat_dot_j - f1(x_j) - g(x_j) u_j - Y(x_j) theta_hat)`.
pub fn cl_residual_sum(h: &HistoryStack, theta_hat: &Vector) -> Result<Vector> {
    if theta_hat.len() != h.param_dim() {
        return Err(Error::contract("cl_residual_sum: theta_hat dimension mismatch"));
    }
    Ok(h.target() - h.gram() * theta_hat)
}

/// `Q_s = sum_j Y^T(x_j) (x_dot_j - x_hat_dot_j)` with the true derivative
/// evaluated at each recorded state and input.
pub fn q_vector(h: &HistoryStack, plant: &dyn Plant, theta: &Vector) -> Result<Vector> {
    let mut q = Vector::zeros(h.param_dim());
    for (e, y) in h.entries().iter().zip(h.regressors()) {
        let x_dot = crate::plant::true_derivative(plant, &e.x, &e.u, theta)?;
        q += y.tr_mul(&(x_dot - &e.x_hat_dot));
    }
    Ok(q)
}

/// Update law with the regressor already evaluated at the measurement.
pub fn theta_hat_dot_with(
    theta_hat: &Vector,
    x_tilde: &Vector,
    y_meas: &Matrix,
    h: &HistoryStack,
    gains: &EstimatorGains,
) -> Result<Vector> {
    if y_meas.nrows() != x_tilde.len() || y_meas.ncols() != theta_hat.len() {
        return Err(Error::contract("theta_hat_dot: regressor shape mismatch"));
    }
    let cl = cl_residual_sum(h, theta_hat)? * gains.k + y_meas.tr_mul(x_tilde);
    Ok(&gains.gamma * cl)
}

/// `k Gamma sum_j Y_j^T(...) + Gamma Y^T(x) x_tilde`.
pub fn theta_hat_dot(
    theta_hat: &Vector,
    x_tilde: &Vector,
    x_meas: &Vector,
    h: &HistoryStack,
    gains: &EstimatorGains,
    plant: &dyn Plant,
) -> Result<Vector> {
    theta_hat_dot_with(theta_hat, x_tilde, &plant.regressor(x_meas)?, h, gains)
}

/// Suprema along a trajectory that enter the sufficient gain conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    pub f_bar: f64,
    pub f1_bar: f64,
    pub x_bar: f64,
    pub y_bar: f64,
    pub gamma_bar: f64,
    pub a_bar: f64,
    pub a_lower: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.f_bar, self.f1_bar, self.x_bar, self.y_bar, self.gamma_bar, self.a_bar, self.a_lower];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("bound constants must be finite and nonnegative".into()));
        }
        if self.a_lower > self.a_bar {
            return Err(Error::Config("bounds.a_lower cannot exceed bounds.a_bar".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainConditionReport {
    pub k: f64,
    pub k1: f64,
    pub alpha1: f64,
    /// `a_lower` on the left of the first inequality.
    pub cond1_lhs: f64,
    /// The three right-hand terms of the first inequality.
    pub cond1_terms: [f64; 3],
    pub cond1_rhs: f64,
    pub cond1_pass: bool,
    pub cond2_lhs: f64,
    pub cond2_rhs: f64,
    pub cond2_pass: bool,
    pub margin1: f64,
    pub margin2: f64,
    /// `(k1, alpha1)` reached by doubling both gains until the conditions hold.
    pub suggested: Option<(f64, f64)>,
}

impl GainConditionReport {
    pub fn passed(&self) -> bool {
        self.cond1_pass && self.cond2_pass
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let verdict = |p: bool| if p { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "gains: k = {}, k1 = {}, alpha1 = {}", self.k, self.k1, self.alpha1);
        let _ = writeln!(
            s,
            "condition 1: a_lower = {:.6e} > {:.6e} = {:.6e} + {:.6e} + {:.6e}  [{}] (margin {:.4})",
            self.cond1_lhs,
            self.cond1_rhs,
            self.cond1_terms[0],
            self.cond1_terms[1],
            self.cond1_terms[2],
            verdict(self.cond1_pass),
            self.margin1
        );
        let _ = writeln!(
            s,
            "condition 2: k1 = {:.6e} > {:.6e}  [{}] (margin {:.4})",
            self.cond2_lhs,
            self.cond2_rhs,
            verdict(self.cond2_pass),
            self.margin2
        );
        match self.suggested {
            Some((k1, a1)) => {
                let _ = writeln!(s, "suggested: k1 = {k1}, alpha1 = {a1}");
            }
            None => {
                let _ = writeln!(s, "suggested: none (conditions unreachable by raising k1, alpha1)");
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let (sk1, sa1) = self
            .suggested
            .map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        format!(
            "k,k1,alpha1,cond1_lhs,cond1_term1,cond1_term2,cond1_term3,cond1_rhs,cond1_pass,cond2_lhs,cond2_rhs,cond2_pass,margin1,margin2,suggested_k1,suggested_alpha1\n\
             {},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.k,
            self.k1,
            self.alpha1,
            self.cond1_lhs,
            self.cond1_terms[0],
            self.cond1_terms[1],
            self.cond1_terms[2],
            self.cond1_rhs,
            self.cond1_pass,
            self.cond2_lhs,
            self.cond2_rhs,
            self.cond2_pass,
            self.margin1,
            self.margin2,
            sk1,
            sa1
        )
    }
}

fn condition_terms(b: &BoundConstants, k: f64, k1: f64, alpha1: f64) -> ([f64; 3], f64) {
    let y2 = b.y_bar * b.y_bar;
    let g2 = b.gamma_bar * b.gamma_bar;
    let terms = [
        3.0 * y2 / (k * alpha1),
        4.0 * b.f_bar * b.f_bar / (k * k1),
        4.0 * k * y2 * g2 * b.a_bar * b.a_bar / k1,
    ];
    let cond2 = 6.0 * y2 * y2 * g2 / alpha1;
    (terms, cond2)
}

fn conditions_hold(b: &BoundConstants, k: f64, k1: f64, alpha1: f64) -> bool {
    let (terms, cond2) = condition_terms(b, k, k1, alpha1);
    b.a_lower > terms.iter().sum::<f64>() && k1 > cond2
}

pub const SUGGEST_MAX_DOUBLINGS: usize = 200;

/// Doubles `k1` and `alpha1` from the given start until both conditions hold.
pub fn suggest_gains(b: &BoundConstants, k: f64, k1: f64, alpha1: f64) -> Option<(f64, f64)> {
    let (mut k1, mut alpha1) = (k1, alpha1);
    for _ in 0..=SUGGEST_MAX_DOUBLINGS {
        if conditions_hold(b, k, k1, alpha1) {
            return Some((k1, alpha1));
        }
        k1 *= 2.0;
        alpha1 *= 2.0;
    }
    None
}

pub fn check_gain_conditions(b: &BoundConstants, k: f64, k1: f64, alpha1: f64) -> Result<GainConditionReport> {
    if !(k > 0.0 && k1 > 0.0 && alpha1 > 0.0) {
        return Err(Error::contract(format!(
            "check_gain_conditions: gains must be positive (k = {k}, k1 = {k1}, alpha1 = {alpha1})"
        )));
    }
    let (terms, cond2_rhs) = condition_terms(b, k, k1, alpha1);
    let cond1_rhs = terms.iter().sum::<f64>();
    let ratio = |lhs: f64, rhs: f64| if rhs > 0.0 { lhs / rhs } else { f64::INFINITY };
    Ok(GainConditionReport {
        k,
        k1,
        alpha1,
        cond1_lhs: b.a_lower,
        cond1_terms: terms,
        cond1_rhs,
        cond1_pass: b.a_lower > cond1_rhs,
        cond2_lhs: k1,
        cond2_rhs,
        cond2_pass: k1 > cond2_rhs,
        margin1: ratio(b.a_lower, cond1_rhs),
        margin2: ratio(k1, cond2_rhs),
        suggested: suggest_gains(b, k, k1, alpha1),
    })
}

/// Inputs to the minimum dwell time bound under finite excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwellTimeInputs {
    /// `iota_1 .. iota_s`; the last entry is `iota_s`.
    pub iotas: Vec<f64>,
    pub v1_bar: f64,
    pub v: f64,
    pub v_bar: f64,
    pub v_r: f64,
    pub v_r1_bar: f64,
    pub iota_r1: f64,
}

/// `max(0, log(arg))`: arguments at or below one give a nonbinding constraint.
fn binding_log(arg: f64) -> f64 {
    if arg > 1.0 {
        arg.ln()
    } else {
        0.0
    }
}

/// Smallest dwell time satisfying all three constraint families.
pub fn min_dwell_time(inp: &DwellTimeInputs) -> Result<f64> {
    let s = inp.iotas.len();
    if s < 2 {
        return Err(Error::contract(format!("min_dwell_time: need s >= 2 switching indices, got {s}")));
    }
    if !(inp.v > 0.0 && inp.v_r > 0.0) {
        return Err(Error::contract("min_dwell_time: decay rates v and v_r must be positive"));
    }
    let scalars = [inp.v1_bar, inp.v_bar, inp.v_r1_bar, inp.iota_r1];
    if scalars.iter().chain(&inp.iotas).any(|x| !(*x > 0.0)) {
        return Err(Error::contract("min_dwell_time: all bounds and iota values must be positive"));
    }
    let sf = s as f64;
    let iota_s = inp.iotas[s - 1];
    let ratio = inp.v_bar / inp.v;
    let mut out: f64 = 0.0;
    for j in 1..s {
        let arg = sf * inp.iotas[j - 1] / iota_s - sf * inp.iotas[j] / iota_s;
        out = out.max(ratio / (s - j) as f64 * binding_log(arg));
    }
    let arg = sf * inp.v * inp.v1_bar / (inp.v_bar * iota_s) - sf * inp.iotas[0] / iota_s;
    out = out.max(ratio / sf * binding_log(arg));
    let arg = inp.v_r * inp.v_r1_bar / inp.iota_r1 - 1.0;
    out = out.max(binding_log(arg) / inp.v_r);
    Ok(out)
}

/// Finite-difference step for `dY/dx`.
pub const JACOBIAN_STEP: f64 = 1e-5;

/// `F(x, u) = gamma1 * sum_i dY/dx_i * x_dot_i` with central differences.
pub fn regressor_rate(plant: &dyn Plant, x: &Vector, x_dot: &Vector, gamma1: f64) -> Result<Matrix> {
    let mut f = Matrix::zeros(plant.state_dim(), plant.param_dim());
    for i in 0..x.len() {
        if x_dot[i] == 0.0 {
            continue;
        }
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += JACOBIAN_STEP;
        xm[i] -= JACOBIAN_STEP;
        let dy = (plant.regressor(&xp)? - plant.regressor(&xm)?) / (2.0 * JACOBIAN_STEP);
        f += dy * x_dot[i];
    }
    Ok(f * gamma1)
}

/// Empirical suprema of the gain-condition constants along a logged run.
pub fn estimate_bound_constants(
    log: &TrajectoryLog,
    plant: &dyn Plant,
    theta: &Vector,
    gamma1: f64,
    gamma: &Matrix,
) -> Result<BoundConstants> {
    if log.samples.is_empty() {
        return Err(Error::contract("estimate_bound_constants: empty log"));
    }
    let mut b = BoundConstants {
        f_bar: 0.0,
        f1_bar: 0.0,
        x_bar: 0.0,
        y_bar: 0.0,
        gamma_bar: spectral_norm(gamma)?,
        a_bar: 0.0,
        a_lower: f64::INFINITY,
    };
    for s in &log.samples {
        let terms = plant.terms(&s.x)?;
        let x_dot = terms.derivative(&s.u, theta);
        b.f1_bar = b.f1_bar.max(x_dot.norm());
        b.x_bar = b.x_bar.max(s.x.norm());
        b.y_bar = b.y_bar.max(spectral_norm(&terms.y)?);
        b.f_bar = b.f_bar.max(spectral_norm(&regressor_rate(plant, &s.x, &x_dot, gamma1)?)?);
        b.a_bar = b.a_bar.max(s.a_norm_h);
        b.a_lower = b.a_lower.min(s.a_min_h);
    }
    Ok(b)
}
