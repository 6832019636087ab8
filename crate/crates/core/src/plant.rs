//! Control-affine plants with dynamics linear in an unknown parameter vector:
//! `x_dot = f1(x) + g(x) u + Y(x) theta`.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Known structure of a linearly parameterized plant.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    fn f1(&self, x: &Vector) -> Result<Vector>;
    fn g(&self, x: &Vector) -> Result<Matrix>;
    /// The regressor `Y(x)`, `n x P`.
    fn regressor(&self, x: &Vector) -> Result<Matrix>;

    /// Per-coordinate bounds of the region used for sampling and Lipschitz checks.
    fn operating_box(&self) -> Vec<(f64, f64)>;

    /// All three known terms at once; plants with shared subexpressions override this.
    fn terms(&self, x: &Vector) -> Result<PlantTerms> {
        Ok(PlantTerms {
            f1: self.f1(x)?,
            g: self.g(x)?,
            y: self.regressor(x)?,
        })
    }
}

/// `f1(x)`, `g(x)` and `Y(x)` evaluated at one state.
#[derive(Debug, Clone)]
pub struct PlantTerms {
    pub f1: Vector,
    pub g: Matrix,
    pub y: Matrix,
}

impl PlantTerms {
    pub fn derivative(&self, u: &Vector, theta: &Vector) -> Vector {
        &self.f1 + &self.g * u + &self.y * theta
    }
}

fn check_dims(plant: &dyn Plant, x: &Vector, u: &Vector, theta: &Vector) -> Result<()> {
    if x.len() != plant.state_dim() || u.len() != plant.input_dim() || theta.len() != plant.param_dim() {
        return Err(Error::contract(format!(
            "shape mismatch: x {}, u {}, theta {} against plant (n={}, m={}, P={})",
            x.len(),
            u.len(),
            theta.len(),
            plant.state_dim(),
            plant.input_dim(),
            plant.param_dim()
        )));
    }
    Ok(())
}

/// `f(x, u) = f1(x) + g(x) u + Y(x) theta`.
pub fn true_derivative(plant: &dyn Plant, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
    check_dims(plant, x, u, theta)?;
    Ok(plant.terms(x)?.derivative(u, theta))
}

/// Inertia constants and ideal parameters of the two-link manipulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoLinkParams {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub theta_true: Vec<f64>,
}

impl Default for TwoLinkParams {
    fn default() -> Self {
        Self {
            p1: 3.473,
            p2: 0.196,
            p3: 0.242,
            theta_true: vec![5.3, 1.1, 8.45, 2.35],
        }
    }
}

impl TwoLinkParams {
    pub fn validate(&self) -> Result<()> {
        if self.theta_true.len() != 4 {
            return Err(Error::Config(format!(
                "plant.theta_true must have 4 entries, got {}",
                self.theta_true.len()
            )));
        }
        // M(x) is SPD for every x iff the determinant stays positive at c2 = +-1.
        for c2 in [-1.0, 1.0] {
            let m11 = self.p1 + 2.0 * self.p3 * c2;
            let m12 = self.p2 + self.p3 * c2;
            if !(m11 > 0.0 && self.p2 > 0.0 && m11 * self.p2 - m12 * m12 > 0.0) {
                return Err(Error::Config(
                    "plant inertia constants give an indefinite mass matrix".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn theta(&self) -> Vector {
        Vector::from_vec(self.theta_true.clone())
    }
}

/// Two-link planar manipulator with state `[q1, q2, q1_dot, q2_dot]`, two
/// torque inputs, and four unknown friction parameters.
#[derive(Debug, Clone)]
pub struct TwoLinkPlant {
    pub params: TwoLinkParams,
}

impl TwoLinkPlant {
    pub fn new(params: TwoLinkParams) -> Self {
        Self { params }
    }

    pub fn mass_matrix(&self, x: &Vector) -> Matrix2<f64> {
        let p = &self.params;
        let c2 = x[1].cos();
        Matrix2::new(
            p.p1 + 2.0 * p.p3 * c2,
            p.p2 + p.p3 * c2,
            p.p2 + p.p3 * c2,
            p.p2,
        )
    }

    pub fn coriolis_matrix(&self, x: &Vector) -> Matrix2<f64> {
        let p3s2 = self.params.p3 * x[1].sin();
        Matrix2::new(-p3s2 * x[3], -p3s2 * (x[2] + x[3]), p3s2 * x[2], 0.0)
    }

    pub fn inverse_mass(&self, x: &Vector) -> Result<Matrix2<f64>> {
        let m = self.mass_matrix(x);
        let tr = m.trace();
        let det = m.determinant();
        let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
        let (hi, lo) = (0.5 * tr + disc, 0.5 * tr - disc);
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= crate::numerics::tol::CONDITION) {
            return Err(Error::Singular { condition });
        }
        Ok(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
    }

    /// Friction torques `[theta1 q1' + theta3 tanh q1', theta2 q2' + theta4 tanh q2']`.
    pub fn friction(x: &Vector, theta: &[f64]) -> Vector2<f64> {
        Vector2::new(
            theta[0] * x[2] + theta[2] * x[2].tanh(),
            theta[1] * x[3] + theta[3] * x[3].tanh(),
        )
    }

    fn check_state(x: &Vector) -> Result<()> {
        if x.len() != 4 {
            return Err(Error::contract(format!("two-link state must have 4 entries, got {}", x.len())));
        }
        Ok(())
    }

    fn f1_with(&self, x: &Vector, minv: &Matrix2<f64>) -> Vector {
        let qd = Vector2::new(x[2], x[3]);
        let acc = -(minv * self.coriolis_matrix(x) * qd);
        Vector::from_vec(vec![x[2], x[3], acc[0], acc[1]])
    }

    fn g_with(minv: &Matrix2<f64>) -> Matrix {
        let mut g = Matrix::zeros(4, 2);
        g.fixed_view_mut::<2, 2>(2, 0).copy_from(minv);
        g
    }

    fn y_with(x: &Vector, minv: &Matrix2<f64>) -> Matrix {
        let d = [x[2], x[3], x[2].tanh(), x[3].tanh()];
        let mut y = Matrix::zeros(4, 4);
        for col in 0..4 {
            let block = col % 2;
            y[(2, col)] = minv[(0, block)] * d[col];
            y[(3, col)] = minv[(1, block)] * d[col];
        }
        y
    }
}

impl Plant for TwoLinkPlant {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        4
    }

    fn f1(&self, x: &Vector) -> Result<Vector> {
        Self::check_state(x)?;
        Ok(self.f1_with(x, &self.inverse_mass(x)?))
    }

    fn g(&self, x: &Vector) -> Result<Matrix> {
        Self::check_state(x)?;
        Ok(Self::g_with(&self.inverse_mass(x)?))
    }

    fn regressor(&self, x: &Vector) -> Result<Matrix> {
        Self::check_state(x)?;
        Ok(Self::y_with(x, &self.inverse_mass(x)?))
    }

    fn operating_box(&self) -> Vec<(f64, f64)> {
        use std::f64::consts::PI;
        vec![(-PI, PI), (-PI, PI), (-5.0, 5.0), (-5.0, 5.0)]
    }

    fn terms(&self, x: &Vector) -> Result<PlantTerms> {
        Self::check_state(x)?;
        let minv = self.inverse_mass(x)?;
        Ok(PlantTerms {
            f1: self.f1_with(x, &minv),
            g: Self::g_with(&minv),
            y: Self::y_with(x, &minv),
        })
    }
}

/// Sum-of-sinusoids joint reference tracked by a computed-torque PD law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Per-joint amplitude (rad) applied to every sinusoid of that joint.
    pub amplitudes: Vec<f64>,
    /// Per-joint frequency list (rad/s).
    pub frequencies: Vec<Vec<f64>>,
    pub kp: f64,
    pub kd: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            amplitudes: vec![1.0, 1.0],
            frequencies: vec![vec![0.5, 1.1, 1.9, 2.9], vec![0.5, 1.1, 1.9, 2.9]],
            kp: 25.0,
            kd: 10.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp > 0.0 && self.kd > 0.0) {
            return Err(Error::Config("controller.kp and controller.kd must be positive".into()));
        }
        if self.amplitudes.len() != 2 || self.frequencies.len() != 2 {
            return Err(Error::Config("controller needs amplitudes and frequencies for two joints".into()));
        }
        for (j, freqs) in self.frequencies.iter().enumerate() {
            let mut distinct: Vec<f64> = freqs.iter().copied().filter(|w| *w > 0.0).collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if distinct.len() < 2 {
                return Err(Error::Config(format!(
                    "controller.frequencies[{j}] needs at least two distinct positive frequencies"
                )));
            }
        }
        Ok(())
    }

    /// Reference position, velocity and acceleration of each joint at `t`.
    pub fn reference(&self, t: f64) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>) {
        let mut q = Vector2::zeros();
        let mut qd = Vector2::zeros();
        let mut qdd = Vector2::zeros();
        for j in 0..2 {
            let a = self.amplitudes[j];
            for &w in &self.frequencies[j] {
                let (s, c) = (w * t).sin_cos();
                q[j] += a * s;
                qd[j] += a * w * c;
                qdd[j] -= a * w * w * s;
            }
        }
        (q, qd, qdd)
    }

    /// Largest reference excursion of any joint (sum of amplitudes).
    pub fn reference_bound(&self) -> f64 {
        (0..2)
            .map(|j| self.amplitudes[j].abs() * self.frequencies[j].len() as f64)
            .fold(0.0, f64::max)
    }
}

/// Computed-torque tracking law
/// `u = M(x)(qdd_d + kd e_dot + kp e) + Vm(x) q_dot - friction(theta_hat)`.
///
/// With `theta_hat = theta` the closed loop is exactly the linear error system
/// `e_ddot + kd e_dot + kp e = 0`.
pub fn excitation_controller(
    t: f64,
    x: &Vector,
    cfg: &ControllerConfig,
    plant: &TwoLinkPlant,
    theta_hat: &[f64],
) -> Result<Vector> {
    TwoLinkPlant::check_state(x)?;
    if theta_hat.len() != 4 {
        return Err(Error::contract("excitation_controller: theta_hat must have 4 entries"));
    }
    let (q_d, qd_d, qdd_d) = cfg.reference(t);
    let q = Vector2::new(x[0], x[1]);
    let qd = Vector2::new(x[2], x[3]);
    let e = q_d - q;
    let ed = qd_d - qd;
    let v = qdd_d + ed * cfg.kd + e * cfg.kp;
    let u = plant.mass_matrix(x) * v + plant.coriolis_matrix(x) * qd - TwoLinkPlant::friction(x, theta_hat);
    Ok(Vector::from_vec(vec![u[0], u[1]]))
}
