//! State-derivative estimation: the dynamic observer driven by the state
//! estimation error, and the smoothing + polynomial-regression baseline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{moving_average, polyfit_derivative, Vector};
use crate::plant::{Plant, PlantTerms};

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub x_hat: Vector,
    /// Auxiliary integral signal.
    pub mu: Vector,
}

impl ObserverState {
    /// Starts at the first measurement with a zero auxiliary signal.
    pub fn from_measurement(x_meas: &Vector) -> Self {
        Self {
            x_hat: x_meas.clone(),
            mu: Vector::zeros(x_meas.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverGains {
    pub k1: f64,
    pub alpha1: f64,
    /// Weight of the parameter feedforward `Y(x) theta_hat`, in `[0, 1]`.
    pub gamma1: f64,
}

impl Default for ObserverGains {
    fn default() -> Self {
        Self {
            k1: 3.0,
            alpha1: 3.0,
            gamma1: 1.0,
        }
    }
}

impl ObserverGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.alpha1 > 0.0) {
            return Err(Error::Config("observer.k1 and observer.alpha1 must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma1) {
            return Err(Error::Config("observer.gamma1 must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Observer right-hand side given plant terms already evaluated at the measurement.
///
/// Returns `(x_hat_dot, mu_dot)`; `x_hat_dot` doubles as the derivative estimate.
pub fn observer_rates_with_terms(
    state: &ObserverState,
    x_meas: &Vector,
    u: &Vector,
    theta_hat: &Vector,
    gains: &ObserverGains,
    terms: &PlantTerms,
) -> Result<(Vector, Vector)> {
    let n = x_meas.len();
    if state.x_hat.len() != n || state.mu.len() != n || terms.f1.len() != n {
        return Err(Error::contract("observer_rates: state dimension mismatch"));
    }
    if u.len() != terms.g.ncols() || theta_hat.len() != terms.y.ncols() {
        return Err(Error::contract("observer_rates: input or parameter dimension mismatch"));
    }
    let x_tilde = x_meas - &state.x_hat;
    let x_hat_dot = &terms.y * theta_hat * gains.gamma1
        + &terms.f1
        + &terms.g * u
        + &x_tilde * (gains.k1 + gains.alpha1)
        + &state.mu;
    let mu_dot = x_tilde * (gains.k1 * gains.alpha1 + 1.0);
    Ok((x_hat_dot, mu_dot))
}

pub fn observer_rates(
    state: &ObserverState,
    x_meas: &Vector,
    u: &Vector,
    theta_hat: &Vector,
    gains: &ObserverGains,
    plant: &dyn Plant,
) -> Result<(Vector, Vector)> {
    if x_meas.len() != plant.state_dim() {
        return Err(Error::contract("observer_rates: measurement dimension mismatch"));
    }
    let terms = plant.terms(x_meas)?;
    observer_rates_with_terms(state, x_meas, u, theta_hat, gains, &terms)
}

/// `r = x_tilde_dot + alpha1 * x_tilde`.
pub fn filtered_error(x_tilde: &Vector, x_tilde_dot: &Vector, alpha1: f64) -> Vector {
    x_tilde_dot + x_tilde * alpha1
}

/// Baseline settings: window length, polynomial order, and moving-average width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub window: usize,
    pub order: usize,
    pub smoothing: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            window: 21,
            order: 3,
            smoothing: 5,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smoothing == 0 {
            return Err(Error::Config("baseline.smoothing must be at least 1".into()));
        }
        if self.window < self.order + 1 {
            return Err(Error::Config(format!(
                "baseline.window ({}) must be at least order + 1 ({})",
                self.window,
                self.order + 1
            )));
        }
        Ok(())
    }
}

/// Midpoint derivative estimate produced by the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEstimate {
    pub t: f64,
    /// Smoothed measurement at `t`.
    pub x: Vector,
    pub x_dot: Vector,
}

/// Moving-average smoother feeding a ring buffer that is differentiated by
/// polynomial regression.
#[derive(Debug, Clone)]
pub struct NumericalDifferentiator {
    cfg: BaselineConfig,
    raw: VecDeque<(f64, Vector)>,
    buffer: VecDeque<(f64, Vector)>,
}

impl NumericalDifferentiator {
    pub fn new(cfg: BaselineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            raw: VecDeque::with_capacity(cfg.smoothing),
            buffer: VecDeque::with_capacity(cfg.window),
        })
    }

    pub fn config(&self) -> BaselineConfig {
        self.cfg
    }

    pub fn buffer(&self) -> impl Iterator<Item = &(f64, Vector)> {
        self.buffer.iter()
    }

    pub fn is_ready(&self) -> bool {
        self.buffer.len() == self.cfg.window
    }

    /// Appends the moving average of the latest `smoothing` raw measurements,
    /// time-stamped at the mean of their sample times.
    pub fn push(&mut self, t: f64, x_meas: &Vector) -> Result<()> {
        if let Some(&(last, _)) = self.raw.back() {
            if !(t > last) {
                return Err(Error::contract(format!(
                    "baseline_push: time {t} does not follow {last}"
                )));
            }
        }
        if self.raw.len() == self.cfg.smoothing {
            self.raw.pop_front();
        }
        self.raw.push_back((t, x_meas.clone()));
        let smoothed = moving_average(self.raw.iter().map(|(_, x)| x))?;
        let stamp = self.raw.iter().map(|(t, _)| t).sum::<f64>() / self.raw.len() as f64;
        if self.buffer.len() == self.cfg.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back((stamp, smoothed));
        Ok(())
    }

    /// Derivative of the fitted polynomial at `t_eval`, or `None` until the buffer is full.
    pub fn estimate_at(&self, t_eval: f64) -> Result<Option<Vector>> {
        if !self.is_ready() {
            return Ok(None);
        }
        let (times, samples): (Vec<f64>, Vec<Vector>) = self.buffer.iter().cloned().unzip();
        polyfit_derivative(&times, &samples, self.cfg.order, t_eval).map(Some)
    }

    /// Noncausal estimate at the middle sample of the window.
    pub fn estimate_midpoint(&self) -> Result<Option<BaselineEstimate>> {
        if !self.is_ready() {
            return Ok(None);
        }
        let (t, x) = self.buffer[self.cfg.window / 2].clone();
        Ok(self
            .estimate_at(t)?
            .map(|x_dot| BaselineEstimate { t, x, x_dot }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{true_derivative, TwoLinkParams, TwoLinkPlant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plant() -> TwoLinkPlant {
        TwoLinkPlant::new(TwoLinkParams::default())
    }

    #[test]
    fn exact_estimate_is_fixed_point() {
        let p = plant();
        let theta = p.params.theta();
        let x = Vector::from_vec(vec![0.2, -0.3, 1.1, -0.6]);
        let u = Vector::from_vec(vec![0.5, -1.5]);
        let st = ObserverState::from_measurement(&x);
        let (xhd, mud) = observer_rates(&st, &x, &u, &theta, &ObserverGains::default(), &p).unwrap();
        assert!((xhd - true_derivative(&p, &x, &u, &theta).unwrap()).amax() < 1e-12);
        assert_eq!(mud, Vector::zeros(4));
    }

    #[test]
    fn zero_gamma_disables_feedforward() {
        let p = plant();
        let x = Vector::from_vec(vec![0.2, -0.3, 1.1, -0.6]);
        let u = Vector::from_vec(vec![0.5, -1.5]);
        let st = ObserverState::from_measurement(&x);
        let gains = ObserverGains { gamma1: 0.0, ..Default::default() };
        let (xhd, _) = observer_rates(&st, &x, &u, &p.params.theta(), &gains, &p).unwrap();
        let expect = p.f1(&x).unwrap() + p.g(&x).unwrap() * &u;
        assert!((xhd - expect).amax() < 1e-12);
    }

    #[test]
    fn rates_match_term_by_term() {
        let p = plant();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let x = Vector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let st = ObserverState {
                x_hat: Vector::from_fn(4, |_, _| rng.random_range(-2.0..2.0)),
                mu: Vector::from_fn(4, |_, _| rng.random_range(-2.0..2.0)),
            };
            let u = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let th = Vector::from_fn(4, |_, _| rng.random_range(-2.0..8.0));
            let gains = ObserverGains { k1: 3.0, alpha1: 7.0, gamma1: 0.4 };
            let (xhd, mud) = observer_rates(&st, &x, &u, &th, &gains, &p).unwrap();
            let (f1, g, y) = (p.f1(&x).unwrap(), p.g(&x).unwrap(), p.regressor(&x).unwrap());
            for i in 0..4 {
                let xt = x[i] - st.x_hat[i];
                let mut e = f1[i] + 10.0 * xt + st.mu[i];
                for j in 0..2 {
                    e += g[(i, j)] * u[j];
                }
                for j in 0..4 {
                    e += 0.4 * y[(i, j)] * th[j];
                }
                assert!((xhd[i] - e).abs() < 1e-12);
                assert!((mud[i] - 22.0 * xt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rates_reject_bad_shapes() {
        let p = plant();
        let st = ObserverState::from_measurement(&Vector::zeros(3));
        let r = observer_rates(&st, &Vector::zeros(3), &Vector::zeros(2), &Vector::zeros(4), &ObserverGains::default(), &p);
        assert!(r.is_err());
    }

    #[test]
    fn filtered_error_cases() {
        let z = Vector::zeros(1);
        assert_eq!(filtered_error(&z, &z, 3.0), z);
        let r = filtered_error(&Vector::from_vec(vec![2.0]), &Vector::from_vec(vec![1.0]), 0.5);
        assert_eq!(r[0], 2.0);
    }

    #[test]
    fn gains_validation() {
        assert!(ObserverGains::default().validate().is_ok());
        assert!(ObserverGains { gamma1: 1.5, ..Default::default() }.validate().is_err());
        assert!(ObserverGains { k1: 0.0, ..Default::default() }.validate().is_err());
    }

    fn diff(window: usize, order: usize, smoothing: usize) -> NumericalDifferentiator {
        NumericalDifferentiator::new(BaselineConfig { window, order, smoothing }).unwrap()
    }

    #[test]
    fn unit_smoothing_stores_raw() {
        let mut d = diff(4, 1, 1);
        for i in 0..6 {
            d.push(i as f64, &Vector::from_vec(vec![i as f64 * 1.5])).unwrap();
        }
        let stored: Vec<f64> = d.buffer().map(|(_, v)| v[0]).collect();
        assert_eq!(stored, vec![3.0, 4.5, 6.0, 7.5]);
    }

    #[test]
    fn constant_stream_stays_constant() {
        let mut d = diff(5, 2, 3);
        for i in 0..10 {
            d.push(i as f64 * 0.1, &Vector::from_vec(vec![4.2, -1.0])).unwrap();
        }
        assert!(d.buffer().all(|(_, v)| (v[0] - 4.2).abs() < 1e-15 && (v[1] + 1.0).abs() < 1e-15));
    }

    #[test]
    fn buffer_holds_running_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let raw: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut d = diff(7, 2, 4);
        for (i, r) in raw.iter().enumerate() {
            d.push(i as f64, &Vector::from_vec(vec![*r])).unwrap();
        }
        for (k, (t, v)) in d.buffer().enumerate() {
            let i = raw.len() - 7 + k;
            let lo = i.saturating_sub(3);
            assert!((t - (lo + i) as f64 / 2.0).abs() < 1e-12);
            let lo = i.saturating_sub(3);
            let mut s = 0.0;
            for r in &raw[lo..=i] {
                s += r;
            }
            assert!((v[0] - s / (i - lo + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_has_no_lag_on_a_ramp() {
        let mut d = diff(9, 2, 5);
        for i in 0..20 {
            let t = i as f64 * 0.01;
            d.push(t, &Vector::from_vec(vec![2.0 * t - 1.0])).unwrap();
        }
        let est = d.estimate_midpoint().unwrap().unwrap();
        assert!((est.x[0] - (2.0 * est.t - 1.0)).abs() < 1e-12);
        assert!((est.x_dot[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn push_rejects_non_monotone_time() {
        let mut d = diff(3, 1, 1);
        d.push(1.0, &Vector::zeros(1)).unwrap();
        assert!(d.push(1.0, &Vector::zeros(1)).is_err());
    }

    #[test]
    fn underfull_is_not_ready_and_line_slope_exact() {
        let mut d = diff(5, 1, 1);
        for i in 0..4 {
            d.push(i as f64 * 0.01, &Vector::from_vec(vec![3.0 * i as f64 * 0.01 + 1.0])).unwrap();
        }
        assert!(d.estimate_midpoint().unwrap().is_none());
        d.push(0.04, &Vector::from_vec(vec![3.0 * 0.04 + 1.0])).unwrap();
        let est = d.estimate_midpoint().unwrap().unwrap();
        assert!((est.t - 0.02).abs() < 1e-15);
        assert!((est.x_dot[0] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn midpoint_error_shrinks_with_step() {
        // Smooth signal, no noise: cubic fit error is O(h^4) at the midpoint.
        let err = |h: f64| {
            let mut d = diff(21, 3, 1);
            for i in 0..21 {
                let t = i as f64 * h;
                d.push(t, &Vector::from_vec(vec![(3.0 * t).sin()])).unwrap();
            }
            let est = d.estimate_midpoint().unwrap().unwrap();
            (est.x_dot[0] - 3.0 * (3.0 * est.t).cos()).abs()
        };
        let (e1, e2) = (err(0.02), err(0.01));
        assert!(e1 > 0.0 && e2 < e1 / 8.0, "e1={e1} e2={e2}");
    }
}
