//! Recorded data for concurrent learning, singular-value-maximizing insertion,
//! and the dwell-time purge that swaps the auxiliary stack in for the active one.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{all_finite, min_singular_value, tol, Matrix, Vector};
use crate::plant::Plant;

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub x_hat_dot: Vector,
    pub x: Vector,
    pub u: Vector,
    /// Recording time, kept for diagnostics.
    pub t: f64,
}

impl DataPoint {
    pub fn is_finite(&self) -> bool {
        all_finite(self.x_hat_dot.as_slice()) && all_finite(self.x.as_slice()) && all_finite(self.u.as_slice())
    }
}

/// Fixed-capacity stack with cached regressors.
///
/// Alongside the entries it keeps `gram = sum Y_j^T Y_j` and
/// `target = sum Y_j^T (x_hat_dot_j - f1(x_j) - g(x_j) u_j)`, so that the
/// concurrent-learning residual at any estimate is `target - gram * theta_hat`.
#[derive(Debug, Clone)]
pub struct HistoryStack {
    capacity: usize,
    entries: Vec<DataPoint>,
    regressors: Vec<Matrix>,
    contributions: Vec<Vector>,
    gram: Matrix,
    target: Vector,
}

impl HistoryStack {
    pub fn new(capacity: usize, param_dim: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            regressors: Vec::with_capacity(capacity),
            contributions: Vec::with_capacity(capacity),
            gram: Matrix::zeros(param_dim, param_dim),
            target: Vector::zeros(param_dim),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }
    pub fn entries(&self) -> &[DataPoint] {
        &self.entries
    }
    pub fn regressors(&self) -> &[Matrix] {
        &self.regressors
    }
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }
    pub fn target(&self) -> &Vector {
        &self.target
    }
    pub fn param_dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn sigma_min(&self) -> f64 {
        // The gram is finite by construction, so the SVD cannot fail.
        min_singular_value(&self.gram).unwrap_or(0.0)
    }

    fn evaluate(&self, p: &DataPoint, plant: &dyn Plant) -> Result<(Matrix, Vector)> {
        if !p.is_finite() {
            return Err(Error::domain("history stack: non-finite data point"));
        }
        if p.x.len() != plant.state_dim() || p.x_hat_dot.len() != plant.state_dim() || p.u.len() != plant.input_dim() {
            return Err(Error::contract("history stack: data point shape mismatch"));
        }
        let terms = plant.terms(&p.x)?;
        if terms.y.ncols() != self.param_dim() {
            return Err(Error::contract("history stack: regressor width mismatch"));
        }
        let residual = &p.x_hat_dot - &terms.f1 - &terms.g * &p.u;
        let contribution = terms.y.tr_mul(&residual);
        Ok((terms.y, contribution))
    }

    /// Appends without any selection; errors when the stack is full.
    pub fn push(&mut self, p: DataPoint, plant: &dyn Plant) -> Result<()> {
        if self.is_full() {
            return Err(Error::contract("history stack: push onto a full stack"));
        }
        let (y, c) = self.evaluate(&p, plant)?;
        self.gram += y.tr_mul(&y);
        self.target += &c;
        self.entries.push(p);
        self.regressors.push(y);
        self.contributions.push(c);
        Ok(())
    }

    /// Overwrites slot `j`, updating the cached sums incrementally.
    pub fn replace(&mut self, j: usize, p: DataPoint, plant: &dyn Plant) -> Result<()> {
        if j >= self.len() {
            return Err(Error::contract(format!("history stack: slot {j} out of range")));
        }
        let (y, c) = self.evaluate(&p, plant)?;
        self.gram -= self.regressors[j].tr_mul(&self.regressors[j]);
        self.gram += y.tr_mul(&y);
        self.target -= &self.contributions[j];
        self.target += &c;
        self.entries[j] = p;
        self.regressors[j] = y;
        self.contributions[j] = c;
        Ok(())
    }

    pub fn clear(&mut self) {
        let p = self.param_dim();
        self.entries.clear();
        self.regressors.clear();
        self.contributions.clear();
        self.gram = Matrix::zeros(p, p);
        self.target = Vector::zeros(p);
    }

    /// Gram recomputed from the stored states, bypassing the cache.
    pub fn recompute_gram(&self, plant: &dyn Plant) -> Result<Matrix> {
        let p = self.param_dim();
        let mut gram = Matrix::zeros(p, p);
        for e in &self.entries {
            let y = plant.regressor(&e.x)?;
            gram += y.tr_mul(&y);
        }
        Ok(gram)
    }

    /// CSV snapshot: one row per data point, columns `t_j, x_j, u_j, x_hat_dot_j`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.entries.first().map_or(0, |e| e.x.len());
        let m = self.entries.first().map_or(0, |e| e.u.len());
        let mut header = vec!["t_j".to_string()];
        header.extend((1..=n).map(|i| format!("x_j_{i}")));
        header.extend((1..=m).map(|i| format!("u_j_{i}")));
        header.extend((1..=n).map(|i| format!("x_hat_dot_j_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for e in &self.entries {
            let row: Vec<String> = std::iter::once(e.t)
                .chain(e.x.iter().copied())
                .chain(e.u.iter().copied())
                .chain(e.x_hat_dot.iter().copied())
                .map(crate::sim::fmt_float)
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Inserts `p` into `g`, keeping the smallest singular value of the gram as
/// large as possible.
///
/// A non-full stack always accepts. A full stack tries `p` in every slot and
/// commits the slot giving the largest sigma_min (lowest index on ties), but
/// only if it beats the current sigma_min by more than the improvement tolerance.
pub fn try_insert(g: &mut HistoryStack, p: DataPoint, plant: &dyn Plant) -> Result<bool> {
    if !g.is_full() {
        g.push(p, plant)?;
        return Ok(true);
    }
    let (y, _) = g.evaluate(&p, plant)?;
    let added = y.tr_mul(&y);
    let current = min_singular_value(g.gram())?;
    let mut best: Option<(usize, f64)> = None;
    for (j, yj) in g.regressors().iter().enumerate() {
        let trial = g.gram() - yj.tr_mul(yj) + &added;
        let sigma = min_singular_value(&trial)?;
        if best.is_none_or(|(_, b)| sigma > b) {
            best = Some((j, sigma));
        }
    }
    match best {
        Some((j, sigma)) if sigma > current + tol::SIGMA_IMPROVEMENT => {
            g.replace(j, p, plant)?;
            Ok(true)
        }
        _ => Ok(false),
    }
}

pub fn stack_is_full_rank(s: &HistoryStack) -> bool {
    !s.is_empty() && s.sigma_min() > tol::RANK
}

/// True once at least `period` has elapsed since the last recording.
pub fn sampling_gate(last_record_time: f64, t: f64, period: f64) -> bool {
    t - last_record_time >= period * (1.0 - tol::GATE)
}

pub const INIT_MAX_ROUNDS: usize = 100;

/// Random full-rank initial active stack.
///
/// States are drawn uniformly from the plant's operating box with zero input and
/// derivative estimates consistent with `theta_hat0`, so the stack initially
/// pulls the estimate towards `theta_hat0`.
pub fn initialize_h(plant: &dyn Plant, theta_hat0: &Vector, capacity: usize, seed: u64) -> Result<HistoryStack> {
    if theta_hat0.len() != plant.param_dim() {
        return Err(Error::contract("initialize_h: theta_hat0 has the wrong dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = plant.operating_box();
    let u = Vector::zeros(plant.input_dim());
    for _ in 0..INIT_MAX_ROUNDS {
        let mut h = HistoryStack::new(capacity, plant.param_dim());
        for _ in 0..capacity {
            let x = Vector::from_iterator(bounds.len(), bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)));
            let terms = plant.terms(&x)?;
            let x_hat_dot = &terms.f1 + &terms.y * theta_hat0;
            h.push(DataPoint { x_hat_dot, x, u: u.clone(), t: 0.0 }, plant)?;
        }
        if stack_is_full_rank(&h) {
            return Ok(h);
        }
    }
    Err(Error::Initialization { rounds: INIT_MAX_ROUNDS })
}

/// Active stack, auxiliary stack, and the purge bookkeeping.
#[derive(Debug, Clone)]
pub struct PurgeState {
    pub h: HistoryStack,
    pub g: HistoryStack,
    /// Time of the last purge.
    pub delta: f64,
    /// Largest sigma_min of the active stack seen so far.
    pub eta: f64,
    /// Threshold fraction in `(0, 1]`.
    pub xi: f64,
    pub dwell: f64,
    /// Switching index: 1 + number of completed purges.
    pub switch_index: usize,
    pub switch_times: Vec<f64>,
}

impl PurgeState {
    pub fn new(h: HistoryStack, xi: f64, dwell: f64) -> Result<Self> {
        if !(xi > 0.0 && xi <= 1.0) {
            return Err(Error::Config(format!("purge.xi must lie in (0, 1], got {xi}")));
        }
        if !(dwell >= 0.0) {
            return Err(Error::Config(format!("purge.dwell must be nonnegative, got {dwell}")));
        }
        let g = HistoryStack::new(h.capacity(), h.param_dim());
        Ok(Self {
            h,
            g,
            delta: 0.0,
            eta: 0.0,
            xi,
            dwell,
            switch_index: 1,
            switch_times: Vec::new(),
        })
    }

    /// Purge when the auxiliary stack is full, full rank, above `xi * eta`,
    /// and the dwell time has elapsed since the last purge.
    pub fn maybe_purge(&mut self, t: f64) -> bool {
        if !self.g.is_full() || !stack_is_full_rank(&self.g) {
            return false;
        }
        let sigma_g = self.g.sigma_min();
        if sigma_g < self.xi * self.eta || t - self.delta < self.dwell {
            return false;
        }
        let fresh = HistoryStack::new(self.g.capacity(), self.g.param_dim());
        self.h = std::mem::replace(&mut self.g, fresh);
        self.delta = t;
        self.switch_index += 1;
        self.switch_times.push(t);
        self.eta = self.eta.max(self.h.sigma_min());
        true
    }
}
