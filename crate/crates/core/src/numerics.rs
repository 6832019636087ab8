//! Small dense linear algebra and fixed-step integration.
//!
//! Matrices here are tiny (the benchmark gram is 4x4), so the routines favour
//! accuracy and determinism over asymptotic speed: singular values come from a
//! one-sided (Hestenes) Jacobi sweep and symmetric eigenvalues from cyclic
//! Jacobi rotations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Numerical tolerances shared across the crate.
pub mod tol {
    /// Relative asymmetry allowed for matrices treated as symmetric.
    pub const SYMMETRY: f64 = 1e-12;
    /// A gram matrix counts as full rank when its smallest singular value exceeds this.
    pub const RANK: f64 = 1e-8;
    /// A replacement must raise sigma_min by more than this to be committed.
    pub const SIGMA_IMPROVEMENT: f64 = 1e-12;
    /// Condition number above which a matrix is reported singular.
    pub const CONDITION: f64 = 1e12;
    /// Jacobi sweeps stop once rotations fall below this relative size.
    pub const JACOBI: f64 = 1e-15;
    /// Upper bound on Jacobi sweeps; convergence is quadratic so this is never reached in practice.
    pub const JACOBI_MAX_SWEEPS: usize = 100;
    /// Relative slack on the sampling gate so that float time accumulation
    /// does not delay a gate by one step.
    pub const GATE: f64 = 1e-9;
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if all_finite(a.as_slice()) {
        Ok(())
    } else {
        Err(Error::domain(format!("{what}: non-finite matrix entry")))
    }
}

/// Advance `x` by one classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(mut f: F, t: f64, x: &Vector, dt: f64) -> Result<Vector>
where
    F: FnMut(f64, &Vector) -> Result<Vector>,
{
    if !(dt > 0.0) {
        return Err(Error::contract(format!("rk4_step: dt must be positive, got {dt}")));
    }
    let check = |k: Vector, stage: usize| -> Result<Vector> {
        if all_finite(k.as_slice()) {
            Ok(k)
        } else {
            Err(Error::Integration { t, stage })
        }
    };
    let half = 0.5 * dt;
    let k1 = check(f(t, x)?, 1)?;
    let k2 = check(f(t + half, &(x + &k1 * half))?, 2)?;
    let k3 = check(f(t + half, &(x + &k2 * half))?, 3)?;
    let k4 = check(f(t + dt, &(x + &k3 * dt))?, 4)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// All singular values of `a`, sorted in decreasing order.
///
/// One-sided Jacobi: columns of a working copy are orthogonalised pairwise
/// until every pair is orthogonal to working precision; the column norms are
/// then the singular values.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    ensure_finite(a, "singular_values")?;
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    let mut u = if a.nrows() >= a.ncols() {
        a.clone()
    } else {
        a.transpose()
    };
    let (m, n) = u.shape();
    for _ in 0..tol::JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= tol::JACOBI * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    u[(i, p)] = c * up - s * uq;
                    u[(i, q)] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

pub fn min_singular_value(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.last().copied().unwrap_or(0.0))
}

/// Spectral (induced 2-) norm.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

pub fn is_symmetric(a: &Matrix) -> bool {
    if !a.is_square() {
        return false;
    }
    let n = a.nrows();
    (0..n).all(|i| {
        (0..i).all(|j| {
            let (x, y) = (a[(i, j)], a[(j, i)]);
            (x - y).abs() <= tol::SYMMETRY * x.abs().max(y.abs()).max(1.0)
        })
    })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    ensure_finite(a, "symmetric_eigen")?;
    if !is_symmetric(a) {
        return Err(Error::domain("symmetric_eigen: matrix is not symmetric"));
    }
    let n = a.nrows();
    let mut m = a.clone();
    // Symmetrise exactly so rotations see a consistent matrix.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n, n);
    let scale = m.norm().max(f64::MIN_POSITIVE);
    for _ in 0..tol::JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= tol::JACOBI * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

pub fn min_eigenvalue_symmetric(a: &Matrix) -> Result<f64> {
    Ok(symmetric_eigen(a)?.0.first().copied().unwrap_or(0.0))
}

pub fn max_eigenvalue_symmetric(a: &Matrix) -> Result<f64> {
    Ok(symmetric_eigen(a)?.0.last().copied().unwrap_or(0.0))
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn symmetric_sqrt(a: &Matrix) -> Result<Matrix> {
    let (values, vectors) = symmetric_eigen(a)?;
    if values.iter().any(|&l| l < -tol::RANK) {
        return Err(Error::domain("symmetric_sqrt: matrix is not positive semidefinite"));
    }
    let d = Matrix::from_diagonal(&Vector::from_iterator(
        values.len(),
        values.iter().map(|l| l.max(0.0).sqrt()),
    ));
    Ok(&vectors * d * vectors.transpose())
}

/// Least-squares polynomial fit of each sample component, differentiated at `eval_time`.
///
/// Time is shifted to `eval_time` and scaled by the half-span of the window so
/// the Vandermonde system stays well conditioned for millisecond sample spacing.
pub fn polyfit_derivative(
    times: &[f64],
    samples: &[Vector],
    order: usize,
    eval_time: f64,
) -> Result<Vector> {
    let w = times.len();
    if samples.len() != w {
        return Err(Error::contract("polyfit_derivative: times and samples differ in length"));
    }
    if w < order + 1 {
        return Err(Error::contract(format!(
            "polyfit_derivative: window of {w} samples cannot fit order {order}"
        )));
    }
    if times.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::contract("polyfit_derivative: times must be strictly increasing"));
    }
    let (first, last) = (times[0], times[w - 1]);
    if !(eval_time >= first && eval_time <= last) {
        return Err(Error::contract(format!(
            "polyfit_derivative: eval_time {eval_time} outside [{first}, {last}]"
        )));
    }
    if order == 0 {
        return Ok(Vector::zeros(samples[0].len()));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::contract("polyfit_derivative: samples differ in dimension"));
    }
    let half_span = 0.5 * (last - first);
    let vander = Matrix::from_fn(w, order + 1, |i, j| {
        ((times[i] - eval_time) / half_span).powi(j as i32)
    });
    let rhs = Matrix::from_fn(w, dim, |i, j| samples[i][j]);

    let qr = vander.qr();
    let r = qr.r();
    let r_max = (0..=order).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let r_min = (0..=order).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(r_min > r_max * 1e-12) {
        return Err(Error::Fit(format!(
            "rank-deficient Vandermonde system (|R| range {r_min:e}..{r_max:e})"
        )));
    }
    let qt_rhs = qr.q().transpose() * rhs;
    let coeffs = r
        .solve_upper_triangular(&qt_rhs)
        .ok_or_else(|| Error::Fit("triangular solve failed".into()))?;
    Ok(Vector::from_iterator(dim, coeffs.row(1).iter().map(|c| c / half_span)))
}

/// Componentwise arithmetic mean of a window of samples.
pub fn moving_average<'a, I>(window: I) -> Result<Vector>
where
    I: IntoIterator<Item = &'a Vector>,
{
    let mut iter = window.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::domain("moving_average: empty window"))?;
    let mut sum = first.clone();
    let mut count = 1usize;
    for v in iter {
        if v.len() != sum.len() {
            return Err(Error::contract("moving_average: samples differ in dimension"));
        }
        sum += v;
        count += 1;
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rk4_zero_derivative_is_identity() {
        let x = Vector::from_vec(vec![2.0]);
        let y = rk4_step(|_, x| Ok(Vector::zeros(x.len())), 0.0, &x, 0.1).unwrap();
        assert_eq!(y[0], 2.0);
    }

    #[test]
    fn rk4_matches_hand_stages_for_decay() {
        // k1=-1, k2=-0.95, k3=-0.9525, k4=-0.90475
        let expected = 1.0 + 0.1 / 6.0 * (-1.0 - 2.0 * 0.95 - 2.0 * 0.9525 - 0.90475);
        let x = Vector::from_vec(vec![1.0]);
        let y = rk4_step(|_, x| Ok(-x), 0.0, &x, 0.1).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
        assert!((y[0] - 0.9048375).abs() < 1e-7);
    }

    #[test]
    fn rk4_constant_derivative_exact() {
        let x = Vector::from_vec(vec![0.0]);
        let y = rk4_step(|_, _| Ok(Vector::from_vec(vec![1.0])), 0.0, &x, 0.5).unwrap();
        assert_eq!(y[0], 0.5);
    }

    #[test]
    fn rk4_reports_failing_stage() {
        let x = Vector::from_vec(vec![1.0]);
        let err = rk4_step(
            |t, x| {
                if t > 0.0 {
                    Ok(Vector::from_vec(vec![f64::NAN]))
                } else {
                    Ok(x.clone())
                }
            },
            0.0,
            &x,
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integration { stage: 2, .. }));
    }

    #[test]
    fn rk4_rejects_nonpositive_dt() {
        let x = Vector::from_vec(vec![1.0]);
        assert!(rk4_step(|_, x| Ok(x.clone()), 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn singular_values_simple_cases() {
        assert!((min_singular_value(&Matrix::identity(2, 2)).unwrap() - 1.0).abs() < 1e-15);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 0.5]));
        assert!((min_singular_value(&d).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(min_singular_value(&Matrix::zeros(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn singular_values_reject_nan() {
        let mut a = Matrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(min_singular_value(&a), Err(Error::Domain(_))));
    }

    #[test]
    fn wide_and_tall_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 3, 6);
        let s1 = singular_values(&a).unwrap();
        let s2 = singular_values(&a.transpose()).unwrap();
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn eigen_simple_cases() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 4.0]));
        assert_eq!(min_eigenvalue_symmetric(&d).unwrap(), 1.0);
        assert_eq!(min_eigenvalue_symmetric(&Matrix::zeros(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(min_eigenvalue_symmetric(&a), Err(Error::Domain(_))));
    }

    #[test]
    fn eigenvectors_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random_matrix(&mut rng, 5, 5);
        let a = b.transpose() * &b;
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        let rebuilt = &vecs * Matrix::from_diagonal(&Vector::from_vec(vals)) * vecs.transpose();
        assert!((rebuilt - &a).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_matrix(&mut rng, 4, 4);
        let a = b.transpose() * &b;
        let s = symmetric_sqrt(&a).unwrap();
        assert!((&s * &s - &a).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn polyfit_exact_line_and_parabola() {
        let t = [0.0, 0.1, 0.2];
        let s: Vec<Vector> = t.iter().map(|&t| Vector::from_vec(vec![t])).collect();
        let d = polyfit_derivative(&t, &s, 1, 0.1).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);

        let t: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
        let s: Vec<Vector> = t.iter().map(|&t| Vector::from_vec(vec![t * t])).collect();
        let d = polyfit_derivative(&t, &s, 2, 0.2).unwrap();
        assert!((d[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn polyfit_rejects_bad_inputs() {
        let t = [0.0, 0.1];
        let s: Vec<Vector> = t.iter().map(|&t| Vector::from_vec(vec![t])).collect();
        assert!(polyfit_derivative(&t, &s, 2, 0.05).is_err());
        assert!(polyfit_derivative(&t, &s, 1, 0.5).is_err());
        let t = [0.0, 0.0, 0.1];
        let s: Vec<Vector> = t.iter().map(|&t| Vector::from_vec(vec![t])).collect();
        assert!(polyfit_derivative(&t, &s, 1, 0.05).is_err());
    }

    #[test]
    fn moving_average_cases() {
        let ones = vec![Vector::from_vec(vec![1.0]); 3];
        assert_eq!(moving_average(&ones).unwrap()[0], 1.0);
        let w = [Vector::from_vec(vec![0.0]), Vector::from_vec(vec![2.0])];
        assert_eq!(moving_average(&w).unwrap()[0], 1.0);
        let empty: Vec<Vector> = Vec::new();
        assert!(matches!(moving_average(&empty), Err(Error::Domain(_))));
    }

    #[test]
    fn moving_average_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w: Vec<Vector> = (0..5)
            .map(|_| Vector::from_fn(3, |_, _| rng.random_range(-10.0..10.0)))
            .collect();
        let mean = moving_average(&w).unwrap();
        for j in 0..3 {
            let mut s = 0.0;
            for v in &w {
                s += v[j];
            }
            assert!((mean[j] - s / 5.0).abs() < 1e-12);
        }
    }
}
