use proptest::prelude::*;

use cl_estimator::history_stack::{initialize_h, try_insert, DataPoint, HistoryStack, PurgeState};
use cl_estimator::lyapunov::{compute_v, rayleigh_bounds};
use cl_estimator::numerics::{min_eigenvalue_symmetric, min_singular_value};
use cl_estimator::{Matrix, Plant, TwoLinkPlant, Vector};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn state() -> impl Strategy<Value = Vector> {
    use std::f64::consts::PI;
    (-PI..PI, -PI..PI, -5.0f64..5.0, -5.0f64..5.0).prop_map(|(a, b, c, d)| Vector::from_vec(vec![a, b, c, d]))
}

fn point() -> impl Strategy<Value = DataPoint> {
    (state(), prop::collection::vec(-3.0f64..3.0, 4), prop::collection::vec(-3.0f64..3.0, 2)).prop_map(
        |(x, xd, u)| DataPoint { x_hat_dot: Vector::from_vec(xd), x, u: Vector::from_vec(u), t: 0.0 },
    )
}

fn recomputed_gram(h: &HistoryStack, plant: &dyn Plant) -> Matrix {
    h.entries().iter().fold(Matrix::zeros(4, 4), |acc, e| {
        let y = plant.regressor(&e.x).unwrap();
        acc + y.transpose() * y
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn transpose_keeps_min_singular_value((r, c) in (1usize..6, 1usize..6), seed in any::<u64>()) {
        let a = Matrix::from_fn(r, c, |i, j| ((seed.wrapping_mul(31 + i as u64 * 7 + j as u64) % 1000) as f64) / 250.0 - 2.0);
        let lhs = min_singular_value(&a).unwrap();
        let rhs = min_singular_value(&a.transpose()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * a.norm().max(1.0));
    }

    #[test]
    fn gram_of_any_matrix_is_psd(b in matrix(4, 4)) {
        prop_assert!(min_eigenvalue_symmetric(&(b.transpose() * &b)).unwrap() >= -1e-10);
    }

    #[test]
    fn cached_gram_tracks_mutations(points in prop::collection::vec(point(), 1..40)) {
        let plant = TwoLinkPlant::new(Default::default());
        let mut g = HistoryStack::new(6, 4);
        let mut last_sigma = 0.0;
        for p in points {
            let was_full = g.is_full();
            try_insert(&mut g, p, &plant).unwrap();
            let fresh = recomputed_gram(&g, &plant);
            prop_assert!((g.gram() - &fresh).amax() <= 1e-9 * fresh.amax().max(1.0));
            if was_full {
                prop_assert!(g.sigma_min() >= last_sigma - 1e-12);
            }
            last_sigma = g.sigma_min();
        }
    }

    #[test]
    fn lyapunov_is_even_and_sandwiched(
        r in prop::collection::vec(-2.0f64..2.0, 4),
        xt in prop::collection::vec(-2.0f64..2.0, 4),
        th in prop::collection::vec(-2.0f64..2.0, 4),
        diag in prop::collection::vec(0.05f64..5.0, 4),
    ) {
        let (r, xt, th) = (Vector::from_vec(r), Vector::from_vec(xt), Vector::from_vec(th));
        let gamma = Matrix::from_diagonal(&Vector::from_vec(diag));
        let v = compute_v(&r, &xt, &th, &gamma).unwrap();
        prop_assert_eq!(v, compute_v(&-&r, &-&xt, &-&th, &gamma).unwrap());
        let (lo, hi) = rayleigh_bounds(&gamma).unwrap();
        let z2 = r.norm_squared() + xt.norm_squared() + th.norm_squared();
        prop_assert!(lo * z2 <= v * (1.0 + 1e-10) && v <= hi * z2 * (1.0 + 1e-10));
    }

    #[test]
    fn purge_respects_dwell(points in prop::collection::vec(point(), 20..120), dwell in 0.0f64..3.0, step in 0.01f64..0.3) {
        let plant = TwoLinkPlant::new(Default::default());
        let h = initialize_h(&plant, &Vector::zeros(4), 4, 11).unwrap();
        let mut ps = PurgeState::new(h, 0.9, dwell).unwrap();
        let mut eta = ps.eta;
        for (i, p) in points.into_iter().enumerate() {
            let t = (i + 1) as f64 * step;
            try_insert(&mut ps.g, p, &plant).unwrap();
            ps.maybe_purge(t);
            prop_assert!(ps.eta >= eta);
            eta = ps.eta;
        }
        prop_assert_eq!(ps.switch_index, 1 + ps.switch_times.len());
        let mut prev = 0.0;
        for &t in &ps.switch_times {
            prop_assert!(t - prev >= dwell - 1e-12);
            prev = t;
        }
    }
}

#[test]
fn switches_only_with_full_auxiliary_stack() {
    use rand::{Rng, SeedableRng};
    let plant = TwoLinkPlant::new(Default::default());
    let h = initialize_h(&plant, &Vector::zeros(4), 4, 3).unwrap();
    let mut ps = PurgeState::new(h, 1.0, 0.0).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    for i in 0..400 {
        let t = i as f64 * 0.05;
        let mut r = |s: f64| rng.random_range(-s..s);
        let p = DataPoint {
            x_hat_dot: Vector::from_vec(vec![r(1.0), r(1.0), r(1.0), r(1.0)]),
            x: Vector::from_vec(vec![r(3.0), r(3.0), r(5.0), r(5.0)]),
            u: Vector::from_vec(vec![r(1.0), r(1.0)]),
            t,
        };
        try_insert(&mut ps.g, p, &plant).unwrap();
        let full = ps.g.is_full();
        if ps.maybe_purge(t) {
            assert!(full);
        }
    }
    assert!(ps.switch_index > 1);
}
