use std::hint::black_box;

use cl_estimator::history_stack::try_insert;
use cl_estimator::sim::Simulation;
use cl_estimator::{Method, SimConfig};
use criterion::{criterion_group, criterion_main, Criterion};

fn warmed(method: Method) -> Simulation {
    let mut cfg = SimConfig::default();
    cfg.sim.method = method;
    cfg.sim.noise_variance = 0.005;
    let mut sim = Simulation::new(&cfg).unwrap();
    for _ in 0..5_000 {
        sim.step().unwrap();
    }
    sim
}

fn full_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("full_step");
    for method in [Method::Observer, Method::Numerical] {
        let mut sim = warmed(method);
        group.bench_function(method.label(), |b| {
            b.iter(|| {
                if !sim.step().unwrap() {
                    sim = warmed(method);
                }
            })
        });
    }
    group.finish();
}

fn insert_trial(c: &mut Criterion) {
    let sim = warmed(Method::Observer);
    let plant = cl_estimator::TwoLinkPlant::new(SimConfig::default().plant);
    let stack = sim.purge_state().h.clone();
    let candidate = stack.entries()[0].clone();
    c.bench_function("try_insert_full_stack", |b| {
        b.iter(|| {
            let mut g = stack.clone();
            black_box(try_insert(&mut g, candidate.clone(), &plant).unwrap())
        })
    });
}

criterion_group!(benches, full_step, insert_trial);
criterion_main!(benches);
