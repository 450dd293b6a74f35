use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use std::hint::black_box;

use fbsde_bench::{bsb, default_net};
use fbsde_core::loss::LossOptions;
use fbsde_core::simulate::{decoupled_forward_states, ForwardScheme};
use fbsde_core::train::loss_and_gradient;
use fbsde_core::{BrownianLattice, GenerateOptions, LossVariant, Order, TimeGrid};

fn lattice(c: &mut Criterion) {
    let mut g = c.benchmark_group("lattice_sample");
    for level in [4u32, 8] {
        g.bench_with_input(BenchmarkId::from_parameter(level), &level, |b, &l| {
            b.iter(|| BrownianLattice::sample(black_box(7), l, 1024, 1, 1.0).unwrap())
        });
    }
    g.finish();
    let lat = BrownianLattice::sample(7, 8, 1024, 1, 1.0).unwrap();
    c.bench_function("increments_at_level_4_of_8", |b| b.iter(|| lat.increments_at_level(black_box(4)).unwrap()));
}

fn batch_evaluation(c: &mut Criterion) {
    let net = default_net(1);
    let n = 4096;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let states: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 / n as f64).collect();
    let mut g = c.benchmark_group("evaluate_batch_4096");
    for (name, order) in [("value", Order::Value), ("gradient", Order::Gradient), ("hessian", Order::Hessian)] {
        g.bench_function(name, |b| b.iter(|| net.evaluate_batch(&times, &states, order).unwrap()));
    }
    g.finish();
}

fn paths(c: &mut Criterion) {
    let p = bsb();
    let net = default_net(2);
    let grid = TimeGrid::uniform(1.0, 16).unwrap();
    let incs = BrownianLattice::sample(3, 4, 256, 1, 1.0).unwrap().increments_at_level(4).unwrap();
    c.bench_function("generate_paths_n16_m256", |b| {
        b.iter(|| fbsde_core::simulate::generate_paths(&p, &grid, &incs, Some(&net), GenerateOptions::default()).unwrap())
    });
}

fn training_iteration(c: &mut Criterion) {
    let p = bsb();
    let net = default_net(4);
    let grid = TimeGrid::uniform(1.0, 16).unwrap();
    let incs = BrownianLattice::sample(5, 4, 256, 1, 1.0).unwrap().increments_at_level(4).unwrap();
    let states = decoupled_forward_states(&p, &grid, &incs, ForwardScheme::EulerMaruyama).unwrap();
    let mut g = c.benchmark_group("loss_and_gradient_n16_m256");
    for variant in [LossVariant::Pathwise, LossVariant::HigherOrder] {
        g.bench_function(format!("{variant:?}"), |b| {
            b.iter_batched(
                || net.clone(),
                |n| loss_and_gradient(&p, &n, &grid, &incs, &states, variant, &LossOptions::default()).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, lattice, batch_evaluation, paths, training_iteration);
criterion_main!(benches);
