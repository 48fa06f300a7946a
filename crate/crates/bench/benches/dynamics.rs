use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lazydyn::moments::{self, DriftCoefficients};
use lazydyn::network::{init_params, loss_and_gradient, Activation, Architecture, Scaling};
use lazydyn::sim::{simulate_terminal, ScalarSde};
use lazydyn::SeededRng;
use ndarray::{Array1, Array2};

fn gradient_step(c: &mut Criterion) {
    let arch = Architecture::uniform(5, 200, 5, Activation::Relu, Scaling::Standard, 2f64.sqrt(), 0.1).unwrap();
    let p = init_params(&arch, &mut SeededRng::new(0, 0));
    let mut rng = SeededRng::new(1, 0);
    let x = Array2::from_shape_fn((100, 5), |_| rng.normal());
    let y = Array1::from_shape_fn(100, |_| rng.normal());
    c.bench_function("full_batch_gradient_w200", |b| {
        b.iter(|| loss_and_gradient(black_box(&p), &arch, x.view(), y.view()).unwrap())
    });
    let x1 = x.slice(ndarray::s![..1, ..]).to_owned();
    let y1 = y.slice(ndarray::s![..1]).to_owned();
    c.bench_function("single_sample_gradient_w200", |b| {
        b.iter(|| loss_and_gradient(black_box(&p), &arch, x1.view(), y1.view()).unwrap())
    });
}

fn moment_terms(c: &mut Criterion) {
    let coeffs = DriftCoefficients::from_values(vec![0.1, -0.5, 0.05, -0.01], 0.0).unwrap();
    c.bench_function("expansion_m2_order2", |b| {
        b.iter(|| {
            let e = moments::correction_terms(black_box(&coeffs), 0.3, 2).unwrap();
            e.value(0.1, 0.2)
        })
    });
}

fn euler_maruyama(c: &mut Criterion) {
    let sde = ScalarSde::new(|th: f64| -th, 0.3, 1.0).unwrap();
    let rng = SeededRng::new(0, 0);
    c.bench_function("em_1000_paths_100_steps", |b| {
        b.iter(|| simulate_terminal(&sde, 0.01, 1.0, 1000, &rng, true).unwrap())
    });
}

criterion_group!(benches, gradient_step, moment_terms, euler_maruyama);
criterion_main!(benches);
