use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use odesr::autodiff::Tape;
use odesr::sensitivity::{gradient, BackwardOptions, Method};
use odesr::solver::{integrate, SolverConfig};
use odesr::Shape;
use odesr_bench::{field, input};

fn conv2d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for ch in [16usize, 64] {
        let x = input(Shape::new(4, ch, 32, 32), 1);
        let w = input(Shape::new(ch, ch, 3, 3), 2);
        g.bench_with_input(BenchmarkId::new("forward", ch), &ch, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv) = (tape.constant(x.clone()), tape.param(w.clone()));
                black_box(tape.conv2d(xv, wv, None, 1).unwrap());
            })
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", ch), &ch, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
                let y = tape.conv2d(xv, wv, None, 1).unwrap();
                let loss = tape.sum(y).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    g.finish();
}

fn integrate_field(c: &mut Criterion) {
    let f = field(8, 3);
    let u0 = input(Shape::new(2, 8, 16, 16), 4);
    let mut g = c.benchmark_group("integrate");
    for tol in [1e-3, 1e-6] {
        let cfg = SolverConfig::with_tolerances(tol, tol);
        g.bench_with_input(BenchmarkId::from_parameter(tol), &cfg, |b, cfg| {
            b.iter(|| black_box(integrate(&f, &u0, cfg, false).unwrap()))
        });
    }
    g.finish();
}

fn backends(c: &mut Criterion) {
    let f = field(8, 5);
    let u0 = input(Shape::new(2, 8, 16, 16), 6);
    let cfg = SolverConfig::with_tolerances(1e-4, 1e-4);
    let opts = BackwardOptions::default();
    let mut g = c.benchmark_group("gradient");
    g.sample_size(20);
    for method in Method::ALL {
        g.bench_function(method.as_str(), |b| {
            b.iter(|| black_box(gradient(method, &f, &u0, |t: &mut Tape<f64>, x| t.sum(x), &cfg, &opts).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, conv2d, integrate_field, backends);
criterion_main!(benches);
