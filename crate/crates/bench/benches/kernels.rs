use criterion::{criterion_group, criterion_main, Criterion};
use moreau::crowd::{simulate_crowd, solve_crowd};
use moreau::dynamics::catching_up;
use moreau::geometry::project;
use moreau::optimizer::{solve_discrete, SolveOptions};
use moreau::transcription::DiscreteProblem;
use moreau_bench::{cone, crowd_three, wall};
use nalgebra::DVector;
use std::hint::black_box;

fn projection(c: &mut Criterion) {
    let poly = cone(6);
    let shift = DVector::zeros(6);
    let z = DVector::from_fn(6, |i, _| (i as f64 * 1.7).sin() * 3.0);
    c.bench_function("project_cone_6", |b| b.iter(|| project(black_box(&z), &poly, &shift).unwrap()));
}

fn catching_up_scheme(c: &mut Criterion) {
    let p = wall();
    let u = DVector::from_element(1, 0.5);
    let a = DVector::from_element(1, -1.0);
    c.bench_function("catching_up_k1000", |b| b.iter(|| catching_up(&p, |_| u.clone(), |_| a.clone(), black_box(1000)).unwrap()));
}

fn optimizer(c: &mut Criterion) {
    let dp = DiscreteProblem::new(wall(), 100).unwrap();
    let opts = SolveOptions { multistart: 1, parallel: false, ..Default::default() };
    c.bench_function("solve_wall_k100", |b| b.iter(|| solve_discrete(black_box(&dp), &opts).unwrap()));
}

fn crowd(c: &mut Criterion) {
    let cfg = crowd_three();
    let a = [-3.0, -1.5, -1.0];
    c.bench_function("simulate_crowd_3", |b| b.iter(|| simulate_crowd(black_box(&cfg), &a).unwrap()));
    c.bench_function("solve_crowd_3", |b| b.iter(|| solve_crowd(black_box(&cfg)).unwrap()));
}

criterion_group!(benches, projection, catching_up_scheme, optimizer, crowd);
criterion_main!(benches);
