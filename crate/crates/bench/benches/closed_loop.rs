use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use finform::embedding::EstimatorTarget;
use finform::fields::{matrix_field, scalar_field, vector_field};
use finform::finform::psi_provider_quad;
use finform::numeric::{step_rk4, OdeSystem};
use finform::plant::scalar_quadratic_plant;
use finform::scenarios::{
    example_cascade_design, example_cascade_loop, example_tuning_loop, scalar_scenario, CascadeExample, PotentialRoute,
    ScalarConfig,
};
use finform::{cascade_design, DMatrix, DVector, GoalSpec, Parameterization, Sector, TargetDynamics};

fn rk4(c: &mut Criterion) {
    let sys = OdeSystem::new(2, |_, x: &DVector<f64>| DVector::from_vec(vec![x[1], -x[0]]));
    let x = DVector::from_vec(vec![1.0, 0.0]);
    c.bench_function("rk4_step_oscillator", |b| {
        b.iter(|| step_rk4(&sys, 0.0, black_box(&x), 1e-3))
    });
}

fn evaluate(c: &mut Criterion) {
    let cl = example_cascade_loop(CascadeExample::Linear).unwrap();
    let s = cl.initial_state().clone();
    c.bench_function("cascade_loop_evaluate", |b| b.iter(|| cl.evaluate(0.0, black_box(&s))));

    let design = example_cascade_design(
        CascadeExample::Linear,
        PotentialRoute::Quadrature,
        EstimatorTarget::Unit,
    )
    .unwrap();
    let quad = cascade_design("quad", &design, &finform::scenarios::example_cascade_init()).unwrap();
    c.bench_function("cascade_loop_evaluate_quadrature", |b| {
        b.iter(|| quad.evaluate(0.0, black_box(&s)))
    });

    let goal = GoalSpec::new(
        scalar_field(|x, _| x[0] - 1.0),
        vector_field(|_, _| DVector::from_element(1, 1.0)),
        TargetDynamics::linear(1.0),
    );
    let par = Parameterization::from_plant(
        &scalar_quadratic_plant(1.0),
        &goal,
        vector_field(|x, _| DVector::from_element(1, x[0] * x[0])),
        matrix_field(|x, _| DMatrix::from_element(1, 1, 2.0 * x[0])),
        Sector::unit(),
    );
    let provider = psi_provider_quad(&goal, &par, 0, 0.0);
    let w = DVector::from_element(1, 1.7);
    c.bench_function("psi_quadrature_evaluate", |b| {
        b.iter(|| provider.evaluate(black_box(&w), 0.0))
    });
}

fn simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate_1s");
    g.sample_size(10);
    let scalar = scalar_scenario(&ScalarConfig::default()).unwrap().closed_loop;
    g.bench_function("scalar", |b| b.iter(|| scalar.simulate(1.0, 1e-3)));
    let cascade = example_cascade_loop(CascadeExample::Linear).unwrap();
    g.bench_function("finform", |b| b.iter(|| cascade.simulate(1.0, 1e-3)));
    let tuning = example_tuning_loop().unwrap();
    g.bench_function("backstepping_tuning", |b| b.iter(|| tuning.simulate(1.0, 1e-3)));
    g.finish();
}

criterion_group!(benches, rk4, evaluate, simulate);
criterion_main!(benches);
