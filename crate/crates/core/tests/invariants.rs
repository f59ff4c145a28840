use finform::fields::{matrix_field, scalar_field, vector_field};
use finform::finform::{closed_form_scalar, pde_residual, psi_provider_quad, FiniteFormEstimator, Gain};
use finform::goal::{lambda_of_target, DEFAULT_DELTA1};
use finform::numeric::SampleBox;
use finform::plant::scalar_quadratic_plant;
use finform::scenarios::{scalar_scenario, ScalarConfig};
use finform::{finite_form_loop, DMatrix, DVector, GoalSpec, Parameterization, Sector, TargetDynamics};
use proptest::prelude::*;

fn scalar_goal() -> GoalSpec {
    GoalSpec::new(
        scalar_field(|x, _| x[0] - 1.0),
        vector_field(|_, _| DVector::from_element(1, 1.0)),
        TargetDynamics::linear(1.0),
    )
}

fn scalar_par(goal: &GoalSpec) -> Parameterization {
    Parameterization::from_plant(
        &scalar_quadratic_plant(1.0),
        goal,
        vector_field(|x, _| DVector::from_element(1, x[0] * x[0])),
        matrix_field(|x, _| DMatrix::from_element(1, 1, 2.0 * x[0])),
        Sector::unit(),
    )
}

fn targets() -> impl Strategy<Value = TargetDynamics> {
    (0.1f64..10.0, 0usize..3).prop_map(|(k, kind)| match kind {
        0 => TargetDynamics::Linear { k },
        1 => TargetDynamics::Cubic { k },
        _ => TargetDynamics::Tanh { k },
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lambda_inverts_q(target in targets(), psi in 0.0f64..20.0) {
        let back = lambda_of_target(&target, target.q(psi), 1e6).unwrap();
        prop_assert!((back - psi).abs() <= 1e-8 * (1.0 + psi), "{back} vs {psi}");
    }

    #[test]
    fn quadrature_matches_closed_form_potential(x in -3.0f64..3.0) {
        let goal = scalar_goal();
        let par = scalar_par(&goal);
        let quad = psi_provider_quad(&goal, &par, 0, 0.0);
        let w = DVector::from_element(1, x);
        let exact = 2.0 / 3.0 * x.powi(3) - x * x;
        let v = quad.value(&w, 0.0).unwrap()[0];
        prop_assert!((v - exact).abs() <= 1e-8 * (1.0 + exact.abs()), "{v} vs {exact}");
    }

    #[test]
    fn accumulators_are_nondecreasing(theta in 0.2f64..2.0, x0 in 0.5f64..1.5, th0 in -1.0f64..2.0, gamma in 0.5f64..3.0) {
        let cfg = ScalarConfig { theta, x0, theta_hat0: th0, gamma, ..ScalarConfig::default() };
        let cl = scalar_scenario(&cfg).unwrap().closed_loop;
        let tr = cl.simulate(2.0, 1e-2).unwrap();
        for (name, acc) in &tr.accumulators {
            prop_assert!(acc.windows(2).all(|w| w[1] >= w[0]), "{name}");
        }
    }
}

#[test]
fn provider_satisfies_pde_at_sampled_points() {
    let goal = scalar_goal();
    let par = scalar_par(&goal);
    let provider = closed_form_scalar(
        |x, _| 2.0 / 3.0 * x[0].powi(3) - x[0] * x[0],
        |x, _| DVector::from_element(1, 2.0 * x[0] * x[0] - 2.0 * x[0]),
    );
    let quad = psi_provider_quad(&goal, &par, 0, 0.0);
    let b = SampleBox::symmetric(1, 4.0);
    let mut rng = finform::numeric::seeded_rng(11);
    for _ in 0..1000 {
        let w = b.sample(&mut rng);
        for p in [&provider, &quad] {
            let (_, r) = pde_residual(p, &goal, &par, &[0], &w, 0.0).unwrap();
            assert!(r <= 1e-6, "residual {r} at {w}");
        }
    }
}

#[test]
fn tanh_sector_holds_on_ten_thousand_draws() {
    let z = std::sync::Arc::new(|x: &DVector<f64>, th: &DVector<f64>, _t: f64| 5.0 * (x[0] * th[0]).tanh());
    let par = Parameterization::new(
        1,
        vector_field(|x, _| DVector::from_element(1, x[0])),
        matrix_field(|_, _| DMatrix::from_element(1, 1, 1.0)),
        z,
        Sector::new(5.0, None).unwrap(),
    );
    par.sample_monotonicity(&SampleBox::symmetric(1, 3.0), &SampleBox::symmetric(1, 3.0), 10_000, 3)
        .unwrap();
}

#[test]
fn simulation_is_deterministic() {
    let cl = scalar_scenario(&ScalarConfig::default()).unwrap().closed_loop;
    let a = cl.simulate(5.0, 1e-3).unwrap();
    let b = cl.simulate(5.0, 1e-3).unwrap();
    assert!(a == b);
}

#[test]
fn estimate_is_invariant_to_quadrature_base_point() {
    let plant = scalar_quadratic_plant(1.0);
    let goal = scalar_goal();
    let par = scalar_par(&goal);
    let x0 = DVector::from_element(1, 2.0);
    let th0 = DVector::from_element(1, 1.5);
    let run = |base: f64| {
        let est = FiniteFormEstimator::new(
            Gain::scalar(1, 1.0).unwrap(),
            psi_provider_quad(&goal, &par, 0, base),
            vec![0],
        )
        .unwrap();
        let cl = finite_form_loop("s", &plant, &goal, &par, &est, &x0, &th0, DEFAULT_DELTA1).unwrap();
        let tr = cl.simulate(3.0, 1e-2).unwrap();
        cl.theta_hat_series(&tr).unwrap()
    };
    let (a, b) = (run(0.0), run(-1.3));
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).amax() <= 1e-8, "{p} vs {q}");
    }
}
