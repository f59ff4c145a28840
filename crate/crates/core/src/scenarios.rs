//! Built-in closed loops: scalar bound scenarios, a tracking scenario with
//! persistent excitation, the two-stage cascade examples with their
//! backstepping comparators, and an auxiliary-system embedding example.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::closed_loop::{finite_form_loop, ClosedLoop};
use crate::comparators::{backstepping_classic_loop, backstepping_tuning_loop};
use crate::embedding::{
    cascade_design, embedded_estimator, embedded_loop, linear_extension, CascadeDesign, CascadeInit, EmbeddedPsi,
    EmbeddedVariant, EstimatorTarget, InitialEstimate, LinearExtension, ObserverStage, OutputGoal, StageModel,
    StagePsi, StageSampling,
};
use crate::error::Result;
use crate::fields::{matrix_field, scalar_field, vector_field, Signal};
use crate::finform::{closed_form_scalar, FiniteFormEstimator, Gain, PsiProvider};
use crate::goal::{GoalSpec, Parameterization, Sector, TargetDynamics, DEFAULT_DELTA1};
use crate::metrics::BoundContext;
use crate::numeric::SampleBox;
use crate::plant::{
    example_cascade_linear, example_cascade_tanh, scalar_quadratic_plant, scalar_two_parameter_plant, LipschitzFactors,
    PartitionedPlant, SimulatorKey,
};

/// A closed loop plus the data its bound checks need, when they apply.
#[derive(Clone, Debug)]
pub struct ScenarioLoop {
    pub closed_loop: ClosedLoop,
    pub bounds: Option<BoundContext>,
}

/// Scalar scenario `x' = theta x² + u + eps(t)`, `psi = x - 1`.
#[derive(Clone)]
pub struct ScalarConfig {
    pub theta: f64,
    pub target: TargetDynamics,
    pub gamma: f64,
    pub x0: f64,
    pub theta_hat0: f64,
    pub disturbance: Option<Signal>,
    /// Additive disturbance on the adaptation law.
    pub adaptation_disturbance: Option<Signal>,
    pub leak: f64,
    pub modulation: Option<Signal>,
}

impl Default for ScalarConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            target: TargetDynamics::linear(1.0),
            gamma: 1.0,
            x0: 2.0,
            theta_hat0: 1.5,
            disturbance: None,
            adaptation_disturbance: None,
            leak: 0.0,
            modulation: None,
        }
    }
}

impl std::fmt::Debug for ScalarConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarConfig")
            .field("theta", &self.theta)
            .field("gamma", &self.gamma)
            .field("x0", &self.x0)
            .field("theta_hat0", &self.theta_hat0)
            .field("leak", &self.leak)
            .finish_non_exhaustive()
    }
}

/// `psi = x - 1`, `alpha = x²`, `Psi = 2x³/3 - x²`.
pub fn scalar_scenario(cfg: &ScalarConfig) -> Result<ScenarioLoop> {
    let mut plant = scalar_quadratic_plant(cfg.theta);
    if let Some(eps) = &cfg.disturbance {
        plant = plant.with_disturbance(eps.clone());
    }
    if let Some(delta) = &cfg.adaptation_disturbance {
        let delta = delta.clone();
        plant = plant.with_adaptation_disturbance(Arc::new(move |t| DVector::from_element(1, delta(t))));
    }
    let goal = GoalSpec::new(
        scalar_field(|x, _| x[0] - 1.0),
        vector_field(|_, _| DVector::from_element(1, 1.0)),
        cfg.target.clone(),
    );
    let par = Parameterization::from_plant(
        &plant,
        &goal,
        vector_field(|x, _| DVector::from_element(1, x[0] * x[0])),
        matrix_field(|x, _| DMatrix::from_element(1, 1, 2.0 * x[0])),
        Sector::unit(),
    );
    let provider = closed_form_scalar(
        |x, _| 2.0 / 3.0 * x[0].powi(3) - x[0] * x[0],
        |x, _| DVector::from_element(1, 2.0 * x[0] * x[0] - 2.0 * x[0]),
    );
    let gain = Gain::scalar(1, cfg.gamma)?;
    let mut est = FiniteFormEstimator::new(gain.clone(), provider, vec![0])?.with_leakage(cfg.leak)?;
    if let Some(f) = &cfg.modulation {
        est = est.with_modulation(f.clone());
    }
    let x0 = DVector::from_element(1, cfg.x0);
    let th0 = DVector::from_element(1, cfg.theta_hat0);
    let closed_loop = finite_form_loop("scalar", &plant, &goal, &par, &est, &x0, &th0, DEFAULT_DELTA1)?;
    Ok(ScenarioLoop {
        closed_loop,
        bounds: Some(BoundContext {
            target: cfg.target.clone(),
            gain,
            d: 1.0,
            theta_star: DVector::from_element(1, cfg.theta),
            theta_hat0: th0,
            psi0: cfg.x0 - 1.0,
            leak: cfg.leak,
            disturbed: plant.has_disturbances(),
            psi_limit: 1e8,
        }),
    })
}

/// Tracking `r(t) = sin t` on `x' = θ1 x + θ2 x² + u` with `θ = (-1, 1)`,
/// `alpha = (x, x²)`. The regressor is persistently exciting along the
/// closed-loop trajectory.
pub fn tracking_scenario(k: f64, gamma: f64) -> Result<ScenarioLoop> {
    let plant = scalar_two_parameter_plant(-1.0, 1.0);
    let goal = GoalSpec::new(
        scalar_field(|x, t| x[0] - t.sin()),
        vector_field(|_, _| DVector::from_element(1, 1.0)),
        TargetDynamics::linear(k),
    )
    .with_time_derivative(scalar_field(|_, t| -t.cos()));
    let par = Parameterization::from_plant(
        &plant,
        &goal,
        vector_field(|x, _| DVector::from_vec(vec![x[0], x[0] * x[0]])),
        matrix_field(|x, _| DMatrix::from_column_slice(2, 1, &[1.0, 2.0 * x[0]])),
        Sector::unit(),
    );
    let provider = PsiProvider::closed_form(
        2,
        vector_field(|x, t| {
            let (x, r) = (x[0], t.sin());
            DVector::from_vec(vec![x * x / 2.0 - r * x, 2.0 / 3.0 * x.powi(3) - r * x * x])
        }),
        matrix_field(|x, t| {
            let (x, r) = (x[0], t.sin());
            DMatrix::from_column_slice(2, 1, &[x - r, 2.0 * x * x - 2.0 * r * x])
        }),
        Some(vector_field(|x, t| {
            let (x, rd) = (x[0], t.cos());
            DVector::from_vec(vec![-rd * x, -rd * x * x])
        })),
    );
    let gain = Gain::scalar(2, gamma)?;
    let est = FiniteFormEstimator::new(gain.clone(), provider, vec![0])?;
    let x0 = DVector::from_element(1, 0.0);
    let th0 = DVector::zeros(2);
    let closed_loop = finite_form_loop("tracking", &plant, &goal, &par, &est, &x0, &th0, DEFAULT_DELTA1)?;
    Ok(ScenarioLoop {
        closed_loop,
        bounds: Some(BoundContext {
            target: TargetDynamics::linear(k),
            gain,
            d: 1.0,
            theta_star: DVector::from_vec(vec![-1.0, 1.0]),
            theta_hat0: th0,
            psi0: 0.0,
            leak: 0.0,
            disturbed: false,
            psi_limit: 1e8,
        }),
    })
}

/// Second-stage nonlinearity of the two-stage example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CascadeExample {
    /// `theta_1 x1 + theta_2 x2`.
    Linear,
    /// `5 tanh(theta_1 x1 + theta_2 x2)`.
    Tanh,
}

/// How the stage potentials are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PotentialRoute {
    ClosedForm,
    Quadrature,
}

fn first_stage_model() -> StageModel {
    StageModel::new(
        1,
        |a, th| a[0] * a[0] * th[0],
        |a| DVector::from_element(1, a[0] * a[0]),
        |a| DMatrix::from_element(1, 1, 2.0 * a[0]),
        Sector::unit(),
    )
    .with_gradients(
        |a, th| DVector::from_element(1, 2.0 * a[0] * th[0]),
        |a, _| DVector::from_element(1, a[0] * a[0]),
    )
}

fn second_stage_model(example: CascadeExample) -> Result<StageModel> {
    let alpha = |a: &[f64]| DVector::from_vec(vec![a[0], a[1]]);
    let jac = |_: &[f64]| DMatrix::identity(2, 2);
    Ok(match example {
        CascadeExample::Linear => StageModel::new(2, |a, th| a[0] * th[0] + a[1] * th[1], alpha, jac, Sector::unit())
            .with_gradients(
                |_, th| DVector::from_vec(vec![th[0], th[1]]),
                |a, _| DVector::from_vec(vec![a[0], a[1]]),
            ),
        CascadeExample::Tanh => {
            let sech2 = |s: f64| 1.0 / s.cosh().powi(2);
            StageModel::new(
                2,
                |a, th| 5.0 * (a[0] * th[0] + a[1] * th[1]).tanh(),
                alpha,
                jac,
                Sector::new(5.0, None)?,
            )
            .with_gradients(
                move |a, th| DVector::from_vec(vec![th[0], th[1]]) * (5.0 * sech2(a[0] * th[0] + a[1] * th[1])),
                move |a, th| DVector::from_vec(vec![a[0], a[1]]) * (5.0 * sech2(a[0] * th[0] + a[1] * th[1])),
            )
        }
    })
}

/// Closed-form potentials over `[x1, x2, ξ, θ1I, θξI, θ2I(2)]`.
fn closed_form_potentials() -> (PsiProvider, PsiProvider, PsiProvider) {
    let ctrl0 = closed_form_scalar(
        |s, _| 2.0 / 3.0 * s[0].powi(3) - s[0] * s[0],
        |s, _| {
            let mut g = DVector::zeros(7);
            g[0] = 2.0 * s[0] * s[0] - 2.0 * s[0];
            g
        },
    );
    let obs = closed_form_scalar(
        |s, _| 2.0 / 3.0 * s[0].powi(3) - s[2] * s[0] * s[0],
        |s, _| {
            let mut g = DVector::zeros(7);
            g[0] = 2.0 * s[0] * s[0] - 2.0 * s[2] * s[0];
            g[2] = -s[0] * s[0];
            g
        },
    );
    let virt = |s: &DVector<f64>| -(s[2] - 1.0) - s[2].powi(5) / 3.0 - s[3] * s[2] * s[2];
    let ctrl1 = PsiProvider::closed_form(
        2,
        vector_field(move |s, _| DVector::from_vec(vec![0.0, s[1] * s[1] / 2.0 - virt(s) * s[1]])),
        matrix_field(move |s, _| {
            let (x2, xi, z) = (s[1], s[2], s[3]);
            let mut g = DMatrix::zeros(2, 7);
            g[(1, 1)] = x2 - virt(s);
            g[(1, 2)] = (1.0 + 5.0 / 3.0 * xi.powi(4) + 2.0 * z * xi) * x2;
            g[(1, 3)] = xi * xi * x2;
            g
        }),
        None,
    );
    (ctrl0, obs, ctrl1)
}

/// Upper factor for the virtual-control substitution of the first stage.
fn substitution_factor() -> LipschitzFactors {
    LipschitzFactors::new(Arc::new(|x: &[f64], xp: &[f64], z: &[f64]| {
        let (a, b) = (x[0], xp[0]);
        1.0 + (a + b) * z[0] + (a.powi(4) + a.powi(3) * b + a * a * b * b + a * b.powi(3) + b.powi(4)) / 3.0
    }))
}

/// Finite-form design of the two-stage example regulating `x1` to 1.
pub fn example_cascade_design(
    example: CascadeExample,
    route: PotentialRoute,
    observer_target: EstimatorTarget,
) -> Result<CascadeDesign> {
    let plant = match example {
        CascadeExample::Linear => example_cascade_linear(),
        CascadeExample::Tanh => example_cascade_tanh(),
    };
    let (ctrl_psi, obs_psi) = match route {
        PotentialRoute::ClosedForm => {
            let (c0, o, c1) = closed_form_potentials();
            (
                vec![StagePsi::ClosedForm(c0), StagePsi::ClosedForm(c1)],
                StagePsi::ClosedForm(o),
            )
        }
        PotentialRoute::Quadrature => (
            vec![
                StagePsi::Quadrature { base: Some(0.0) },
                StagePsi::Quadrature { base: Some(0.0) },
            ],
            StagePsi::Quadrature { base: Some(0.0) },
        ),
    };
    Ok(CascadeDesign {
        plant,
        goal: OutputGoal::setpoint(1.0),
        targets: vec![TargetDynamics::linear(1.0), TargetDynamics::linear(1.0)],
        models: vec![first_stage_model(), second_stage_model(example)?],
        gains: vec![1.0, 1.0],
        controller_psi: ctrl_psi,
        observers: vec![ObserverStage {
            model: first_stage_model(),
            gain: 1.0,
            psi: obs_psi,
        }],
        observer_target,
        factors: substitution_factor(),
        sampling: Some(StageSampling {
            arg_boxes: vec![SampleBox::symmetric(1, 3.0), SampleBox::symmetric(2, 3.0)],
            theta_boxes: vec![SampleBox::symmetric(1, 3.0), SampleBox::symmetric(2, 3.0)],
            draws: 200,
            seed: 7,
        }),
        delta1: DEFAULT_DELTA1,
    })
}

/// `x(0) = (2, 0.2)`, `ξ(0) = x1(0)`, `θ̂1(0) = 3`, `θ̂2(0) = (-2, -2)`, and
/// a zero observer integral state.
pub fn example_cascade_init() -> CascadeInit {
    CascadeInit {
        x0: vec![2.0, 0.2],
        xi0: None,
        controller: vec![
            InitialEstimate::Estimate(DVector::from_element(1, 3.0)),
            InitialEstimate::Estimate(DVector::from_vec(vec![-2.0, -2.0])),
        ],
        observers: vec![InitialEstimate::Integral(DVector::zeros(1))],
    }
}

/// Start near the setpoint, `x(0) = (1.2, 0)`, `θ̂1 = 1`, `θ̂2 = (0.5, 0)`.
/// Keeps the observer gain small enough for RK4 at `h = 4e-3`.
pub fn near_setpoint_cascade_init() -> CascadeInit {
    CascadeInit {
        x0: vec![1.2, 0.0],
        xi0: None,
        controller: vec![
            InitialEstimate::Estimate(DVector::from_element(1, 1.0)),
            InitialEstimate::Estimate(DVector::from_vec(vec![0.5, 0.0])),
        ],
        observers: vec![InitialEstimate::Integral(DVector::zeros(1))],
    }
}

/// Finite-form loop of the two-stage example with closed-form potentials.
pub fn example_cascade_loop(example: CascadeExample) -> Result<ClosedLoop> {
    let design = example_cascade_design(example, PotentialRoute::ClosedForm, EstimatorTarget::Unit)?;
    let name = match example {
        CascadeExample::Linear => "finform",
        CascadeExample::Tanh => "finform_tanh",
    };
    cascade_design(name, &design, &example_cascade_init())
}

/// Overparameterized backstepping on the linear two-stage example from
/// `x(0) = (2, 0.2)`, `θ̂ = (3, -2, -2, 3)`.
pub fn example_classic_loop() -> Result<ClosedLoop> {
    backstepping_classic_loop(
        &example_cascade_linear(),
        DVector::from_vec(vec![2.0, 0.2, 3.0, -2.0, -2.0, 3.0]),
    )
}

/// Tuning-functions backstepping on the linear two-stage example.
pub fn example_tuning_loop() -> Result<ClosedLoop> {
    backstepping_tuning_loop(
        &example_cascade_linear(),
        DVector::from_vec(vec![2.0, 0.2, 3.0, -2.0, -2.0]),
    )
}

/// Plant `x1' = -x1 + θ1`, `x2' = θ2 x1² + u` with `θ = (1, 1)`.
pub fn embedding_plant() -> PartitionedPlant {
    PartitionedPlant::new(
        2,
        0,
        DVector::from_vec(vec![1.0, 1.0]),
        |x| DVector::from_vec(vec![-x[0], 0.0]),
        |_| DVector::from_vec(vec![0.0, 1.0]),
        |x, th| DVector::from_vec(vec![th[0], th[1] * x[0] * x[0]]),
    )
    .expect("valid partition")
}

/// Embedding example: `psi = x2`, `alpha = x1²`, with `x1` replaced by a
/// linear-extension observer. Starts from `x = (0.5, 1)`, `θ̂2(0) = 0`.
pub fn embedding_scenario(variant: EmbeddedVariant) -> Result<ScenarioLoop> {
    let plant = embedding_plant();
    let goal = GoalSpec::new(
        scalar_field(|x, _| x[1]),
        vector_field(|_, _| DVector::from_vec(vec![0.0, 1.0])),
        TargetDynamics::linear(1.0),
    );
    let par = Parameterization::new(
        1,
        vector_field(|x, _| DVector::from_element(1, x[0] * x[0])),
        matrix_field(|x, _| DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 0.0])),
        Arc::new(|x, th, _| th[0] * x[0] * x[0]),
        Sector::unit(),
    );
    let x_box = SampleBox::symmetric(2, 2.0);
    let spec = LinearExtension {
        replaced: vec![0],
        eta: Arc::new(|_| DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
        lambda1: Arc::new(|x, xi, _| 2.0 * (x[0] + xi[0]).abs()),
        lambda2: Arc::new(|_, _, _| 1.0),
        gamma1: 1.0,
    };
    let x0 = DVector::from_vec(vec![0.5, 1.0]);
    let aux = linear_extension(&plant, spec, &x_box, 200, 11)?.with_xi0(DVector::from_vec(vec![x0[0], 0.0, 0.0]))?;
    let q_box = SampleBox::symmetric(5, 2.0);
    let psi = match variant {
        EmbeddedVariant::AlphaIndependent => None,
        _ => Some(EmbeddedPsi::Quadrature { axis: 1, base: 0.0 }),
    };
    let gain = Gain::scalar(1, 1.0)?;
    let emb = embedded_estimator(variant, &plant, &goal, &par, &aux, gain.clone(), psi, &q_box, 200, 13)?;
    let th0 = DVector::zeros(1);
    let theta2 = plant.theta_true(&SimulatorKey::new())[1];
    let closed_loop = embedded_loop(
        variant.label(),
        &plant,
        &goal,
        &par,
        &aux,
        &emb,
        &x0,
        &th0,
        DVector::from_element(1, theta2),
        DEFAULT_DELTA1,
    )?;
    Ok(ScenarioLoop {
        closed_loop,
        bounds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cascade_initial_integrals() {
        let cl = example_cascade_loop(CascadeExample::Linear).unwrap();
        let s0 = cl.initial_state();
        // ψ2(0) = 0.2 + 2 - 1 + 32/3 + 4/3 = 13.2
        let expect = [2.0, 0.2, 2.0, 1.0 / 3.0, 0.0, -2.0 - 13.2 * 2.0, -2.02];
        for (a, b) in s0.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let th = cl.evaluate(0.0, s0).unwrap().theta_hat;
        assert!((th - DVector::from_vec(vec![3.0, -2.0, -2.0])).amax() < 1e-12);
    }

    #[test]
    fn scalar_initial_estimate() {
        let sc = scalar_scenario(&ScalarConfig::default()).unwrap();
        let ev = sc.closed_loop.evaluate(0.0, sc.closed_loop.initial_state()).unwrap();
        assert!((ev.theta_hat[0] - 1.5).abs() < 1e-12);
        // u = -ψ - θ̂ x² = -1 - 6
        assert!((ev.control + 7.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_variants_build() {
        for v in [
            EmbeddedVariant::AlphaIndependent,
            EmbeddedVariant::PsiMatched,
            EmbeddedVariant::Leaky { lambda: 0.1 },
        ] {
            let sc = embedding_scenario(v).unwrap();
            assert_eq!(sc.closed_loop.dim(), 6);
        }
    }
}
