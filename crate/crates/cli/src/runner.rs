//! Builds closed loops from scenarios, runs them and evaluates checks.

use std::fmt::Write as _;

use nalgebra::DVector;

use finform::comparators::{backstepping_classic_loop, backstepping_tuning_loop};
use finform::embedding::{cascade_design, CascadeInit, EmbeddedVariant, EstimatorTarget, InitialEstimate};
use finform::metrics::{
    control_energy, exp_envelope_check, final_decile_growth, l2_bounds_check, linf_bound_check,
    param_distance_monotone, pe_check, settling_time, sup_abs,
};
use finform::plant::example_cascade_linear;
use finform::scenarios::{
    embedding_scenario, example_cascade_design, scalar_scenario, tracking_scenario, CascadeExample, PotentialRoute,
    ScalarConfig,
};
use finform::{BoundContext, BoundReport, ClosedLoop, SimTrace, TargetDynamics};

use crate::config::{
    CheckSpec, ControllerKind, ObserverTargetKind, PlantKind, RouteKind, Scenario, TargetKind, VariantKind,
};
use crate::error::{CliError, ExitStatus};

/// A closed loop with the bound context its checks need, when known.
#[derive(Clone, Debug)]
pub struct Built {
    pub closed_loop: ClosedLoop,
    pub bounds: Option<BoundContext>,
}

/// Result of one scenario run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub scenario: Scenario,
    pub loop_name: String,
    pub state_names: Vec<String>,
    pub plant_dim: usize,
    pub trace: SimTrace,
    pub reports: Vec<BoundReport>,
    /// Time of the first non-finite state, if the run blew up.
    pub blowup: Option<f64>,
}

impl RunOutcome {
    pub fn exit_status(&self) -> ExitStatus {
        if self.blowup.is_some() {
            ExitStatus::BlowUp
        } else if self.reports.iter().any(BoundReport::failed) {
            ExitStatus::CheckFailed
        } else {
            ExitStatus::Ok
        }
    }

    /// One header block followed by one line per report.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let sc = &self.scenario;
        let _ = writeln!(s, "scenario {}", sc.id);
        let _ = writeln!(s, "controller {}", self.loop_name);
        let _ = writeln!(
            s,
            "horizon {} step {} samples {}",
            sc.horizon,
            sc.step,
            self.trace.len()
        );
        if let Some(e) = control_energy(&self.trace) {
            let _ = writeln!(s, "control_energy {e:.6}");
        }
        if let Some(t) = self.blowup {
            let _ = writeln!(s, "blowup at t = {t}");
        }
        for r in &self.reports {
            let _ = writeln!(s, "{r}");
        }
        let verdict = match self.exit_status() {
            ExitStatus::Ok => "PASS",
            ExitStatus::BlowUp => "BLOWUP",
            _ => "FAIL",
        };
        let _ = writeln!(s, "result {verdict}");
        s
    }
}

fn target_of(kind: Option<TargetKind>, k: f64) -> TargetDynamics {
    match kind.unwrap_or(TargetKind::Linear) {
        TargetKind::Linear => TargetDynamics::Linear { k },
        TargetKind::Cubic => TargetDynamics::Cubic { k },
        TargetKind::Tanh => TargetDynamics::Tanh { k },
    }
}

/// Assembles the closed loop a scenario describes.
pub fn build(sc: &Scenario) -> Result<Built, CliError> {
    sc.validate()?;
    let c = &sc.controller;
    let built = match (sc.plant.kind, c.kind) {
        (PlantKind::Scalar, _) => {
            let cfg = ScalarConfig {
                theta: sc.plant.theta.unwrap_or(1.0),
                target: target_of(c.target, c.k.unwrap_or(1.0)),
                gamma: c.gamma.unwrap_or(1.0),
                x0: sc.ic("x", 2.0),
                theta_hat0: sc.ic("theta_hat", 1.5),
                disturbance: sc.plant.disturbance.as_ref().map(|s| s.signal()),
                adaptation_disturbance: sc.plant.adaptation_disturbance.as_ref().map(|s| s.signal()),
                leak: c.leak.unwrap_or(0.0),
                modulation: c.modulation.map(|f| finform::fields::signal(move |_| f)),
            };
            let s = scalar_scenario(&cfg)?;
            Built {
                closed_loop: s.closed_loop,
                bounds: s.bounds,
            }
        }
        (PlantKind::Tracking, _) => {
            let s = tracking_scenario(c.k.unwrap_or(1.0), c.gamma.unwrap_or(1.0))?;
            Built {
                closed_loop: s.closed_loop,
                bounds: s.bounds,
            }
        }
        (PlantKind::Embedding, _) => {
            let variant = match c.variant.unwrap_or(VariantKind::PsiMatched) {
                VariantKind::AlphaIndependent => EmbeddedVariant::AlphaIndependent,
                VariantKind::PsiMatched => EmbeddedVariant::PsiMatched,
                VariantKind::Leaky => EmbeddedVariant::Leaky {
                    lambda: c.leak.unwrap_or(0.0),
                },
            };
            let s = embedding_scenario(variant)?;
            Built {
                closed_loop: s.closed_loop,
                bounds: s.bounds,
            }
        }
        (_, ControllerKind::BacksteppingClassic) => {
            let s0 = DVector::from_vec(vec![
                sc.ic("x1", 2.0),
                sc.ic("x2", 0.2),
                sc.ic("theta_hat_1", 3.0),
                sc.ic("theta_hat_2", -2.0),
                sc.ic("theta_hat_3", -2.0),
                sc.ic("theta_hat_4", 3.0),
            ]);
            Built {
                closed_loop: backstepping_classic_loop(&example_cascade_linear(), s0)?,
                bounds: None,
            }
        }
        (_, ControllerKind::BacksteppingTuning) => {
            let s0 = DVector::from_vec(vec![
                sc.ic("x1", 2.0),
                sc.ic("x2", 0.2),
                sc.ic("theta_hat_1", 3.0),
                sc.ic("theta_hat_2", -2.0),
                sc.ic("theta_hat_3", -2.0),
            ]);
            Built {
                closed_loop: backstepping_tuning_loop(&example_cascade_linear(), s0)?,
                bounds: None,
            }
        }
        (plant, _) => {
            let (example, name) = if plant == PlantKind::CascadeTanh {
                (CascadeExample::Tanh, "finform_tanh")
            } else {
                (CascadeExample::Linear, "finform")
            };
            let route = match c.route.unwrap_or(RouteKind::ClosedForm) {
                RouteKind::ClosedForm => PotentialRoute::ClosedForm,
                RouteKind::Quadrature => PotentialRoute::Quadrature,
            };
            let target = match c.observer_target.unwrap_or(ObserverTargetKind::Unit) {
                ObserverTargetKind::Unit => EstimatorTarget::Unit,
                ObserverTargetKind::Damped => EstimatorTarget::Damped,
            };
            let mut design = example_cascade_design(example, route, target)?;
            if let Some(g) = c.gamma {
                design.gains = vec![g; design.gains.len()];
                for o in &mut design.observers {
                    o.gain = g;
                }
            }
            if let Some(k) = c.k {
                design.targets = vec![TargetDynamics::linear(k); design.targets.len()];
            }
            if let (Some(seed), Some(s)) = (sc.seed, design.sampling.as_mut()) {
                s.seed = seed;
            }
            let init = CascadeInit {
                x0: vec![sc.ic("x1", 2.0), sc.ic("x2", 0.2)],
                xi0: sc.initial_conditions.get("xi").map(|v| vec![*v]),
                controller: vec![
                    InitialEstimate::Estimate(DVector::from_element(1, sc.ic("theta_hat_1", 3.0))),
                    InitialEstimate::Estimate(DVector::from_vec(vec![
                        sc.ic("theta_hat_2", -2.0),
                        sc.ic("theta_hat_3", -2.0),
                    ])),
                ],
                observers: vec![InitialEstimate::Integral(DVector::zeros(1))],
            };
            Built {
                closed_loop: cascade_design(name, &design, &init)?,
                bounds: None,
            }
        }
    };
    Ok(built)
}

/// Runs a scenario. A blow-up is reported in the outcome with the partial
/// trace; other failures are errors.
pub fn run(sc: &Scenario) -> Result<RunOutcome, CliError> {
    let built = build(sc)?;
    let cl = &built.closed_loop;
    let (trace, blowup) = match cl.simulate(sc.horizon, sc.step) {
        Ok(tr) => (tr, None),
        Err(finform::Error::NonFiniteState { t, trace }) => (trace.map(|b| *b).unwrap_or_default(), Some(t)),
        Err(e) => return Err(e.into()),
    };
    let reports = if blowup.is_some() {
        Vec::new()
    } else {
        evaluate_checks(&sc.checks, &built, &trace)
    };
    Ok(RunOutcome {
        scenario: sc.clone(),
        loop_name: cl.name().to_string(),
        state_names: cl.state_names().to_vec(),
        plant_dim: cl.plant_dim(),
        trace,
        reports,
        blowup,
    })
}

fn check_name(c: &CheckSpec) -> String {
    match c {
        CheckSpec::L2Bounds { .. } => "l2_bounds".into(),
        CheckSpec::LinfBound { .. } => "linf_bound".into(),
        CheckSpec::ExpEnvelope { .. } => "exp_envelope".into(),
        CheckSpec::ParamDistance { .. } => "param_distance_monotone".into(),
        CheckSpec::PersistentExcitation { .. } => "persistent_excitation".into(),
        CheckSpec::ParamConvergence { .. } => "param_convergence".into(),
        CheckSpec::ControlEnergy { .. } => "control_energy".into(),
        CheckSpec::FinalPsi { .. } => "final_psi".into(),
        CheckSpec::SettlesAfter { .. } => "settles_after".into(),
        CheckSpec::SettlesBefore { .. } => "settles_before".into(),
        CheckSpec::AccumulatorGrowth { channel, .. } => format!("growth_{channel}"),
        CheckSpec::Realization { .. } => "realization_identity".into(),
        CheckSpec::Bounded { .. } => "bounded".into(),
    }
}

fn retol(r: BoundReport, tol: f64) -> BoundReport {
    if r.is_applicable() {
        BoundReport::compare(r.name, r.lhs, r.rhs, tol)
    } else {
        r
    }
}

/// Evaluates every check on a completed trace. Traces shorter than three
/// samples make every check not applicable.
pub fn evaluate_checks(checks: &[CheckSpec], built: &Built, trace: &SimTrace) -> Vec<BoundReport> {
    if trace.len() < 3 {
        let why = format!("trace has {} samples", trace.len());
        return checks
            .iter()
            .map(|c| BoundReport::not_applicable(check_name(c), why.clone()))
            .collect();
    }
    checks.iter().flat_map(|c| evaluate(c, built, trace)).collect()
}

fn evaluate(check: &CheckSpec, built: &Built, trace: &SimTrace) -> Vec<BoundReport> {
    let cl = &built.closed_loop;
    let name = check_name(check);
    let times = &trace.times;
    let psi = trace.output("psi").unwrap_or(&[]);
    let no_ctx = || {
        vec![BoundReport::not_applicable(
            name.clone(),
            "no bound context for this plant",
        )]
    };
    match check {
        CheckSpec::L2Bounds { tol } => match &built.bounds {
            Some(ctx) => l2_bounds_check(times, psi, ctx)
                .into_iter()
                .map(|r| retol(r, *tol))
                .collect(),
            None => no_ctx(),
        },
        CheckSpec::LinfBound { tol } => match &built.bounds {
            Some(ctx) => linf_bound_check(times, psi, ctx)
                .into_iter()
                .map(|r| retol(r, *tol))
                .collect(),
            None => no_ctx(),
        },
        CheckSpec::ExpEnvelope { tol } => match &built.bounds {
            Some(ctx) => vec![retol(exp_envelope_check(times, psi, ctx), *tol)],
            None => no_ctx(),
        },
        CheckSpec::ParamDistance { tol } => match (&built.bounds, cl.theta_hat_series(trace)) {
            (Some(ctx), Ok(th)) => vec![retol(param_distance_monotone(times, &th, ctx), *tol)],
            _ => no_ctx(),
        },
        CheckSpec::PersistentExcitation { window, delta } => match cl.bindings().first() {
            Some(b) => vec![pe_check(times, &b.regressor_series(trace), *window, *delta)],
            None => vec![BoundReport::not_applicable(name, "no finite-form estimator")],
        },
        CheckSpec::ParamConvergence { ratio } => match trace.output("delta_theta") {
            Ok(d) => vec![BoundReport::compare(name, d[d.len() - 1], ratio * d[0], 0.0)],
            Err(_) => vec![BoundReport::not_applicable(name, "no parameter error channel")],
        },
        CheckSpec::ControlEnergy { reference, rel_tol } => match control_energy(trace) {
            Some(e) => vec![BoundReport::compare(
                name,
                (e - reference).abs() / reference,
                *rel_tol,
                0.0,
            )],
            None => vec![BoundReport::not_applicable(name, "no control channel")],
        },
        CheckSpec::FinalPsi { tol } => vec![BoundReport::compare(name, psi[psi.len() - 1].abs(), *tol, 0.0)],
        CheckSpec::SettlesAfter { tol, after } => {
            // a run that never settles counts as settling at the horizon
            let ts = settling_time(times, psi, *tol).unwrap_or(trace.t_end());
            vec![BoundReport::compare(name, *after, ts, 0.0)]
        }
        CheckSpec::SettlesBefore { tol, before } => {
            let ts = settling_time(times, psi, *tol).unwrap_or(f64::INFINITY);
            vec![BoundReport::compare(name, ts, *before, 0.0)]
        }
        CheckSpec::AccumulatorGrowth { channel, tol } => match trace.accumulator(channel) {
            Ok(acc) => match final_decile_growth(times, acc) {
                Some(g) => vec![BoundReport::compare(name, g, *tol, 0.0)],
                None => vec![BoundReport::not_applicable(name, "empty accumulator")],
            },
            Err(_) => vec![BoundReport::not_applicable(name, format!("no accumulator `{channel}`"))],
        },
        CheckSpec::Realization { tol } => {
            if cl.bindings().is_empty() {
                return vec![BoundReport::not_applicable(name, "no finite-form estimator")];
            }
            match cl.sup_realization_residual(trace) {
                Ok(r) => vec![BoundReport::compare(name, r, *tol, 0.0)],
                Err(e) => vec![BoundReport::not_applicable(name, e.to_string())],
            }
        }
        CheckSpec::Bounded { ceiling } => {
            let th = cl.theta_hat_series(trace).unwrap_or_default();
            let x = cl.plant_states(trace);
            let worst = [
                sup_abs(psi),
                th.iter().map(|v| v.norm()).fold(0.0, f64::max),
                x.iter().map(|v| v.norm()).fold(0.0, f64::max),
            ]
            .into_iter()
            .fold(0.0, f64::max);
            vec![BoundReport::compare(name, worst, *ceiling, 0.0)]
        }
    }
}
