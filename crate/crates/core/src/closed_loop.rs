//! Closed-loop assembly: a controller, plant and estimator channels folded
//! into one ODE with standard read-outs.

use std::fmt;
use std::sync::{Arc, Mutex};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::finform::{EstimatorBinding, FiniteFormEstimator};
use crate::goal::{control_for_target, GoalSpec, Parameterization};
use crate::numeric::{simulate, Integrand, OdeSystem, Probe, SimTrace};
use crate::plant::{PartitionedPlant, SimulatorKey};

/// Everything one evaluation of a closed loop produces.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopEval {
    pub derivative: DVector<f64>,
    pub control: f64,
    pub psi: f64,
    pub theta_hat: DVector<f64>,
}

type EvalFn = dyn Fn(f64, &DVector<f64>) -> Result<LoopEval> + Send + Sync;

/// A simulation-ready closed loop.
///
/// Standard channels recorded by [`ClosedLoop::simulate`]: `u` and `psi`
/// (with `∫u²` and `∫psi²` accumulators under the same names),
/// `theta_hat_1..d` and `delta_theta = |theta_hat - theta_ref|`.
#[derive(Clone)]
pub struct ClosedLoop {
    name: String,
    eval: Arc<EvalFn>,
    initial_state: DVector<f64>,
    state_names: Vec<String>,
    plant_dim: usize,
    reference_theta: DVector<f64>,
    extra_probes: Vec<Probe>,
    bindings: Vec<EstimatorBinding>,
}

impl fmt::Debug for ClosedLoop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosedLoop")
            .field("name", &self.name)
            .field("state_names", &self.state_names)
            .field("bindings", &self.bindings)
            .finish_non_exhaustive()
    }
}

impl ClosedLoop {
    pub fn new<F>(
        name: impl Into<String>,
        eval: F,
        initial_state: DVector<f64>,
        state_names: Vec<String>,
        plant_dim: usize,
        reference_theta: DVector<f64>,
    ) -> Result<Self>
    where
        F: Fn(f64, &DVector<f64>) -> Result<LoopEval> + Send + Sync + 'static,
    {
        if state_names.len() != initial_state.len() {
            return Err(Error::DimensionMismatch {
                context: "state names",
                expected: initial_state.len(),
                got: state_names.len(),
            });
        }
        if plant_dim > initial_state.len() {
            return Err(Error::InvalidArgument("plant dimension exceeds state dimension".into()));
        }
        Ok(Self {
            name: name.into(),
            eval: Arc::new(eval),
            initial_state,
            state_names,
            plant_dim,
            reference_theta,
            extra_probes: Vec::new(),
            bindings: Vec::new(),
        })
    }

    pub fn with_probe(mut self, probe: Probe) -> Self {
        self.extra_probes.push(probe);
        self
    }

    pub fn with_binding(mut self, binding: EstimatorBinding) -> Self {
        self.bindings.push(binding);
        self
    }

    pub fn with_initial_state(mut self, s0: DVector<f64>) -> Result<Self> {
        if s0.len() != self.initial_state.len() {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: self.initial_state.len(),
                got: s0.len(),
            });
        }
        self.initial_state = s0;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn plant_dim(&self) -> usize {
        self.plant_dim
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.initial_state
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn reference_theta(&self) -> &DVector<f64> {
        &self.reference_theta
    }

    pub fn bindings(&self) -> &[EstimatorBinding] {
        &self.bindings
    }

    pub fn evaluate(&self, t: f64, s: &DVector<f64>) -> Result<LoopEval> {
        (self.eval)(t, s)
    }

    pub fn system(&self) -> OdeSystem {
        let eval = self.eval.clone();
        OdeSystem::try_new(self.dim(), move |t, s| Ok(eval(t, s)?.derivative))
    }

    pub fn theta_names(&self) -> Vec<String> {
        (1..=self.reference_theta.len())
            .map(|i| format!("theta_hat_{i}"))
            .collect()
    }

    /// Standard channels followed by any extra probes.
    pub fn probes(&self) -> Vec<Probe> {
        self.probes_with(self.eval.clone())
    }

    fn probes_with(&self, eval: Arc<EvalFn>) -> Vec<Probe> {
        let mut channels = vec![
            ("u".to_string(), Integrand::Square),
            ("psi".to_string(), Integrand::Square),
            ("delta_theta".to_string(), Integrand::None),
        ];
        channels.extend(self.theta_names().into_iter().map(|n| (n, Integrand::None)));
        let width = channels.len();
        let reference = self.reference_theta.clone();
        let standard = Probe::multi(channels, move |t, s| match eval(t, s) {
            Ok(e) => {
                let mut out = vec![e.control, e.psi, (&e.theta_hat - &reference).norm()];
                out.extend(e.theta_hat.iter().copied());
                out
            }
            Err(_) => vec![f64::NAN; width],
        });
        let mut probes = vec![standard];
        probes.extend(self.extra_probes.iter().cloned());
        probes
    }

    /// Integrates with RK4. The probe read-out at each sample shares the
    /// evaluation of the first RK stage.
    pub fn simulate(&self, t_end: f64, h: f64) -> Result<SimTrace> {
        let cached = memoized(self.eval.clone());
        let rhs = cached.clone();
        let system = OdeSystem::try_new(self.dim(), move |t, s| Ok(rhs(t, s)?.derivative));
        simulate(&system, &self.initial_state, t_end, h, &self.probes_with(cached))
    }

    /// `theta_hat(t_k)` rebuilt from the recorded channels.
    pub fn theta_hat_series(&self, trace: &SimTrace) -> Result<Vec<DVector<f64>>> {
        let cols = self
            .theta_names()
            .iter()
            .map(|n| trace.output(n))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..trace.len())
            .map(|k| DVector::from_iterator(cols.len(), cols.iter().map(|c| c[k])))
            .collect())
    }

    /// Plant coordinates of every sample.
    pub fn plant_states(&self, trace: &SimTrace) -> Vec<DVector<f64>> {
        trace
            .states
            .iter()
            .map(|s| s.rows(0, self.plant_dim).into_owned())
            .collect()
    }

    /// Largest realization-identity residual over all bound estimators.
    pub fn sup_realization_residual(&self, trace: &SimTrace) -> Result<f64> {
        let mut worst = 0.0f64;
        for b in &self.bindings {
            worst = worst.max(b.sup_realization_residual(trace)?);
        }
        Ok(worst)
    }
}

type EvalCache = Mutex<Option<(f64, DVector<f64>, LoopEval)>>;

/// Wraps `eval` with a one-entry cache keyed by `(t, s)`.
fn memoized(eval: Arc<EvalFn>) -> Arc<EvalFn> {
    let cache: EvalCache = Mutex::new(None);
    Arc::new(move |t, s| {
        if let Ok(guard) = cache.lock() {
            if let Some((tc, sc, e)) = guard.as_ref() {
                if *tc == t && sc == s {
                    return Ok(e.clone());
                }
            }
        }
        let e = eval(t, s)?;
        if let Ok(mut guard) = cache.lock() {
            *guard = Some((t, s.clone(), e.clone()));
        }
        Ok(e)
    })
}

/// Finite-form loop on a partitioned plant with state `[x | theta_I]`.
///
/// The control targets `phi(psi) (1 + F(t))` when the estimator carries a
/// modulation `F`, so the error model matches the modulated adaptation law.
pub fn finite_form_loop(
    name: impl Into<String>,
    plant: &PartitionedPlant,
    goal: &GoalSpec,
    par: &Parameterization,
    estimator: &FiniteFormEstimator,
    x0: &DVector<f64>,
    theta_hat0: &DVector<f64>,
    delta1: f64,
) -> Result<ClosedLoop> {
    let n = plant.n();
    let d = par.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            context: "initial plant state",
            expected: n,
            got: x0.len(),
        });
    }
    if theta_hat0.len() != d || estimator.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "parameter estimate",
            expected: d,
            got: theta_hat0.len(),
        });
    }
    let theta_i0 = estimator.theta_i_initial(goal, par, x0, 0.0, theta_hat0)?;
    let mut s0 = DVector::zeros(n + d);
    s0.rows_mut(0, n).copy_from(x0);
    s0.rows_mut(n, d).copy_from(&theta_i0);

    let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    names.extend((1..=d).map(|i| format!("theta_i_{i}")));

    let reference = plant.theta_true(&SimulatorKey::new()).clone();
    let (p, g, a, e) = (plant.clone(), goal.clone(), par.clone(), estimator.clone());
    let eval = move |t: f64, s: &DVector<f64>| -> Result<LoopEval> {
        let x = s.rows(0, n).into_owned();
        let theta_i = s.rows(n, d).into_owned();
        let theta_hat = e.theta_hat(&g, &a, &x, &theta_i, t)?;
        let psi = g.psi(&x, t);
        let target = g.phi(psi) * e.modulation_factor(t);
        let u = control_for_target(&p, &g, &a, &x, &theta_hat, t, target, delta1)?;
        let dx = p.eval_dynamics(&x, u, t)?;
        let dth = e.theta_i_rhs(&g, &a, &p, &x, &theta_i, t, u)?;
        let mut ds = DVector::zeros(n + d);
        ds.rows_mut(0, n).copy_from(&dx);
        ds.rows_mut(n, d).copy_from(&dth);
        Ok(LoopEval {
            derivative: ds,
            control: u,
            psi,
            theta_hat,
        })
    };
    let binding = EstimatorBinding {
        name: "theta".into(),
        estimator: estimator.clone(),
        goal: goal.clone(),
        par: par.clone(),
        view: Some((0..n).collect()),
        theta_i: n..n + d,
    };
    Ok(ClosedLoop::new(name, eval, s0, names, n, reference)?.with_binding(binding))
}
