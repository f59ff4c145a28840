//! Observer stacks and the finite-form cascade design for strict-feedback
//! plants.
//!
//! Observer stage `i` (0-based) reads `a_i = (xi_0 .. xi_{i-1}, x_i)` and
//! runs `xi_i' = gain_i (x_i - xi_i) + f_i(a_i, theta_xi_i) + beta_i` with
//! `gain_i = F̄² + Σ D̄² + 1` and `beta_i = x_{i+1}` (or `u` on the last
//! plant stage).

use std::fmt;
use std::ops::Range;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::closed_loop::{ClosedLoop, LoopEval};
use crate::error::{Error, Result};
use crate::fields::{MatrixField, ScalarField, UncertainScalar, VectorField};
use crate::finform::{derivative5, EstimatorBinding, FiniteFormEstimator, Gain, PsiProvider};
use crate::goal::{GoalSpec, Parameterization, Sector, TargetDynamics};
use crate::numeric::{gauss_legendre_adaptive, seeded_rng, Probe, SampleBox};
use crate::plant::{CascadePlant, LipschitzFactors, SimulatorKey};

const QUAD_TOL: f64 = 1e-13;

type ArgsScalar = Arc<dyn Fn(&[f64], &DVector<f64>) -> f64 + Send + Sync>;
type ArgsVector = Arc<dyn Fn(&[f64], &DVector<f64>) -> DVector<f64> + Send + Sync>;
type Regressor = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type RegressorJacobian = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
type Scalar1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type Context = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type LastEval = Arc<Mutex<Option<(DVector<f64>, VirtualValue)>>>;

/// Designer's model of one cascade stage, `f_i(a, theta) = alpha_i(a)·theta`
/// or any function monotone in `theta` along `alpha_i`.
#[derive(Clone)]
pub struct StageModel {
    theta_dim: usize,
    f: ArgsScalar,
    f_grad_args: Option<ArgsVector>,
    f_grad_theta: Option<ArgsVector>,
    alpha: Regressor,
    alpha_jacobian: RegressorJacobian,
    sector: Sector,
}

impl fmt::Debug for StageModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageModel")
            .field("theta_dim", &self.theta_dim)
            .field("sector", &self.sector)
            .finish_non_exhaustive()
    }
}

impl StageModel {
    pub fn new<F, A, J>(theta_dim: usize, f: F, alpha: A, alpha_jacobian: J, sector: Sector) -> Self
    where
        F: Fn(&[f64], &DVector<f64>) -> f64 + Send + Sync + 'static,
        A: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            theta_dim,
            f: Arc::new(f),
            f_grad_args: None,
            f_grad_theta: None,
            alpha: Arc::new(alpha),
            alpha_jacobian: Arc::new(alpha_jacobian),
            sector,
        }
    }

    /// Partial derivatives of `f` in its arguments and parameters. Needed by
    /// every stage that feeds a virtual control.
    pub fn with_gradients<GA, GT>(mut self, grad_args: GA, grad_theta: GT) -> Self
    where
        GA: Fn(&[f64], &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        GT: Fn(&[f64], &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.f_grad_args = Some(Arc::new(grad_args));
        self.f_grad_theta = Some(Arc::new(grad_theta));
        self
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn f(&self, a: &[f64], theta: &DVector<f64>) -> f64 {
        (self.f)(a, theta)
    }

    pub fn alpha(&self, a: &[f64]) -> DVector<f64> {
        (self.alpha)(a)
    }

    pub fn alpha_jacobian(&self, a: &[f64]) -> DMatrix<f64> {
        (self.alpha_jacobian)(a)
    }

    pub fn sector(&self) -> Sector {
        self.sector
    }
}

/// Scalar output goal `psi(x_1)` with its first two derivatives.
#[derive(Clone)]
pub struct OutputGoal {
    psi: Scalar1,
    dpsi: Scalar1,
    d2psi: Scalar1,
}

impl fmt::Debug for OutputGoal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OutputGoal").finish_non_exhaustive()
    }
}

impl OutputGoal {
    pub fn new<P, D, D2>(psi: P, dpsi: D, d2psi: D2) -> Self
    where
        P: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            psi: Arc::new(psi),
            dpsi: Arc::new(dpsi),
            d2psi: Arc::new(d2psi),
        }
    }

    /// `psi = x_1 - r`.
    pub fn setpoint(r: f64) -> Self {
        Self::new(move |x| x - r, |_| 1.0, |_| 0.0)
    }

    pub fn psi(&self, x: f64) -> f64 {
        (self.psi)(x)
    }

    pub fn dpsi(&self, x: f64) -> f64 {
        (self.dpsi)(x)
    }

    pub fn d2psi(&self, x: f64) -> f64 {
        (self.d2psi)(x)
    }
}

/// Source of a stage potential.
#[derive(Clone, Debug)]
pub enum StagePsi {
    /// Closed form over the full closed-loop state.
    ClosedForm(PsiProvider),
    /// Quadrature along the stage's own plant coordinate starting at `base`;
    /// `None` starts at the coordinate's initial value.
    Quadrature { base: Option<f64> },
}

/// Drive of the observer integral channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorTarget {
    /// `phi(psi_xi) = psi_xi`.
    Unit,
    /// `beta = gain_i psi_xi`, matching the observer's own damping.
    Damped,
}

/// Positions of plant, observer and integral states in the closed-loop
/// vector: `[x | xi | ctrl_0 | obs_0 .. obs_{k-1} | ctrl_1 .. ctrl_{n-1}]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CascadeLayout {
    n: usize,
    k: usize,
    ctrl: Vec<Range<usize>>,
    obs: Vec<Range<usize>>,
    dim: usize,
}

impl CascadeLayout {
    pub fn new(n: usize, ctrl_dims: &[usize], obs_dims: &[usize]) -> Result<Self> {
        if ctrl_dims.len() != n {
            return Err(Error::DimensionMismatch {
                context: "controller blocks",
                expected: n,
                got: ctrl_dims.len(),
            });
        }
        let k = obs_dims.len();
        if k >= n.max(1) {
            return Err(Error::InvalidArgument(format!(
                "{k} observer stages for a cascade of order {n}"
            )));
        }
        let mut at = n + k;
        let mut take = |d: usize| {
            let r = at..at + d;
            at += d;
            r
        };
        let mut ctrl = vec![take(ctrl_dims.first().copied().unwrap_or(0))];
        let obs: Vec<_> = obs_dims.iter().map(|&d| take(d)).collect();
        ctrl.extend(ctrl_dims.iter().skip(1).map(|&d| take(d)));
        Ok(Self {
            n,
            k,
            ctrl,
            obs,
            dim: at,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn observers(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> usize {
        i
    }

    pub fn xi(&self, i: usize) -> usize {
        self.n + i
    }

    pub fn ctrl(&self, i: usize) -> Range<usize> {
        self.ctrl[i].clone()
    }

    pub fn obs(&self, i: usize) -> Range<usize> {
        self.obs[i].clone()
    }

    /// `a_i = (xi_0 .. xi_{i-1}, x_i)`.
    pub fn stage_args(&self, i: usize, s: &DVector<f64>) -> Vec<f64> {
        let mut a: Vec<f64> = (0..i).map(|j| s[self.xi(j)]).collect();
        a.push(s[self.x(i)]);
        a
    }

    /// State indices of `a_i`.
    pub fn stage_arg_indices(&self, i: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..i).map(|j| self.xi(j)).collect();
        idx.push(self.x(i));
        idx
    }

    /// `q_{i-1} = (xi_0 .. xi_{i-1}, x_i .. x_{n-1})`, with `q_{-1} = x`.
    pub fn substituted(&self, i: isize, s: &DVector<f64>) -> Vec<f64> {
        (0..self.n)
            .map(|j| if (j as isize) <= i { s[self.xi(j)] } else { s[self.x(j)] })
            .collect()
    }
}

/// Configuration of one observer stage.
#[derive(Clone, Debug)]
pub struct ObserverStage {
    pub model: StageModel,
    pub gain: f64,
    pub psi: StagePsi,
}

struct StageRuntime {
    model: StageModel,
    binding: EstimatorBinding,
}

/// Chain of observer stages sharing one closed-loop state vector.
#[derive(Clone)]
pub struct CascadeObserverStack {
    layout: CascadeLayout,
    stages: Arc<Vec<StageRuntime>>,
    factors: LipschitzFactors,
    context: Context,
    target: EstimatorTarget,
}

impl fmt::Debug for CascadeObserverStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CascadeObserverStack")
            .field("layout", &self.layout)
            .field("target", &self.target)
            .finish_non_exhaustive()
    }
}

fn observer_gain(
    layout: &CascadeLayout,
    factors: &LipschitzFactors,
    context: &Context,
    i: usize,
    s: &DVector<f64>,
) -> f64 {
    let prev = layout.substituted(i as isize - 1, s);
    let cur = layout.substituted(i as isize, s);
    let z = context(s);
    let fbar = factors.fbar(&prev, &cur, z.as_slice());
    let top = layout.observers().min(layout.n() - 1);
    let mut sum = fbar * fbar + 1.0;
    for j in i + 1..=top {
        let d = factors.dbar(j, &prev[..=j], &cur[..=j]);
        sum += d * d;
    }
    sum
}

/// Maps a Jacobian over stage arguments to columns of the full state.
fn scatter_columns(dim: usize, idx: &[usize], local: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(local.nrows(), dim);
    for (c, &j) in idx.iter().enumerate() {
        out.column_mut(j).copy_from(&local.column(c));
    }
    out
}

/// `∫_b^{a_last} (σ - shift) ∂alpha/∂a_last(a[last ← σ]) dσ` together with
/// `∫ (σ - shift) ∂²alpha/∂a_last ∂a_j dσ` for every frozen argument `j`.
fn shifted_potential(
    model: &StageModel,
    a: &[f64],
    shift: f64,
    base: f64,
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    let d = model.theta_dim;
    let last = a.len() - 1;
    let frozen = last;
    let model = model.clone();
    let a0 = a.to_vec();
    let stacked = gauss_legendre_adaptive(
        move |sigma| {
            let mut p = a0.clone();
            p[last] = sigma;
            let col = model.alpha_jacobian(&p).column(last).into_owned();
            let mut out = DVector::zeros(d * (1 + frozen));
            out.rows_mut(0, d).copy_from(&(&col * (sigma - shift)));
            for j in 0..frozen {
                let mixed = derivative5(
                    |v| {
                        let mut q = p.clone();
                        q[j] = v;
                        model.alpha_jacobian(&q).column(last).into_owned()
                    },
                    p[j],
                );
                out.rows_mut(d * (1 + j), d).copy_from(&(mixed * (sigma - shift)));
            }
            Ok(out)
        },
        base,
        a[last],
        QUAD_TOL,
    )?;
    let value = stacked.rows(0, d).into_owned();
    let mixed = (0..frozen).map(|j| stacked.rows(d * (1 + j), d).into_owned()).collect();
    Ok((value, mixed))
}

fn observer_binding(
    layout: &CascadeLayout,
    i: usize,
    stage: &ObserverStage,
    base: f64,
    beta: Option<ScalarField>,
) -> Result<EstimatorBinding> {
    let dim = layout.dim();
    let (xi_i, x_i) = (layout.xi(i), layout.x(i));
    let idx = layout.stage_arg_indices(i);
    let goal = GoalSpec::new(
        Arc::new(move |s, _| s[x_i] - s[xi_i]),
        Arc::new(move |_, _| {
            let mut g = DVector::zeros(dim);
            g[x_i] = 1.0;
            g[xi_i] = -1.0;
            g
        }),
        TargetDynamics::linear(1.0),
    );
    let par = stage_parameterization(layout.clone(), i, stage.model.clone(), idx.clone());
    let provider = match &stage.psi {
        StagePsi::ClosedForm(p) => p.clone(),
        StagePsi::Quadrature { .. } => {
            let d = stage.model.theta_dim;
            let (m1, m2) = (stage.model.clone(), stage.model.clone());
            let (l1, l2) = (layout.clone(), layout.clone());
            let value: VectorField = Arc::new(move |s, _| {
                let a = l1.stage_args(i, s);
                shifted_potential(&m1, &a, s[l1.xi(i)], base)
                    .map(|(v, _)| v)
                    .unwrap_or_else(|_| DVector::from_element(d, f64::NAN))
            });
            let idx2 = idx.clone();
            let grad: MatrixField = Arc::new(move |s, _| {
                let a = l2.stage_args(i, s);
                let shift = s[l2.xi(i)];
                let mut g = DMatrix::zeros(d, dim);
                let Ok((_, mixed)) = shifted_potential(&m2, &a, shift, base) else {
                    return DMatrix::from_element(d, dim, f64::NAN);
                };
                let last = a.len() - 1;
                let col = m2.alpha_jacobian(&a).column(last) * (a[last] - shift);
                g.column_mut(idx2[last]).copy_from(&col);
                let mut ab = a.clone();
                ab[last] = base;
                g.column_mut(l2.xi(i)).copy_from(&(m2.alpha(&ab) - m2.alpha(&a)));
                for (j, m) in mixed.iter().enumerate() {
                    g.column_mut(idx2[j]).copy_from(m);
                }
                g
            });
            PsiProvider::closed_form(d, value, grad, None)
        }
    };
    let mut estimator =
        FiniteFormEstimator::new(Gain::scalar(stage.model.theta_dim, stage.gain)?, provider, vec![x_i])?;
    if let Some(b) = beta {
        estimator = estimator.with_beta(b);
    }
    Ok(EstimatorBinding {
        name: format!("theta_xi{}", i + 1),
        estimator,
        goal,
        par,
        view: None,
        theta_i: layout.obs(i),
    })
}

fn stage_parameterization(layout: CascadeLayout, i: usize, model: StageModel, idx: Vec<usize>) -> Parameterization {
    let dim = layout.dim();
    let (m1, m2, m3) = (model.clone(), model.clone(), model.clone());
    let (l1, l2, l3) = (layout.clone(), layout.clone(), layout);
    let alpha: VectorField = Arc::new(move |s, _| m1.alpha(&l1.stage_args(i, s)));
    let jac: MatrixField = Arc::new(move |s, _| scatter_columns(dim, &idx, &m2.alpha_jacobian(&l2.stage_args(i, s))));
    let z: UncertainScalar = Arc::new(move |s, th, _| m3.f(&l3.stage_args(i, s), th));
    Parameterization::new(model.theta_dim, alpha, jac, z, model.sector)
}

impl CascadeObserverStack {
    /// `bases[i]` is the quadrature start of stage `i` when its potential
    /// uses quadrature with an unspecified base.
    pub fn new(
        layout: CascadeLayout,
        stages: Vec<ObserverStage>,
        factors: LipschitzFactors,
        context: Context,
        target: EstimatorTarget,
        bases: &[f64],
    ) -> Result<Self> {
        if stages.len() != layout.observers() {
            return Err(Error::DimensionMismatch {
                context: "observer stages",
                expected: layout.observers(),
                got: stages.len(),
            });
        }
        let mut runtime = Vec::with_capacity(stages.len());
        for (i, stage) in stages.iter().enumerate() {
            if layout.obs(i).len() != stage.model.theta_dim {
                return Err(Error::DimensionMismatch {
                    context: "observer integral block",
                    expected: stage.model.theta_dim,
                    got: layout.obs(i).len(),
                });
            }
            let base = match stage.psi {
                StagePsi::Quadrature { base: Some(b) } => b,
                _ => bases.get(i).copied().unwrap_or(0.0),
            };
            let beta: Option<ScalarField> = match target {
                EstimatorTarget::Unit => None,
                EstimatorTarget::Damped => {
                    let (l, f, c) = (layout.clone(), factors.clone(), context.clone());
                    let (xi_i, x_i) = (layout.xi(i), layout.x(i));
                    Some(Arc::new(move |s: &DVector<f64>, _| {
                        observer_gain(&l, &f, &c, i, s) * (s[x_i] - s[xi_i])
                    }))
                }
            };
            runtime.push(StageRuntime {
                model: stage.model.clone(),
                binding: observer_binding(&layout, i, stage, base, beta)?,
            });
        }
        Ok(Self {
            layout,
            stages: Arc::new(runtime),
            factors,
            context,
            target,
        })
    }

    pub fn layout(&self) -> &CascadeLayout {
        &self.layout
    }

    pub fn target(&self) -> EstimatorTarget {
        self.target
    }

    pub fn bindings(&self) -> Vec<EstimatorBinding> {
        self.stages.iter().map(|s| s.binding.clone()).collect()
    }

    /// `gain_i` at state `s`.
    pub fn gain(&self, i: usize, s: &DVector<f64>) -> f64 {
        observer_gain(&self.layout, &self.factors, &self.context, i, s)
    }

    /// `(xi_i', theta_xi_i,I')` for all stages in order. `base_velocity`
    /// holds known velocities of non-observer coordinates (for example the
    /// controller integral rates); plant and observer entries are filled in.
    pub fn rates(
        &self,
        s: &DVector<f64>,
        t: f64,
        u: f64,
        base_velocity: &DVector<f64>,
    ) -> Result<Vec<(f64, DVector<f64>)>> {
        let l = &self.layout;
        let n = l.n();
        let mut v = base_velocity.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let beta = if i + 1 < n { s[l.x(i + 1)] } else { u };
            let theta = st.binding.theta_hat(s, t)?;
            let a = l.stage_args(i, s);
            let xi_dot = self.gain(i, s) * (s[l.x(i)] - s[l.xi(i)]) + st.model.f(&a, &theta) + beta;
            v[l.x(i)] = beta;
            v[l.xi(i)] = xi_dot;
            let b = &st.binding;
            let rate = b
                .estimator
                .theta_i_rate(&b.goal, &b.par, s, &b.theta_i_of(s), t, &v, None)?;
            out.push((xi_dot, rate));
        }
        Ok(out)
    }
}

/// Observer update of stage `i` alone.
pub fn cascade_observer_stage_rhs(
    stack: &CascadeObserverStack,
    i: usize,
    s: &DVector<f64>,
    t: f64,
    u: f64,
) -> Result<(f64, DVector<f64>)> {
    if i >= stack.layout.observers() {
        return Err(Error::InvalidArgument(format!("no observer stage {i}")));
    }
    let v = DVector::zeros(stack.layout.dim());
    let mut rates = stack.rates(s, t, u, &v)?;
    Ok(rates.swap_remove(i))
}

/// Sampling boxes for the design-time assumption checks of each stage.
#[derive(Clone, Debug)]
pub struct StageSampling {
    /// Box over `a_i`, dimension `i + 1`.
    pub arg_boxes: Vec<SampleBox>,
    pub theta_boxes: Vec<SampleBox>,
    pub draws: usize,
    pub seed: u64,
}

/// Initial parameter estimate, either as `theta_hat(0)` or as the raw
/// integral state.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialEstimate {
    Estimate(DVector<f64>),
    Integral(DVector<f64>),
}

#[derive(Clone, Debug)]
pub struct CascadeInit {
    pub x0: Vec<f64>,
    /// Observer initial states; `None` copies `x0`.
    pub xi0: Option<Vec<f64>>,
    pub controller: Vec<InitialEstimate>,
    pub observers: Vec<InitialEstimate>,
}

/// Finite-form design for a strict-feedback plant of order 1 or 2.
#[derive(Clone, Debug)]
pub struct CascadeDesign {
    pub plant: CascadePlant,
    pub goal: OutputGoal,
    /// Target dynamics of each stage error.
    pub targets: Vec<TargetDynamics>,
    pub models: Vec<StageModel>,
    /// Scalar adaptation gain of each controller stage.
    pub gains: Vec<f64>,
    pub controller_psi: Vec<StagePsi>,
    /// Observer stages; one fewer than the plant order.
    pub observers: Vec<ObserverStage>,
    pub observer_target: EstimatorTarget,
    pub factors: LipschitzFactors,
    pub sampling: Option<StageSampling>,
    pub delta1: f64,
}

fn check_stage_assumptions(design: &CascadeDesign, sampling: &StageSampling) -> Result<()> {
    let key = SimulatorKey::new();
    let mut rng = seeded_rng(sampling.seed);
    for (i, model) in design.models.iter().enumerate() {
        let (Some(ab), Some(tb)) = (sampling.arg_boxes.get(i), sampling.theta_boxes.get(i)) else {
            continue;
        };
        let truth = design.plant.theta_block(i, &key);
        let sector = model.sector;
        for _ in 0..sampling.draws {
            let a = ab.sample(&mut rng);
            let th = tb.sample(&mut rng);
            let th2 = tb.sample(&mut rng);
            let plant_val = design.plant.stage_value(i, a.as_slice(), truth);
            let model_val = model.f(a.as_slice(), truth);
            if (plant_val - model_val).abs() > 1e-9 * (1.0 + plant_val.abs()) {
                return Err(Error::StageAssumptionViolated {
                    stage: i,
                    detail: format!(
                        "model differs from plant by {:e} at {:?}",
                        plant_val - model_val,
                        a.as_slice()
                    ),
                });
            }
            let lin = (&th - &th2).dot(&model.alpha(a.as_slice()));
            let diff = model.f(a.as_slice(), &th) - model.f(a.as_slice(), &th2);
            let tol = 1e-10 * (1.0 + diff.abs());
            if diff * lin < -tol || diff.abs() > sector.d * lin.abs() + tol {
                return Err(Error::StageAssumptionViolated {
                    stage: i,
                    detail: format!("sector condition fails: Δf = {diff:e}, Δθ·α = {lin:e}"),
                });
            }
            if let Some(d1) = sector.d1 {
                if diff.abs() + tol < d1 * lin.abs() {
                    return Err(Error::StageAssumptionViolated {
                        stage: i,
                        detail: format!("lower sector bound fails: Δf = {diff:e}, Δθ·α = {lin:e}"),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Stage-0 controller potential as a function of the full state.
fn first_stage_potential(
    goal: &OutputGoal,
    model: &StageModel,
    psi: &StagePsi,
    x0_index: usize,
    dim: usize,
    base: f64,
) -> PsiProvider {
    match psi {
        StagePsi::ClosedForm(p) => p.clone(),
        StagePsi::Quadrature { base: b } => {
            let base = b.unwrap_or(base);
            let d = model.theta_dim;
            let (g1, m1, g2, m2) = (goal.clone(), model.clone(), goal.clone(), model.clone());
            let value: VectorField = Arc::new(move |s, _| {
                let (g, m) = (g1.clone(), m1.clone());
                gauss_legendre_adaptive(
                    move |x| Ok(m.alpha_jacobian(&[x]).column(0) * (g.psi(x))),
                    base,
                    s[x0_index],
                    QUAD_TOL,
                )
                .unwrap_or_else(|_| DVector::from_element(d, f64::NAN))
            });
            let grad: MatrixField = Arc::new(move |s, _| {
                let x = s[x0_index];
                let mut g = DMatrix::zeros(d, dim);
                g.column_mut(x0_index)
                    .copy_from(&(m2.alpha_jacobian(&[x]).column(0) * g2.psi(x)));
                g
            });
            PsiProvider::closed_form(d, value, grad, None)
        }
    }
}

/// Virtual control `U(xi, theta_0I)` with its partial derivatives.
#[derive(Clone)]
struct VirtualControl {
    goal: OutputGoal,
    target: TargetDynamics,
    model: StageModel,
    binding: EstimatorBinding,
    xi_index: usize,
    x0_index: usize,
    last: LastEval,
}

#[derive(Clone)]
struct VirtualValue {
    u: f64,
    d_xi: f64,
    d_theta_i: DVector<f64>,
}

impl VirtualControl {
    fn eval(&self, s: &DVector<f64>) -> Result<VirtualValue> {
        if let Ok(guard) = self.last.lock() {
            if let Some((sc, v)) = guard.as_ref() {
                if sc == s {
                    return Ok(v.clone());
                }
            }
        }
        let v = self.compute(s)?;
        if let Ok(mut guard) = self.last.lock() {
            *guard = Some((s.clone(), v.clone()));
        }
        Ok(v)
    }

    fn compute(&self, s: &DVector<f64>) -> Result<VirtualValue> {
        let a = s[self.xi_index];
        let mut sub = s.clone();
        sub[self.x0_index] = a;
        let b = &self.binding;
        let theta = b.theta_hat(&sub, 0.0)?;
        let grad_f_args = self.model.f_grad_args.as_ref().ok_or_else(|| missing_gradient(0))?;
        let grad_f_theta = self.model.f_grad_theta.as_ref().ok_or_else(|| missing_gradient(0))?;
        let (psi, dpsi, d2psi) = (self.goal.psi(a), self.goal.dpsi(a), self.goal.d2psi(a));
        let phi = self.target.phi(psi);
        let f = self.model.f(&[a], &theta);
        let u = -(phi + f) / dpsi;
        let du_da =
            -(self.target.dphi(psi) * dpsi + grad_f_args(&[a], &theta)[0]) / dpsi + (phi + f) * d2psi / (dpsi * dpsi);
        let du_dtheta = grad_f_theta(&[a], &theta) * (-1.0 / dpsi);
        let alpha = self.model.alpha(&[a]);
        let jcol = self.model.alpha_jacobian(&[a]).column(0).into_owned();
        let pgrad = b
            .estimator
            .provider()
            .evaluate(&sub, 0.0)?
            .grad
            .column(self.x0_index)
            .into_owned();
        let dtheta_da = b.estimator.gain().apply(&(alpha * dpsi + jcol * psi - pgrad));
        let gamma = b.estimator.gain().as_matrix();
        Ok(VirtualValue {
            u,
            d_xi: du_da + du_dtheta.dot(&dtheta_da),
            d_theta_i: gamma.transpose() * du_dtheta,
        })
    }
}

fn missing_gradient(stage: usize) -> Error {
    Error::InvalidArgument(format!("stage {stage} model needs argument and parameter gradients"))
}

/// Assembles the closed loop `[x | xi | theta_I blocks]` and its estimator
/// bindings `theta1`, `theta_xi1`, `theta2`.
pub fn cascade_design(name: impl Into<String>, design: &CascadeDesign, init: &CascadeInit) -> Result<ClosedLoop> {
    let n = design.plant.n();
    if n == 0 || n > 2 {
        return Err(Error::UnsupportedOrder { n });
    }
    let lens = [
        ("stage models", design.models.len()),
        ("stage targets", design.targets.len()),
        ("controller gains", design.gains.len()),
        ("controller potentials", design.controller_psi.len()),
        ("controller initial estimates", init.controller.len()),
        ("initial plant state", init.x0.len()),
    ];
    for (context, got) in lens {
        if got != n {
            return Err(Error::DimensionMismatch {
                context,
                expected: n,
                got,
            });
        }
    }
    if design.observers.len() != n - 1 || init.observers.len() != n - 1 {
        return Err(Error::DimensionMismatch {
            context: "observer stages",
            expected: n - 1,
            got: design.observers.len().min(init.observers.len()),
        });
    }
    for (i, m) in design.models.iter().enumerate() {
        if m.theta_dim != design.plant.block_dim(i) {
            return Err(Error::DimensionMismatch {
                context: "stage parameter block",
                expected: design.plant.block_dim(i),
                got: m.theta_dim,
            });
        }
    }
    if let Some(sampling) = &design.sampling {
        check_stage_assumptions(design, sampling)?;
    }

    let ctrl_dims: Vec<usize> = design.models.iter().map(|m| m.theta_dim).collect();
    let obs_dims: Vec<usize> = design.observers.iter().map(|o| o.model.theta_dim).collect();
    let layout = CascadeLayout::new(n, &ctrl_dims, &obs_dims)?;
    let dim = layout.dim();

    // Stage-0 controller over x_0.
    let x0i = layout.x(0);
    let g0 = design.goal.clone();
    let (g0a, g0b) = (g0.clone(), g0.clone());
    let goal0 = GoalSpec::new(
        Arc::new(move |s, _| g0a.psi(s[x0i])),
        Arc::new(move |s, _| {
            let mut g = DVector::zeros(dim);
            g[x0i] = g0b.dpsi(s[x0i]);
            g
        }),
        design.targets[0].clone(),
    );
    let par0 = stage_parameterization(layout.clone(), 0, design.models[0].clone(), vec![x0i]);
    let prov0 = first_stage_potential(&g0, &design.models[0], &design.controller_psi[0], x0i, dim, init.x0[0]);
    let est0 = FiniteFormEstimator::new(Gain::scalar(ctrl_dims[0], design.gains[0])?, prov0, vec![x0i])?;
    let bind0 = EstimatorBinding {
        name: "theta1".into(),
        estimator: est0,
        goal: goal0,
        par: par0,
        view: None,
        theta_i: layout.ctrl(0),
    };

    let mut s0 = DVector::zeros(dim);
    for i in 0..n {
        s0[layout.x(i)] = init.x0[i];
    }
    let xi0 = init.xi0.clone().unwrap_or_else(|| init.x0[..n - 1].to_vec());
    if xi0.len() != n - 1 {
        return Err(Error::DimensionMismatch {
            context: "observer initial state",
            expected: n - 1,
            got: xi0.len(),
        });
    }
    for (i, v) in xi0.iter().enumerate() {
        s0[layout.xi(i)] = *v;
    }
    let set_initial = |s0: &mut DVector<f64>, b: &EstimatorBinding, ie: &InitialEstimate| -> Result<()> {
        let ti = match ie {
            InitialEstimate::Integral(v) => v.clone(),
            InitialEstimate::Estimate(th) => b.estimator.theta_i_initial(&b.goal, &b.par, s0, 0.0, th)?,
        };
        if ti.len() != b.theta_i.len() {
            return Err(Error::DimensionMismatch {
                context: "initial estimate",
                expected: b.theta_i.len(),
                got: ti.len(),
            });
        }
        s0.rows_mut(b.theta_i.start, ti.len()).copy_from(&ti);
        Ok(())
    };
    set_initial(&mut s0, &bind0, &init.controller[0])?;

    let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    names.extend((1..n).map(|i| format!("xi{i}")));
    for (label, r) in [("theta1_i", layout.ctrl(0))].into_iter().chain(
        (0..n - 1)
            .map(|i| ("theta_xi_i", layout.obs(i)))
            .chain((1..n).map(|i| ("theta2_i", layout.ctrl(i)))),
    ) {
        let len = r.len();
        names.extend((1..=len).map(|k| format!("{label}{k}")));
    }
    let key = SimulatorKey::new();
    let reference = DVector::from_iterator(
        ctrl_dims.iter().sum(),
        (0..n).flat_map(|i| design.plant.theta_block(i, &key).iter().copied().collect::<Vec<_>>()),
    );
    let plant = design.plant.clone();
    let delta1 = design.delta1;

    if n == 1 {
        let (b0, g, m, target) = (
            bind0.clone(),
            design.goal.clone(),
            design.models[0].clone(),
            design.targets[0].clone(),
        );
        let eval = move |t: f64, s: &DVector<f64>| -> Result<LoopEval> {
            let x = s[0];
            let theta = b0.theta_hat(s, t)?;
            let dpsi = g.dpsi(x);
            if dpsi.abs() <= delta1 {
                return Err(Error::SingularControlDirection { lg: dpsi, delta1 });
            }
            let psi = g.psi(x);
            let u = -(target.phi(psi) + m.f(&[x], &theta)) / dpsi;
            let mut v = DVector::zeros(s.len());
            v[0] = u;
            let mut ds = DVector::zeros(s.len());
            ds[0] = plant.eval_dynamics(&s.rows(0, 1).into_owned(), u, t)?[0];
            let rate = b0
                .estimator
                .theta_i_rate(&b0.goal, &b0.par, s, &b0.theta_i_of(s), t, &v, None)?;
            ds.rows_mut(b0.theta_i.start, rate.len()).copy_from(&rate);
            Ok(LoopEval {
                derivative: ds,
                control: u,
                psi,
                theta_hat: theta,
            })
        };
        return Ok(ClosedLoop::new(name, eval, s0, names, 1, reference)?.with_binding(bind0));
    }

    // Observer stack, context = stage-0 controller integral state.
    let ctx_range = layout.ctrl(0);
    let context: Context = Arc::new(move |s| s.rows(ctx_range.start, ctx_range.len()).into_owned());
    let bases: Vec<f64> = init.x0[..n - 1].to_vec();
    let stack = CascadeObserverStack::new(
        layout.clone(),
        design.observers.clone(),
        design.factors.clone(),
        context,
        design.observer_target,
        &bases,
    )?;
    for (i, b) in stack.bindings().iter().enumerate() {
        set_initial(&mut s0, b, &init.observers[i])?;
    }

    // Stage-1 controller over (xi_0, x_1) with psi_2 = x_1 - U.
    let virt = VirtualControl {
        goal: design.goal.clone(),
        target: design.targets[0].clone(),
        model: design.models[0].clone(),
        binding: bind0.clone(),
        xi_index: layout.xi(0),
        x0_index: x0i,
        last: Arc::new(Mutex::new(None)),
    };
    if design.models[0].f_grad_args.is_none() || design.models[0].f_grad_theta.is_none() {
        return Err(missing_gradient(0));
    }
    let x1i = layout.x(1);
    let xi0i = layout.xi(0);
    let c0 = layout.ctrl(0);
    let (v1, v2) = (virt.clone(), virt.clone());
    let c0b = c0.clone();
    let goal1 = GoalSpec::new(
        Arc::new(move |s, _| v1.eval(s).map_or(f64::NAN, |vv| s[x1i] - vv.u)),
        Arc::new(move |s, _| {
            let mut g = DVector::zeros(dim);
            g[x1i] = 1.0;
            match v2.eval(s) {
                Ok(vv) => {
                    g[xi0i] = -vv.d_xi;
                    g.rows_mut(c0b.start, c0b.len()).copy_from(&(-vv.d_theta_i));
                }
                Err(_) => g.fill(f64::NAN),
            }
            g
        }),
        design.targets[1].clone(),
    );
    let m1 = design.models[1].clone();
    let idx1 = layout.stage_arg_indices(1);
    let par1 = stage_parameterization(layout.clone(), 1, m1.clone(), idx1.clone());
    let prov1 = match &design.controller_psi[1] {
        StagePsi::ClosedForm(p) => p.clone(),
        StagePsi::Quadrature { base } => {
            let base = base.unwrap_or(init.x0[1]);
            let d = m1.theta_dim;
            let (va, vb, ma, mb, la, lb) = (
                virt.clone(),
                virt.clone(),
                m1.clone(),
                m1.clone(),
                layout.clone(),
                layout.clone(),
            );
            let c0c = c0.clone();
            let value: VectorField = Arc::new(move |s, _| {
                let a = la.stage_args(1, s);
                va.eval(s)
                    .and_then(|vv| shifted_potential(&ma, &a, vv.u, base))
                    .map_or_else(|_| DVector::from_element(d, f64::NAN), |(v, _)| v)
            });
            let grad: MatrixField = Arc::new(move |s, _| {
                let a = lb.stage_args(1, s);
                let Ok(vv) = vb.eval(s) else {
                    return DMatrix::from_element(d, dim, f64::NAN);
                };
                let Ok((_, mixed)) = shifted_potential(&mb, &a, vv.u, base) else {
                    return DMatrix::from_element(d, dim, f64::NAN);
                };
                let mut ab = a.clone();
                ab[1] = base;
                let span = mb.alpha(&a) - mb.alpha(&ab);
                let mut g = DMatrix::zeros(d, dim);
                g.column_mut(x1i)
                    .copy_from(&(mb.alpha_jacobian(&a).column(1) * (a[1] - vv.u)));
                g.column_mut(xi0i).copy_from(&(&mixed[0] - &span * vv.d_xi));
                for (k, c) in c0c.clone().enumerate() {
                    g.column_mut(c).copy_from(&(&span * (-vv.d_theta_i[k])));
                }
                g
            });
            PsiProvider::closed_form(d, value, grad, None)
        }
    };
    let est1 = FiniteFormEstimator::new(Gain::scalar(m1.theta_dim, design.gains[1])?, prov1, vec![x1i])?;
    let bind1 = EstimatorBinding {
        name: "theta2".into(),
        estimator: est1,
        goal: goal1,
        par: par1,
        view: None,
        theta_i: layout.ctrl(1),
    };
    set_initial(&mut s0, &bind1, &init.controller[1])?;

    let (b0, b1, st, target1, lay) = (
        bind0.clone(),
        bind1.clone(),
        stack.clone(),
        design.targets[1].clone(),
        layout.clone(),
    );
    let virt_gap = virt.clone();
    let virt_eval = virt;
    let eval = move |t: f64, s: &DVector<f64>| -> Result<LoopEval> {
        let mut v = DVector::zeros(s.len());
        v[lay.x(0)] = s[lay.x(1)];
        let th0 = b0.theta_hat(s, t)?;
        let r0 = b0
            .estimator
            .theta_i_rate(&b0.goal, &b0.par, s, &b0.theta_i_of(s), t, &v, None)?;
        v.rows_mut(b0.theta_i.start, r0.len()).copy_from(&r0);
        // the single observer stage does not read u
        let obs = st.rates(s, t, f64::NAN, &v)?;
        let (xi_dot, r_xi) = &obs[0];
        v[lay.xi(0)] = *xi_dot;
        v.rows_mut(lay.obs(0).start, r_xi.len()).copy_from(r_xi);

        let vv = virt_eval.eval(s)?;
        let psi2 = s[lay.x(1)] - vv.u;
        let th1 = b1.theta_hat(s, t)?;
        let a1 = lay.stage_args(1, s);
        let u = -target1.phi(psi2) - m1.f(&a1, &th1) + vv.d_xi * xi_dot + vv.d_theta_i.dot(&r0);
        v[lay.x(1)] = u;
        let r1 = b1
            .estimator
            .theta_i_rate(&b1.goal, &b1.par, s, &b1.theta_i_of(s), t, &v, None)?;

        let mut ds = DVector::zeros(s.len());
        let x = s.rows(0, 2).into_owned();
        ds.rows_mut(0, 2).copy_from(&plant.eval_dynamics(&x, u, t)?);
        ds[lay.xi(0)] = *xi_dot;
        ds.rows_mut(b0.theta_i.start, r0.len()).copy_from(&r0);
        ds.rows_mut(lay.obs(0).start, r_xi.len()).copy_from(r_xi);
        ds.rows_mut(b1.theta_i.start, r1.len()).copy_from(&r1);
        let mut theta = DVector::zeros(th0.len() + th1.len());
        theta.rows_mut(0, th0.len()).copy_from(&th0);
        theta.rows_mut(th0.len(), th1.len()).copy_from(&th1);
        Ok(LoopEval {
            derivative: ds,
            control: u,
            psi: g0.psi(s[lay.x(0)]),
            theta_hat: theta,
        })
    };
    let obs_err = Probe::new("obs_err", move |_, s: &DVector<f64>| s[x0i] - s[xi0i]).integrate_square();
    let u_gap = Probe::new("u_gap", move |_, s: &DVector<f64>| {
        let mut at_x = s.clone();
        at_x[xi0i] = s[x0i];
        match (virt_gap.eval(s), virt_gap.compute(&at_x)) {
            (Ok(a), Ok(b)) => a.u - b.u,
            _ => f64::NAN,
        }
    })
    .integrate_square();
    let mut cl = ClosedLoop::new(name, eval, s0, names, n, reference)?
        .with_probe(obs_err)
        .with_probe(u_gap)
        .with_binding(bind0);
    for b in stack.bindings() {
        cl = cl.with_binding(b);
    }
    Ok(cl.with_binding(bind1))
}
