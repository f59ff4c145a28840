//! Embeddings into higher-order systems: auxiliary observers that replace
//! uncertainty-dependent coordinates, finite-form estimators over the
//! extended state, and the cascade design for strict-feedback plants.

mod cascade;

pub use cascade::{
    cascade_design, cascade_observer_stage_rhs, CascadeDesign, CascadeInit, CascadeLayout, CascadeObserverStack,
    EstimatorTarget, InitialEstimate, ObserverStage, OutputGoal, StageModel, StagePsi, StageSampling,
};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::closed_loop::{ClosedLoop, LoopEval};
use crate::error::{Error, Result};
use crate::fields::{MatrixField, ScalarField, UncertainScalar, VectorField};
use crate::finform::{
    pde_residual, psi_provider_independent, psi_provider_quad, EstimatorBinding, FiniteFormEstimator, Gain,
    PsiProvider, PDE_TOLERANCE,
};
use crate::goal::{GoalSpec, Parameterization};
use crate::numeric::{seeded_rng, Probe, SampleBox};
use crate::plant::PartitionedPlant;

type AuxRhs = dyn Fn(&DVector<f64>, &DVector<f64>, f64, f64) -> DVector<f64> + Send + Sync;
type AuxMap = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type AuxJac = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// `xi' = f_xi(x, xi, t, u)`, `y = h_xi(xi)`. The output replaces the plant
/// coordinates listed in `replaced` inside the surrogate state `x~`.
#[derive(Clone)]
pub struct AuxiliarySystem {
    r: usize,
    replaced: Vec<usize>,
    f_xi: Arc<AuxRhs>,
    h_xi: Arc<AuxMap>,
    h_jacobian: Arc<AuxJac>,
    xi0: DVector<f64>,
}

impl fmt::Debug for AuxiliarySystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuxiliarySystem")
            .field("r", &self.r)
            .field("replaced", &self.replaced)
            .field("xi0", &self.xi0)
            .finish_non_exhaustive()
    }
}

impl AuxiliarySystem {
    pub fn new<F, H, J>(replaced: Vec<usize>, xi0: DVector<f64>, f_xi: F, h_xi: H, h_jacobian: J) -> Self
    where
        F: Fn(&DVector<f64>, &DVector<f64>, f64, f64) -> DVector<f64> + Send + Sync + 'static,
        H: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            r: xi0.len(),
            replaced,
            f_xi: Arc::new(f_xi),
            h_xi: Arc::new(h_xi),
            h_jacobian: Arc::new(h_jacobian),
            xi0,
        }
    }

    /// No auxiliary state; the surrogate equals the plant state.
    pub fn pass_through() -> Self {
        Self::new(
            Vec::new(),
            DVector::zeros(0),
            |_, _, _, _| DVector::zeros(0),
            |_| DVector::zeros(0),
            |_| DMatrix::zeros(0, 0),
        )
    }

    pub fn with_xi0(mut self, xi0: DVector<f64>) -> Result<Self> {
        if xi0.len() != self.r {
            return Err(Error::DimensionMismatch {
                context: "auxiliary initial state",
                expected: self.r,
                got: xi0.len(),
            });
        }
        self.xi0 = xi0;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.r
    }

    pub fn replaced(&self) -> &[usize] {
        &self.replaced
    }

    pub fn xi0(&self) -> &DVector<f64> {
        &self.xi0
    }

    pub fn rhs(&self, x: &DVector<f64>, xi: &DVector<f64>, t: f64, u: f64) -> DVector<f64> {
        (self.f_xi)(x, xi, t, u)
    }

    pub fn output(&self, xi: &DVector<f64>) -> DVector<f64> {
        (self.h_xi)(xi)
    }

    /// `∂h_xi/∂xi`, shape `|replaced| × r`.
    pub fn output_jacobian(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        (self.h_jacobian)(xi)
    }

    /// `x~ = x` with the replaced coordinates taken from `h_xi(xi)`.
    pub fn surrogate(&self, x: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        let mut xt = x.clone();
        if !self.replaced.is_empty() {
            let y = self.output(xi);
            for (k, &i) in self.replaced.iter().enumerate() {
                xt[i] = y[k];
            }
        }
        xt
    }
}

/// `(x, xi, t) -> scalar`, used for observer damping terms.
pub type ObserverGain = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send + Sync>;

/// Observer for coordinates whose unknown term is linear in `theta`:
/// `nu''(x, theta) = eta''(x) theta`.
#[derive(Clone)]
pub struct LinearExtension {
    pub replaced: Vec<usize>,
    /// `eta''(x)`, shape `|replaced| × d`.
    pub eta: Arc<AuxJac>,
    pub lambda1: ObserverGain,
    pub lambda2: ObserverGain,
    pub gamma1: f64,
}

/// Builds `xi1' = f'' + eta'' xi2 + λ̄ (x'' - xi1) + g'' u`,
/// `xi2' = Γ1 eta''^T (x'' - xi1)` with `λ̄ = λ1² + λ2²`; `h(xi) = xi1`.
///
/// Linearity of `nu''` in `theta` is sampled at `samples` points of `x_box`
/// with parameters drawn from `[-2, 2]^d`.
pub fn linear_extension(
    plant: &PartitionedPlant,
    spec: LinearExtension,
    x_box: &SampleBox,
    samples: usize,
    seed: u64,
) -> Result<AuxiliarySystem> {
    if !(spec.gamma1 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Γ1 must be positive, got {}",
            spec.gamma1
        )));
    }
    let k = spec.replaced.len();
    let d = plant.theta_dim();
    if spec.replaced.iter().any(|&i| i < plant.m() || i >= plant.n()) {
        return Err(Error::InvalidArgument(
            "replaced coordinates must be uncertainty dependent".into(),
        ));
    }
    let theta_box = SampleBox::symmetric(d, 2.0);
    let mut rng = seeded_rng(seed);
    for _ in 0..samples {
        let x = x_box.sample(&mut rng);
        let th = theta_box.sample(&mut rng);
        let nu = plant.nu_full(&x, &th);
        let eta = (spec.eta)(&x);
        if eta.nrows() != k || eta.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "eta'' shape",
                expected: k * d,
                got: eta.nrows() * eta.ncols(),
            });
        }
        let lin = eta * &th;
        for (row, &i) in spec.replaced.iter().enumerate() {
            let residual = (nu[i] - lin[row]).abs();
            if residual > 1e-9 * (1.0 + nu[i].abs()) {
                return Err(Error::NotLinearlyParameterized { residual });
            }
        }
    }
    let p = plant.clone();
    let replaced = spec.replaced.clone();
    let LinearExtension {
        eta,
        lambda1,
        lambda2,
        gamma1,
        ..
    } = spec;
    let f_xi = move |x: &DVector<f64>, xi: &DVector<f64>, t: f64, u: f64| -> DVector<f64> {
        let xi1 = xi.rows(0, k).into_owned();
        let xi2 = xi.rows(k, d).into_owned();
        let e = DVector::from_iterator(k, replaced.iter().enumerate().map(|(r, &i)| x[i] - xi1[r]));
        let l1 = lambda1(x, xi, t);
        let l2 = lambda2(x, xi, t);
        let lbar = l1 * l1 + l2 * l2;
        let eta_x = eta(x);
        let f = p.f(x);
        let g = p.g(x);
        let known = DVector::from_iterator(k, replaced.iter().map(|&i| f[i] + g[i] * u));
        let d1 = known + &eta_x * xi2 + &e * lbar;
        let d2 = eta_x.transpose() * e * gamma1;
        let mut out = DVector::zeros(k + d);
        out.rows_mut(0, k).copy_from(&d1);
        out.rows_mut(k, d).copy_from(&d2);
        out
    };
    let mut h_jac = DMatrix::zeros(k, k + d);
    for i in 0..k {
        h_jac[(i, i)] = 1.0;
    }
    Ok(AuxiliarySystem::new(
        spec.replaced,
        DVector::zeros(k + d),
        f_xi,
        move |xi: &DVector<f64>| xi.rows(0, k).into_owned(),
        move |_| h_jac.clone(),
    ))
}

/// Certainty-equivalence control with the uncertainty term evaluated at
/// the surrogate state `x~`.
#[allow(clippy::too_many_arguments)]
pub fn embedded_control(
    plant: &PartitionedPlant,
    goal: &GoalSpec,
    par: &Parameterization,
    aux: &AuxiliarySystem,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    theta_hat: &DVector<f64>,
    t: f64,
    delta1: f64,
) -> Result<f64> {
    let grad = goal.grad(x, t);
    let lg = grad.dot(&plant.g(x));
    if lg.abs() <= delta1 {
        return Err(Error::SingularControlDirection { lg, delta1 });
    }
    let lf = grad.dot(&plant.f(x));
    let xt = aux.surrogate(x, xi);
    let psi = goal.psi(x, t);
    Ok((-goal.phi(psi) - lf - par.z(&xt, theta_hat, t) - goal.dpsi_dt(x, t)) / lg)
}

/// Finite-form realizations over the extended state `q = x ⊕ xi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmbeddedVariant {
    /// `Psi` built from `psi(x~)` plus leakage `λ > 0`.
    Leaky { lambda: f64 },
    /// `Psi ≡ 0`; needs `alpha(x~)` independent of the remaining
    /// uncertainty-dependent coordinates.
    AlphaIndependent,
    /// `Psi` built from `psi(x~)`; needs `psi(x) = psi(x~)`.
    PsiMatched,
}

impl EmbeddedVariant {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Leaky { .. } => "P8_leaky",
            Self::AlphaIndependent => "P9_alpha_independent",
            Self::PsiMatched => "P9_psi_matched",
        }
    }
}

/// Potential source for the embedded estimator.
#[derive(Clone, Debug)]
pub enum EmbeddedPsi {
    /// Quadrature of `psi(x~) ∂alpha(x~)/∂q_axis` along plant coordinate `axis`.
    Quadrature { axis: usize, base: f64 },
    /// Closed form over `q`.
    ClosedForm(PsiProvider),
}

/// Estimator of an embedded design together with its `q`-space goal and
/// parameterization.
#[derive(Clone, Debug)]
pub struct EmbeddedEstimator {
    pub variant: EmbeddedVariant,
    pub estimator: FiniteFormEstimator,
    /// `psi(x)` lifted to `q`.
    pub goal_q: GoalSpec,
    /// `alpha(x~(q))` and `z(x~(q), theta)`.
    pub par_q: Parameterization,
    n: usize,
    r: usize,
}

fn lift_goal(goal: &GoalSpec, n: usize, r: usize) -> GoalSpec {
    let g1 = goal.clone();
    let g2 = goal.clone();
    let g3 = goal.clone();
    let psi: ScalarField = Arc::new(move |q, t| g1.psi(&q.rows(0, n).into_owned(), t));
    let grad: VectorField = Arc::new(move |q, t| {
        let mut out = DVector::zeros(n + r);
        out.rows_mut(0, n).copy_from(&g2.grad(&q.rows(0, n).into_owned(), t));
        out
    });
    let mut lifted = GoalSpec::new(psi, grad, goal.target().clone());
    if goal.is_time_varying() {
        lifted = lifted.with_time_derivative(Arc::new(move |q, t| g3.dpsi_dt(&q.rows(0, n).into_owned(), t)));
    }
    lifted
}

/// Pulls a gradient at `x~` back to `q` through `x~ = x ⊕ h(xi)`.
fn pull_back(aux: &AuxiliarySystem, n: usize, q: &DVector<f64>, grad_xt: &DMatrix<f64>) -> DMatrix<f64> {
    let r = aux.dim();
    let rows = grad_xt.nrows();
    let mut out = DMatrix::zeros(rows, n + r);
    out.columns_mut(0, n).copy_from(grad_xt);
    if aux.replaced().is_empty() {
        return out;
    }
    let xi = q.rows(n, r).into_owned();
    let hj = aux.output_jacobian(&xi);
    for (k, &i) in aux.replaced().iter().enumerate() {
        out.column_mut(i).fill(0.0);
        let contrib = grad_xt.column(i) * hj.row(k);
        let mut block = out.columns_mut(n, r);
        block += contrib;
    }
    out
}

fn surrogate_goal(goal: &GoalSpec, aux: &AuxiliarySystem, n: usize) -> GoalSpec {
    let r = aux.dim();
    let (g1, g2, g3) = (goal.clone(), goal.clone(), goal.clone());
    let (a1, a2, a3) = (aux.clone(), aux.clone(), aux.clone());
    let xt = move |a: &AuxiliarySystem, q: &DVector<f64>| {
        a.surrogate(&q.rows(0, n).into_owned(), &q.rows(n, r).into_owned())
    };
    let psi: ScalarField = Arc::new(move |q, t| g1.psi(&xt(&a1, q), t));
    let grad: VectorField = Arc::new(move |q, t| {
        let g = g2.grad(&xt(&a2, q), t);
        let row = DMatrix::from_row_slice(1, n, g.as_slice());
        pull_back(&a2, n, q, &row).row(0).transpose()
    });
    let mut lifted = GoalSpec::new(psi, grad, goal.target().clone());
    if goal.is_time_varying() {
        lifted = lifted.with_time_derivative(Arc::new(move |q, t| g3.dpsi_dt(&xt(&a3, q), t)));
    }
    lifted
}

fn surrogate_par(par: &Parameterization, aux: &AuxiliarySystem, n: usize) -> Parameterization {
    let r = aux.dim();
    let (p1, p2, p3, p4) = (par.clone(), par.clone(), par.clone(), par.clone());
    let (a1, a2, a3, a4) = (aux.clone(), aux.clone(), aux.clone(), aux.clone());
    fn xt(a: &AuxiliarySystem, q: &DVector<f64>, n: usize, r: usize) -> DVector<f64> {
        a.surrogate(&q.rows(0, n).into_owned(), &q.rows(n, r).into_owned())
    }
    let alpha: VectorField = Arc::new(move |q, t| p1.alpha(&xt(&a1, q, n, r), t));
    let jac: MatrixField = Arc::new(move |q, t| pull_back(&a2, n, q, &p2.alpha_jacobian(&xt(&a2, q, n, r), t)));
    let z: UncertainScalar = Arc::new(move |q, th, t| p3.z(&xt(&a3, q, n, r), th, t));
    let mut lifted = Parameterization::new(par.dim(), alpha, jac, z, par.sector());
    if par.is_time_varying() {
        lifted = lifted.with_time_derivative(Arc::new(move |q, t| p4.alpha_dt(&xt(&a4, q, n, r), t)));
    }
    lifted
}

/// Builds the estimator of an embedded design and checks the variant's
/// hypothesis at `samples` points of `q_box`.
#[allow(clippy::too_many_arguments)]
pub fn embedded_estimator(
    variant: EmbeddedVariant,
    plant: &PartitionedPlant,
    goal: &GoalSpec,
    par: &Parameterization,
    aux: &AuxiliarySystem,
    gain: Gain,
    psi: Option<EmbeddedPsi>,
    q_box: &SampleBox,
    samples: usize,
    seed: u64,
) -> Result<EmbeddedEstimator> {
    let n = plant.n();
    let r = aux.dim();
    if q_box.dim() != n + r {
        return Err(Error::DimensionMismatch {
            context: "extended sample box",
            expected: n + r,
            got: q_box.dim(),
        });
    }
    let x2_prime: Vec<usize> = plant
        .dependent()
        .into_iter()
        .filter(|i| !aux.replaced().contains(i))
        .collect();
    let goal_q = lift_goal(goal, n, r);
    let goal_t = surrogate_goal(goal, aux, n);
    let par_q = surrogate_par(par, aux, n);

    let potential = |psi: Option<EmbeddedPsi>| -> Result<PsiProvider> {
        let provider = match psi {
            Some(EmbeddedPsi::ClosedForm(p)) => p,
            Some(EmbeddedPsi::Quadrature { axis, base }) => {
                if !x2_prime.contains(&axis) {
                    return Err(Error::InvalidArgument(format!(
                        "quadrature axis {axis} is not a remaining uncertainty-dependent coordinate"
                    )));
                }
                psi_provider_quad(&goal_t, &par_q, axis, base)
            }
            None => {
                return Err(Error::InvalidArgument(format!(
                    "{} needs a Psi source",
                    variant.label()
                )))
            }
        };
        let mut rng = seeded_rng(seed);
        for _ in 0..samples {
            let q = q_box.sample(&mut rng);
            let (coordinate, residual) = pde_residual(&provider, &goal_t, &par_q, &x2_prime, &q, 0.0)?;
            if residual > PDE_TOLERANCE {
                return Err(Error::RealizabilityViolated { coordinate, residual });
            }
        }
        Ok(provider)
    };

    let estimator = match variant {
        EmbeddedVariant::AlphaIndependent => {
            let provider = psi_provider_independent(&par_q, &x2_prime, q_box, samples, seed).map_err(|e| match e {
                Error::IndependenceViolated { value, .. } => Error::VariantHypothesisViolated {
                    variant: variant.label(),
                    value,
                },
                other => other,
            })?;
            FiniteFormEstimator::new(gain, provider, x2_prime.clone())?
        }
        EmbeddedVariant::PsiMatched => {
            let mut rng = seeded_rng(seed ^ 0x9e37_79b9);
            for _ in 0..samples {
                let q = q_box.sample(&mut rng);
                let gap = (goal_q.psi(&q, 0.0) - goal_t.psi(&q, 0.0)).abs();
                if gap > 1e-9 {
                    return Err(Error::VariantHypothesisViolated {
                        variant: variant.label(),
                        value: gap,
                    });
                }
            }
            FiniteFormEstimator::new(gain, potential(psi)?, x2_prime.clone())?
        }
        EmbeddedVariant::Leaky { lambda } => {
            if !(lambda > 0.0) {
                return Err(Error::InvalidArgument("P8_leaky needs λ > 0".into()));
            }
            FiniteFormEstimator::new(gain, potential(psi)?, x2_prime.clone())?.with_leakage(lambda)?
        }
    };
    Ok(EmbeddedEstimator {
        variant,
        estimator,
        goal_q,
        par_q,
        n,
        r,
    })
}

impl EmbeddedEstimator {
    pub fn theta_hat(&self, q: &DVector<f64>, theta_i: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.estimator.theta_hat(&self.goal_q, &self.par_q, q, theta_i, t)
    }

    pub fn theta_i_initial(&self, q0: &DVector<f64>, theta_hat0: &DVector<f64>) -> Result<DVector<f64>> {
        self.estimator
            .theta_i_initial(&self.goal_q, &self.par_q, q0, 0.0, theta_hat0)
    }

    pub fn binding(&self, theta_offset: usize) -> EstimatorBinding {
        EstimatorBinding {
            name: self.variant.label().into(),
            estimator: self.estimator.clone(),
            goal: self.goal_q.clone(),
            par: self.par_q.clone(),
            view: Some((0..self.n + self.r).collect()),
            theta_i: theta_offset..theta_offset + self.estimator.dim(),
        }
    }
}

/// `theta_I'` of an embedded estimator along the surrogate directions: the
/// known plant field `f + g u` on `x` and `f_xi` on `xi`.
#[allow(clippy::too_many_arguments)]
pub fn embedded_estimator_rhs(
    emb: &EmbeddedEstimator,
    plant: &PartitionedPlant,
    aux: &AuxiliarySystem,
    q: &DVector<f64>,
    theta_i: &DVector<f64>,
    t: f64,
    u: f64,
) -> Result<DVector<f64>> {
    let (n, r) = (emb.n, emb.r);
    let x = q.rows(0, n).into_owned();
    let xi = q.rows(n, r).into_owned();
    let mut v = DVector::zeros(n + r);
    v.rows_mut(0, n).copy_from(&(plant.f(&x) + plant.g(&x) * u));
    v.rows_mut(n, r).copy_from(&aux.rhs(&x, &xi, t, u));
    emb.estimator
        .theta_i_rate(&emb.goal_q, &emb.par_q, q, theta_i, t, &v, None)
}

/// Closed loop `[x | xi | theta_I]` of an embedded design. Records the extra
/// channel `obs_err = |x'' - h(xi)|` with its `∫ obs_err²` accumulator.
#[allow(clippy::too_many_arguments)]
pub fn embedded_loop(
    name: impl Into<String>,
    plant: &PartitionedPlant,
    goal: &GoalSpec,
    par: &Parameterization,
    aux: &AuxiliarySystem,
    emb: &EmbeddedEstimator,
    x0: &DVector<f64>,
    theta_hat0: &DVector<f64>,
    reference_theta: DVector<f64>,
    delta1: f64,
) -> Result<ClosedLoop> {
    let n = plant.n();
    let r = aux.dim();
    let d = par.dim();
    let mut q0 = DVector::zeros(n + r);
    q0.rows_mut(0, n).copy_from(x0);
    q0.rows_mut(n, r).copy_from(aux.xi0());
    let theta_i0 = emb.theta_i_initial(&q0, theta_hat0)?;
    let mut s0 = DVector::zeros(n + r + d);
    s0.rows_mut(0, n + r).copy_from(&q0);
    s0.rows_mut(n + r, d).copy_from(&theta_i0);

    let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    names.extend((1..=r).map(|i| format!("xi{i}")));
    names.extend((1..=d).map(|i| format!("theta_i_{i}")));

    let (p, g, a, ax, e) = (plant.clone(), goal.clone(), par.clone(), aux.clone(), emb.clone());
    let eval = move |t: f64, s: &DVector<f64>| -> Result<LoopEval> {
        let q = s.rows(0, n + r).into_owned();
        let x = q.rows(0, n).into_owned();
        let xi = q.rows(n, r).into_owned();
        let theta_i = s.rows(n + r, d).into_owned();
        let theta_hat = e.theta_hat(&q, &theta_i, t)?;
        let u = embedded_control(&p, &g, &a, &ax, &x, &xi, &theta_hat, t, delta1)?;
        let mut ds = DVector::zeros(n + r + d);
        ds.rows_mut(0, n).copy_from(&p.eval_dynamics(&x, u, t)?);
        ds.rows_mut(n, r).copy_from(&ax.rhs(&x, &xi, t, u));
        ds.rows_mut(n + r, d)
            .copy_from(&embedded_estimator_rhs(&e, &p, &ax, &q, &theta_i, t, u)?);
        Ok(LoopEval {
            derivative: ds,
            control: u,
            psi: g.psi(&x, t),
            theta_hat,
        })
    };
    let ax = aux.clone();
    let obs = Probe::new("obs_err", move |_, s: &DVector<f64>| {
        let x = s.rows(0, n).into_owned();
        let xi = s.rows(n, r).into_owned();
        (ax.surrogate(&x, &xi) - x).norm()
    })
    .integrate_square();
    Ok(ClosedLoop::new(name, eval, s0, names, n, reference_theta)?
        .with_probe(obs)
        .with_binding(emb.binding(n + r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{matrix_field, scalar_field, vector_field};
    use crate::goal::{Sector, TargetDynamics};
    use crate::numeric::{simulate, OdeSystem};
    use crate::scenarios::embedding_plant;

    fn drift_plant(nu: fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>) -> PartitionedPlant {
        PartitionedPlant::new(
            1,
            0,
            DVector::from_element(1, 1.0),
            |x| DVector::from_element(1, -x[0]),
            |_| DVector::from_element(1, 1.0),
            nu,
        )
        .unwrap()
    }

    fn extension(lambda1: f64) -> LinearExtension {
        LinearExtension {
            replaced: vec![0],
            eta: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
            lambda1: Arc::new(move |_, _, _| lambda1),
            lambda2: Arc::new(|_, _, _| 0.0),
            gamma1: 1.0,
        }
    }

    /// `∫e² = θ̃(0)² / (2 λ̄ Γ1)` for `x' = -x + θ`, `e(0) = 0`.
    fn observer_energy(lambda1: f64) -> f64 {
        let plant = drift_plant(|_, th| DVector::from_element(1, th[0]));
        let aux = linear_extension(&plant, extension(lambda1), &SampleBox::symmetric(1, 2.0), 50, 1).unwrap();
        let p = plant.clone();
        let sys = OdeSystem::new(3, move |t, s| {
            let x = s.rows(0, 1).into_owned();
            let xi = s.rows(1, 2).into_owned();
            let mut ds = DVector::zeros(3);
            ds.rows_mut(0, 1).copy_from(&p.eval_dynamics(&x, 0.0, t).unwrap());
            ds.rows_mut(1, 2).copy_from(&aux.rhs(&x, &xi, t, 0.0));
            ds
        });
        let probe = Probe::new("e", |_, s: &DVector<f64>| s[0] - s[1]).integrate_square();
        let tr = simulate(&sys, &DVector::zeros(3), 60.0, 1e-3, &[probe]).unwrap();
        *tr.accumulator("e").unwrap().last().unwrap()
    }

    #[test]
    fn linear_extension_energy_matches_lyapunov_budget() {
        assert!((observer_energy(1.0) - 0.5).abs() < 1e-6);
        assert!((observer_energy(2.0) - 0.125).abs() < 1e-6);
    }

    #[test]
    fn linear_extension_rejects_nonlinear_terms() {
        let plant = drift_plant(|_, th| DVector::from_element(1, th[0] * th[0]));
        let err = linear_extension(&plant, extension(1.0), &SampleBox::symmetric(1, 2.0), 50, 1).unwrap_err();
        assert!(matches!(err, Error::NotLinearlyParameterized { .. }));
    }

    #[test]
    fn surrogate_replaces_listed_coordinates() {
        let plant = embedding_plant();
        let aux = linear_extension(
            &plant,
            LinearExtension {
                replaced: vec![0],
                eta: Arc::new(|_| DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
                lambda1: Arc::new(|_, _, _| 1.0),
                lambda2: Arc::new(|_, _, _| 1.0),
                gamma1: 1.0,
            },
            &SampleBox::symmetric(2, 2.0),
            50,
            3,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let xi = DVector::from_vec(vec![0.9, 0.1, 0.2]);
        assert_eq!(aux.surrogate(&x, &xi), DVector::from_vec(vec![0.9, -0.7]));
        assert_eq!(AuxiliarySystem::pass_through().surrogate(&x, &DVector::zeros(0)), x);
    }

    fn demo_parts(
        alpha_on_x2: bool,
        psi_on_x1: bool,
    ) -> (PartitionedPlant, GoalSpec, Parameterization, AuxiliarySystem) {
        let plant = embedding_plant();
        let goal = if psi_on_x1 {
            GoalSpec::new(
                scalar_field(|x, _| x[0] + x[1]),
                vector_field(|_, _| DVector::from_vec(vec![1.0, 1.0])),
                TargetDynamics::linear(1.0),
            )
        } else {
            GoalSpec::new(
                scalar_field(|x, _| x[1]),
                vector_field(|_, _| DVector::from_vec(vec![0.0, 1.0])),
                TargetDynamics::linear(1.0),
            )
        };
        let par = if alpha_on_x2 {
            Parameterization::new(
                1,
                vector_field(|x, _| DVector::from_element(1, x[0] * x[0] + x[1])),
                matrix_field(|x, _| DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 1.0])),
                Arc::new(|x, th, _| th[0] * (x[0] * x[0] + x[1])),
                Sector::unit(),
            )
        } else {
            Parameterization::new(
                1,
                vector_field(|x, _| DVector::from_element(1, x[0] * x[0])),
                matrix_field(|x, _| DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 0.0])),
                Arc::new(|x, th, _| th[0] * x[0] * x[0]),
                Sector::unit(),
            )
        };
        let aux = linear_extension(
            &plant,
            LinearExtension {
                replaced: vec![0],
                eta: Arc::new(|_| DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
                lambda1: Arc::new(|x, xi, _| 2.0 * (x[0] + xi[0]).abs()),
                lambda2: Arc::new(|_, _, _| 1.0),
                gamma1: 1.0,
            },
            &SampleBox::symmetric(2, 2.0),
            50,
            3,
        )
        .unwrap();
        (plant, goal, par, aux)
    }

    #[test]
    fn alpha_independent_rate_matches_hand_formula() {
        let (plant, goal, par, aux) = demo_parts(false, false);
        let gain = Gain::scalar(1, 1.0).unwrap();
        let emb = embedded_estimator(
            EmbeddedVariant::AlphaIndependent,
            &plant,
            &goal,
            &par,
            &aux,
            gain,
            None,
            &SampleBox::symmetric(5, 2.0),
            100,
            5,
        )
        .unwrap();
        let q = DVector::from_vec(vec![0.4, -0.3, 0.9, 0.2, 0.1]);
        let ti = DVector::from_element(1, 0.25);
        let u = 0.7;
        let rate = embedded_estimator_rhs(&emb, &plant, &aux, &q, &ti, 0.0, u).unwrap();
        let x = q.rows(0, 2).into_owned();
        let xi = q.rows(2, 3).into_owned();
        let xi1_dot = aux.rhs(&x, &xi, 0.0, u)[0];
        let (psi, xi1) = (q[1], q[2]);
        let expect = psi * xi1 * xi1 - psi * 2.0 * xi1 * xi1_dot;
        assert!((rate[0] - expect).abs() < 1e-12);
        // Psi ≡ 0: θ̂ = ψ ξ1² + θ_I
        let th = emb.theta_hat(&q, &ti, 0.0).unwrap();
        assert!((th[0] - (psi * xi1 * xi1 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn variant_hypotheses_are_sampled() {
        let box5 = SampleBox::symmetric(5, 2.0);
        let gain = Gain::scalar(1, 1.0).unwrap();
        let (plant, goal, par, aux) = demo_parts(true, false);
        let err = embedded_estimator(
            EmbeddedVariant::AlphaIndependent,
            &plant,
            &goal,
            &par,
            &aux,
            gain.clone(),
            None,
            &box5,
            100,
            5,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::VariantHypothesisViolated {
                variant: "P9_alpha_independent",
                ..
            }
        ));

        let (plant, goal, par, aux) = demo_parts(false, true);
        let psi = Some(EmbeddedPsi::Quadrature { axis: 1, base: 0.0 });
        let err = embedded_estimator(
            EmbeddedVariant::PsiMatched,
            &plant,
            &goal,
            &par,
            &aux,
            gain.clone(),
            psi.clone(),
            &box5,
            100,
            5,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::VariantHypothesisViolated {
                variant: "P9_psi_matched",
                ..
            }
        ));

        let (plant, goal, par, aux) = demo_parts(false, false);
        let err = embedded_estimator(
            EmbeddedVariant::Leaky { lambda: 0.0 },
            &plant,
            &goal,
            &par,
            &aux,
            gain,
            psi,
            &box5,
            10,
            5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn quadrature_potential_with_alpha_on_remaining_coordinate() {
        // ψ(x~) = x2, α(x~) = ξ1² + x2: Ψ = x2²/2 along x2 from 0
        let (plant, goal, par, aux) = demo_parts(true, false);
        let emb = embedded_estimator(
            EmbeddedVariant::PsiMatched,
            &plant,
            &goal,
            &par,
            &aux,
            Gain::scalar(1, 1.0).unwrap(),
            Some(EmbeddedPsi::Quadrature { axis: 1, base: 0.0 }),
            &SampleBox::symmetric(5, 2.0),
            50,
            5,
        )
        .unwrap();
        let q = DVector::from_vec(vec![0.4, -0.3, 0.9, 0.2, 0.1]);
        let pv = emb.estimator.provider().evaluate(&q, 0.0).unwrap();
        assert!((pv.value[0] - 0.045).abs() < 1e-12);
        assert!((pv.grad[(0, 1)] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn embedded_control_uses_surrogate() {
        let (plant, goal, par, aux) = demo_parts(false, false);
        let x = DVector::from_vec(vec![0.5, 1.0]);
        let xi = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let th = DVector::from_element(1, 1.0);
        // u = -ψ - θ̂ ξ1²
        let u = embedded_control(&plant, &goal, &par, &aux, &x, &xi, &th, 0.0, 1e-6).unwrap();
        assert!((u + 5.0).abs() < 1e-15);
    }
}
