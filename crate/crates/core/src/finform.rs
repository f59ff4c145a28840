//! Finite-form estimator `theta_hat = Γ (psi alpha - Psi + theta_I)`.
//!
//! The estimator works on a coordinate vector `w`. For a plain plant `w = x`;
//! for embedded and cascade designs `w` is the extended closed-loop state.
//! The integral channel needs the known part of `w'` (everything except the
//! unknown-parameter terms). Under the realization PDE the unknown part drops
//! out, so the estimator never touches true parameters.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fields::{MatrixField, ScalarField, Signal, VectorField};
use crate::goal::{GoalSpec, Parameterization};
use crate::numeric::{finite_difference, gauss_legendre_adaptive, seeded_rng, SampleBox, SimTrace};
use crate::plant::PartitionedPlant;

/// Tolerance on the realization PDE residual of an accepted provider.
pub const PDE_TOLERANCE: f64 = 1e-6;

/// Symmetric positive-definite adaptation gain with its inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct Gain {
    gamma: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl Gain {
    pub fn scalar(dim: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gain must be positive, got {gamma}")));
        }
        Ok(Self {
            gamma: DMatrix::identity(dim, dim) * gamma,
            inverse: DMatrix::identity(dim, dim) / gamma,
        })
    }

    pub fn matrix(gamma: DMatrix<f64>) -> Result<Self> {
        if !gamma.is_square() {
            return Err(Error::InvalidArgument("gain matrix must be square".into()));
        }
        let asym = (&gamma - gamma.transpose()).amax();
        if asym > 1e-12 * gamma.amax().max(1.0) {
            return Err(Error::InvalidArgument("gain matrix must be symmetric".into()));
        }
        let chol = gamma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("gain matrix must be positive definite".into()))?;
        Ok(Self {
            inverse: chol.inverse(),
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.gamma * v
    }

    pub fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.inverse * v
    }

    /// `v' Γ^{-1} v`.
    pub fn inv_norm_sq(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.inverse * v))
    }
}

/// How a provider obtains `Psi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsiKind {
    ClosedForm,
    Quadrature,
    Independent,
}

/// `Psi`, `∂Psi/∂w` (d × n) and `∂Psi/∂t` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiValue {
    pub value: DVector<f64>,
    pub grad: DMatrix<f64>,
    pub dt: DVector<f64>,
}

#[derive(Clone)]
enum ProviderImpl {
    Closed {
        value: VectorField,
        grad: MatrixField,
        dt: Option<VectorField>,
    },
    Quad {
        goal: GoalSpec,
        par: Parameterization,
        axis: usize,
        base: f64,
    },
    Zero,
}

/// Source of the potential `Psi` with `∂Psi/∂w_dep = psi ∂alpha/∂w_dep`.
#[derive(Clone)]
pub struct PsiProvider {
    dim: usize,
    imp: ProviderImpl,
}

impl fmt::Debug for PsiProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PsiProvider")
            .field("kind", &self.kind())
            .field("dim", &self.dim)
            .finish()
    }
}

const QUAD_TOL: f64 = 1e-13;

/// Five-point central difference of a vector function of one real.
pub(crate) fn derivative5<F: Fn(f64) -> DVector<f64>>(f: F, at: f64) -> DVector<f64> {
    let e = 1e-3 * at.abs().max(1.0);
    (f(at - 2.0 * e) - f(at - e) * 8.0 + f(at + e) * 8.0 - f(at + 2.0 * e)) / (12.0 * e)
}

impl PsiProvider {
    /// Provider from user-supplied closed forms. A missing time derivative
    /// means `Psi` does not depend on `t`.
    pub fn closed_form(dim: usize, value: VectorField, grad: MatrixField, dt: Option<VectorField>) -> Self {
        Self {
            dim,
            imp: ProviderImpl::Closed { value, grad, dt },
        }
    }

    pub fn kind(&self) -> PsiKind {
        match self.imp {
            ProviderImpl::Closed { .. } => PsiKind::ClosedForm,
            ProviderImpl::Quad { .. } => PsiKind::Quadrature,
            ProviderImpl::Zero => PsiKind::Independent,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, w: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        match &self.imp {
            ProviderImpl::Closed { value, .. } => Ok(value(w, t)),
            ProviderImpl::Zero => Ok(DVector::zeros(self.dim)),
            ProviderImpl::Quad { .. } => Ok(self.evaluate(w, t)?.value),
        }
    }

    pub fn evaluate(&self, w: &DVector<f64>, t: f64) -> Result<PsiValue> {
        match &self.imp {
            ProviderImpl::Closed { value, grad, dt } => Ok(PsiValue {
                value: value(w, t),
                grad: grad(w, t),
                dt: dt.as_ref().map_or_else(|| DVector::zeros(self.dim), |f| f(w, t)),
            }),
            ProviderImpl::Zero => Ok(PsiValue {
                value: DVector::zeros(self.dim),
                grad: DMatrix::zeros(self.dim, w.len()),
                dt: DVector::zeros(self.dim),
            }),
            ProviderImpl::Quad { goal, par, axis, base } => quad_evaluate(goal, par, *axis, *base, w, t),
        }
    }
}

/// Integrates `psi ∂alpha/∂w_axis` along `w_axis` from `base`, with the other
/// coordinates frozen. Frozen-coordinate derivatives come from
/// differentiating under the integral sign.
fn quad_evaluate(
    goal: &GoalSpec,
    par: &Parameterization,
    axis: usize,
    base: f64,
    w: &DVector<f64>,
    t: f64,
) -> Result<PsiValue> {
    let n = w.len();
    let d = par.dim();
    let time_varying_alpha = par.is_time_varying();
    let integrand = |s: f64| -> Result<DVector<f64>> {
        let mut ws = w.clone();
        ws[axis] = s;
        let psi = goal.psi(&ws, t);
        let g = goal.grad(&ws, t);
        let col = |p: &DVector<f64>, tt: f64| -> DVector<f64> { par.alpha_jacobian(p, tt).column(axis).into_owned() };
        let c = col(&ws, t);
        let mut out = DVector::zeros(d * (n + 2));
        out.rows_mut(0, d).copy_from(&(&c * psi));
        for j in (0..n).filter(|&j| j != axis) {
            let dc = derivative5(
                |v| {
                    let mut p = ws.clone();
                    p[j] = v;
                    col(&p, t)
                },
                ws[j],
            );
            out.rows_mut(d * (1 + j), d).copy_from(&(&c * g[j] + dc * psi));
        }
        let mut dt_part = &c * goal.dpsi_dt(&ws, t);
        if time_varying_alpha {
            dt_part += derivative5(|tt| col(&ws, tt), t) * psi;
        }
        out.rows_mut(d * (n + 1), d).copy_from(&dt_part);
        Ok(out)
    };
    let stacked = gauss_legendre_adaptive(integrand, base, w[axis], QUAD_TOL)?;
    let mut grad = DMatrix::zeros(d, n);
    for j in (0..n).filter(|&j| j != axis) {
        grad.set_column(j, &stacked.rows(d * (1 + j), d));
    }
    let jac = par.alpha_jacobian(w, t);
    grad.set_column(axis, &(jac.column(axis) * goal.psi(w, t)));
    Ok(PsiValue {
        value: stacked.rows(0, d).into_owned(),
        grad,
        dt: stacked.rows(d * (n + 1), d).into_owned(),
    })
}

/// Quadrature provider along coordinate `axis`, integrating from `base`.
pub fn psi_provider_quad(goal: &GoalSpec, par: &Parameterization, axis: usize, base: f64) -> PsiProvider {
    PsiProvider {
        dim: par.dim(),
        imp: ProviderImpl::Quad {
            goal: goal.clone(),
            par: par.clone(),
            axis,
            base,
        },
    }
}

/// `Psi ≡ 0`, valid when `alpha` does not depend on the `dependent`
/// coordinates. Independence is checked at `samples` points of `sample_box`.
pub fn psi_provider_independent(
    par: &Parameterization,
    dependent: &[usize],
    sample_box: &SampleBox,
    samples: usize,
    seed: u64,
) -> Result<PsiProvider> {
    let mut rng = seeded_rng(seed);
    for _ in 0..samples {
        let w = sample_box.sample(&mut rng);
        let jac = par.alpha_jacobian(&w, 0.0);
        for &j in dependent {
            let v = jac.column(j).amax();
            if v > PDE_TOLERANCE {
                return Err(Error::IndependenceViolated {
                    coordinate: j,
                    value: v,
                });
            }
        }
    }
    Ok(PsiProvider {
        dim: par.dim(),
        imp: ProviderImpl::Zero,
    })
}

/// Largest realization PDE residual over the `dependent` coordinates at `w`,
/// relative to `max(1, |psi ∂alpha/∂w_j|)`.
pub fn pde_residual(
    provider: &PsiProvider,
    goal: &GoalSpec,
    par: &Parameterization,
    dependent: &[usize],
    w: &DVector<f64>,
    t: f64,
) -> Result<(usize, f64)> {
    let pv = provider.evaluate(w, t)?;
    let psi = goal.psi(w, t);
    let jac = par.alpha_jacobian(w, t);
    let mut worst = (dependent.first().copied().unwrap_or(0), 0.0);
    for &j in dependent {
        let target = jac.column(j) * psi;
        let r = (pv.grad.column(j) - &target).amax() / target.amax().max(1.0);
        if r > worst.1 {
            worst = (j, r);
        }
    }
    Ok(worst)
}

/// Finite-form estimator configuration. The integral state lives in the
/// closed-loop state vector.
#[derive(Clone)]
pub struct FiniteFormEstimator {
    gain: Gain,
    provider: PsiProvider,
    dependent: Vec<usize>,
    beta: Option<ScalarField>,
    leak: f64,
    modulation: Option<Signal>,
}

impl fmt::Debug for FiniteFormEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteFormEstimator")
            .field("gain", &self.gain)
            .field("provider", &self.provider)
            .field("dependent", &self.dependent)
            .field("beta", &self.beta.is_some())
            .field("leak", &self.leak)
            .field("modulation", &self.modulation.is_some())
            .finish()
    }
}

impl FiniteFormEstimator {
    /// `dependent` lists the coordinates of `w` whose dynamics carry unknown
    /// parameters; the provider must satisfy the PDE along them.
    pub fn new(gain: Gain, provider: PsiProvider, dependent: Vec<usize>) -> Result<Self> {
        if gain.dim() != provider.dim() {
            return Err(Error::DimensionMismatch {
                context: "gain vs provider",
                expected: provider.dim(),
                got: gain.dim(),
            });
        }
        Ok(Self {
            gain,
            provider,
            dependent,
            beta: None,
            leak: 0.0,
            modulation: None,
        })
    }

    /// Replaces `phi(psi)` in the integral channel by `beta(w, t)`.
    pub fn with_beta(mut self, beta: ScalarField) -> Self {
        self.beta = Some(beta);
        self
    }

    /// Leakage `-λ theta_hat` on the adaptation law.
    pub fn with_leakage(mut self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("leakage must be >= 0, got {lambda}")));
        }
        self.leak = lambda;
        Ok(self)
    }

    /// Scales `phi(psi)` by `1 + F(t)`.
    pub fn with_modulation(mut self, f: Signal) -> Self {
        self.modulation = Some(f);
        self
    }

    pub fn gain(&self) -> &Gain {
        &self.gain
    }

    pub fn provider(&self) -> &PsiProvider {
        &self.provider
    }

    pub fn dependent(&self) -> &[usize] {
        &self.dependent
    }

    pub fn leak(&self) -> f64 {
        self.leak
    }

    pub fn dim(&self) -> usize {
        self.gain.dim()
    }

    /// `1 + F(t)`, or 1 without modulation.
    pub fn modulation_factor(&self, t: f64) -> f64 {
        1.0 + self.modulation.as_ref().map_or(0.0, |f| f(t))
    }

    /// Drive of the integral channel: `beta(w, t)` if set, else
    /// `phi(psi) (1 + F(t))`.
    pub fn base(&self, goal: &GoalSpec, w: &DVector<f64>, t: f64) -> f64 {
        match &self.beta {
            Some(beta) => beta(w, t),
            None => goal.phi(goal.psi(w, t)) * self.modulation_factor(t),
        }
    }

    /// `psi alpha - Psi`.
    pub fn theta_p(&self, goal: &GoalSpec, par: &Parameterization, w: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        Ok(par.alpha(w, t) * goal.psi(w, t) - self.provider.value(w, t)?)
    }

    pub fn theta_hat(
        &self,
        goal: &GoalSpec,
        par: &Parameterization,
        w: &DVector<f64>,
        theta_i: &DVector<f64>,
        t: f64,
    ) -> Result<DVector<f64>> {
        Ok(self.gain.apply(&(self.theta_p(goal, par, w, t)? + theta_i)))
    }

    /// Integral state that makes `theta_hat(w0, t0) = theta_hat0`.
    pub fn theta_i_initial(
        &self,
        goal: &GoalSpec,
        par: &Parameterization,
        w0: &DVector<f64>,
        t0: f64,
        theta_hat0: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(self.gain.apply_inverse(theta_hat0) - self.theta_p(goal, par, w0, t0)?)
    }

    /// `theta_I'` given the known part of `w'`. `delta` is an additive
    /// disturbance on the adaptation law.
    #[allow(clippy::too_many_arguments)]
    pub fn theta_i_rate(
        &self,
        goal: &GoalSpec,
        par: &Parameterization,
        w: &DVector<f64>,
        theta_i: &DVector<f64>,
        t: f64,
        known_velocity: &DVector<f64>,
        delta: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let psi = goal.psi(w, t);
        let alpha = par.alpha(w, t);
        let jac = par.alpha_jacobian(w, t);
        let pv = self.provider.evaluate(w, t)?;
        let base = self.base(goal, w, t);
        let mismatch = jac * psi - &pv.grad;
        let mut rate = &alpha * base + &pv.dt - par.alpha_dt(w, t) * psi - mismatch * known_velocity;
        if self.leak > 0.0 || delta.is_some() {
            let theta_hat = self.gain.apply(&(&alpha * psi - &pv.value + theta_i));
            let mut extra = theta_hat * (-self.leak);
            if let Some(d) = delta {
                extra += d;
            }
            rate += self.gain.apply_inverse(&extra);
        }
        Ok(rate)
    }

    /// `theta_I'` on a partitioned plant with `w = x`, using only `f` and
    /// `g`. The plant's adaptation disturbance, if any, is injected.
    #[allow(clippy::too_many_arguments)]
    pub fn theta_i_rhs(
        &self,
        goal: &GoalSpec,
        par: &Parameterization,
        plant: &PartitionedPlant,
        x: &DVector<f64>,
        theta_i: &DVector<f64>,
        t: f64,
        u: f64,
    ) -> Result<DVector<f64>> {
        let known = plant.f(x) + plant.g(x) * u;
        let delta = plant.adaptation_disturbance(t);
        self.theta_i_rate(goal, par, x, theta_i, t, &known, delta.as_ref())
    }

    /// Worst PDE residual over `samples` points; errors above [`PDE_TOLERANCE`].
    pub fn validate_provider(
        &self,
        goal: &GoalSpec,
        par: &Parameterization,
        sample_box: &SampleBox,
        samples: usize,
        seed: u64,
    ) -> Result<f64> {
        let mut rng = seeded_rng(seed);
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let w = sample_box.sample(&mut rng);
            let (coordinate, r) = pde_residual(&self.provider, goal, par, &self.dependent, &w, 0.0)?;
            if r > PDE_TOLERANCE {
                return Err(Error::RealizabilityViolated {
                    coordinate,
                    residual: r,
                });
            }
            worst = worst.max(r);
        }
        Ok(worst)
    }
}

/// Finite-difference `theta_hat'` minus `Γ (psi' + base) alpha` along a
/// sampled trajectory, with `base` as in [`FiniteFormEstimator::base`].
/// Both derivatives use second-order differences. Leakage and adaptation
/// disturbances show up in the residual.
pub fn realization_identity_residual(
    times: &[f64],
    ws: &[DVector<f64>],
    theta_hats: &[DVector<f64>],
    est: &FiniteFormEstimator,
    goal: &GoalSpec,
    par: &Parameterization,
) -> Vec<DVector<f64>> {
    let n = times.len();
    let d = est.dim();
    let psi: Vec<f64> = ws.iter().zip(times).map(|(w, t)| goal.psi(w, *t)).collect();
    let dpsi = finite_difference(times, &psi);
    let dtheta: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let comp: Vec<f64> = theta_hats.iter().map(|th| th[i]).collect();
            finite_difference(times, &comp)
        })
        .collect();
    (0..n)
        .map(|k| {
            let lhs = DVector::from_iterator(d, (0..d).map(|i| dtheta[i][k]));
            let alpha = par.alpha(&ws[k], times[k]);
            lhs - est
                .gain()
                .apply(&(alpha * (dpsi[k] + est.base(goal, &ws[k], times[k]))))
        })
        .collect()
}

/// Attaches an estimator to a slice of a closed-loop state vector.
#[derive(Clone)]
pub struct EstimatorBinding {
    pub name: String,
    pub estimator: FiniteFormEstimator,
    pub goal: GoalSpec,
    pub par: Parameterization,
    /// State indices forming `w`; `None` means the whole state.
    pub view: Option<Vec<usize>>,
    pub theta_i: Range<usize>,
}

impl fmt::Debug for EstimatorBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EstimatorBinding")
            .field("name", &self.name)
            .field("view", &self.view)
            .field("theta_i", &self.theta_i)
            .finish_non_exhaustive()
    }
}

impl EstimatorBinding {
    pub fn w_of(&self, state: &DVector<f64>) -> DVector<f64> {
        match &self.view {
            Some(idx) => DVector::from_iterator(idx.len(), idx.iter().map(|&i| state[i])),
            None => state.clone(),
        }
    }

    pub fn theta_i_of(&self, state: &DVector<f64>) -> DVector<f64> {
        state.rows(self.theta_i.start, self.theta_i.len()).into_owned()
    }

    pub fn theta_hat(&self, state: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.estimator
            .theta_hat(&self.goal, &self.par, &self.w_of(state), &self.theta_i_of(state), t)
    }

    pub fn realization_residual(&self, trace: &SimTrace) -> Result<Vec<DVector<f64>>> {
        let ws: Vec<DVector<f64>> = trace.states.iter().map(|s| self.w_of(s)).collect();
        let ths = trace
            .states
            .iter()
            .zip(&trace.times)
            .map(|(s, t)| self.theta_hat(s, *t))
            .collect::<Result<Vec<_>>>()?;
        Ok(realization_identity_residual(
            &trace.times,
            &ws,
            &ths,
            &self.estimator,
            &self.goal,
            &self.par,
        ))
    }

    /// `alpha(w(t), t)` along a trace.
    pub fn regressor_series(&self, trace: &SimTrace) -> Vec<DVector<f64>> {
        trace
            .states
            .iter()
            .zip(&trace.times)
            .map(|(s, t)| self.par.alpha(&self.w_of(s), *t))
            .collect()
    }

    /// `sup_t |residual|_∞`.
    pub fn sup_realization_residual(&self, trace: &SimTrace) -> Result<f64> {
        Ok(self
            .realization_residual(trace)?
            .iter()
            .map(|r| r.amax())
            .fold(0.0, f64::max))
    }
}

/// Convenience for building closed-form providers of scalar estimators.
pub fn closed_form_scalar<V, G>(value: V, grad: G) -> PsiProvider
where
    V: Fn(&DVector<f64>, f64) -> f64 + Send + Sync + 'static,
    G: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
{
    PsiProvider::closed_form(
        1,
        Arc::new(move |w, t| DVector::from_element(1, value(w, t))),
        Arc::new(move |w, t| {
            let g = grad(w, t);
            DMatrix::from_row_slice(1, g.len(), g.as_slice())
        }),
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{matrix_field, scalar_field, vector_field};
    use crate::goal::{Sector, TargetDynamics};

    fn goal() -> GoalSpec {
        GoalSpec::new(
            scalar_field(|x, _| x[0] - 1.0),
            vector_field(|_, _| DVector::from_element(1, 1.0)),
            TargetDynamics::linear(1.0),
        )
    }

    fn par() -> Parameterization {
        Parameterization::new(
            1,
            vector_field(|x, _| DVector::from_element(1, x[0] * x[0])),
            matrix_field(|x, _| DMatrix::from_element(1, 1, 2.0 * x[0])),
            Arc::new(|x, th, _| th[0] * x[0] * x[0]),
            Sector::unit(),
        )
    }

    fn closed() -> PsiProvider {
        closed_form_scalar(
            |x, _| 2.0 / 3.0 * x[0].powi(3) - x[0] * x[0],
            |x, _| DVector::from_element(1, 2.0 * x[0] * x[0] - 2.0 * x[0]),
        )
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn gain_inverse_and_norm() {
        let g = Gain::matrix(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let prod = g.as_matrix() * g.inverse();
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-14);
        let w = DVector::from_vec(vec![1.0, -1.0]);
        assert!((g.inv_norm_sq(&w) - 2.0).abs() < 1e-14);
        assert!(Gain::matrix(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(Gain::matrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(Gain::scalar(1, -1.0).is_err());
    }

    #[test]
    fn theta_hat_stage_one_cubic() {
        let est = FiniteFormEstimator::new(Gain::scalar(1, 1.0).unwrap(), closed(), vec![0]).unwrap();
        for x in [-1.5, 0.0, 0.7, 2.0] {
            let th = est.theta_hat(&goal(), &par(), &v(x), &v(0.0), 0.0).unwrap();
            assert!((th[0] - x.powi(3) / 3.0).abs() < 1e-14);
        }
        let th = est.theta_hat(&goal(), &par(), &v(1.0), &v(2.0 / 3.0), 0.0).unwrap();
        assert!((th[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn theta_hat_zero_on_manifold_with_zero_psi() {
        let provider = PsiProvider::closed_form(
            1,
            vector_field(|_, _| DVector::zeros(1)),
            matrix_field(|_, _| DMatrix::zeros(1, 1)),
            None,
        );
        let est = FiniteFormEstimator::new(Gain::scalar(1, 1.0).unwrap(), provider, vec![]).unwrap();
        let th = est.theta_hat(&goal(), &par(), &v(1.0), &v(0.0), 0.0).unwrap();
        assert_eq!(th[0], 0.0);
    }

    #[test]
    fn integral_rate_stage_one() {
        let est = FiniteFormEstimator::new(Gain::scalar(1, 1.0).unwrap(), closed(), vec![0]).unwrap();
        let plant = crate::plant::scalar_quadratic_plant(1.0);
        for x in [-1.0, 0.5, 2.0] {
            let r = est
                .theta_i_rhs(&goal(), &par(), &plant, &v(x), &v(0.3), 0.0, -4.0)
                .unwrap();
            assert!((r[0] - (x - 1.0) * x * x).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_regressor_rate_is_phi_alpha() {
        let p = Parameterization::new(
            1,
            vector_field(|_, _| DVector::from_element(1, 3.0)),
            matrix_field(|_, _| DMatrix::zeros(1, 1)),
            Arc::new(|_, th, _| 3.0 * th[0]),
            Sector::unit(),
        );
        let provider = psi_provider_independent(&p, &[0], &SampleBox::symmetric(1, 3.0), 100, 1).unwrap();
        let est = FiniteFormEstimator::new(Gain::scalar(1, 1.0).unwrap(), provider, vec![0]).unwrap();
        let r = est
            .theta_i_rate(&goal(), &p, &v(2.5), &v(0.0), 0.0, &v(7.0), None)
            .unwrap();
        assert_eq!(r[0], 1.5 * 3.0);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let q = psi_provider_quad(&goal(), &par(), 0, 0.0);
        let c = closed();
        for x in [-2.0, -0.3, 0.0, 1.0, 2.7] {
            let a = q.evaluate(&v(x), 0.0).unwrap();
            let b = c.evaluate(&v(x), 0.0).unwrap();
            assert!((a.value[0] - b.value[0]).abs() < 1e-9);
            assert!((a.grad[(0, 0)] - b.grad[(0, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_half_square_when_psi_equals_alpha() {
        // psi = alpha = sin(x) gives Psi = sin(x)^2 / 2
        let g = GoalSpec::new(
            scalar_field(|x, _| x[0].sin()),
            vector_field(|x, _| DVector::from_element(1, x[0].cos())),
            TargetDynamics::linear(1.0),
        );
        let p = Parameterization::new(
            1,
            vector_field(|x, _| DVector::from_element(1, x[0].sin())),
            matrix_field(|x, _| DMatrix::from_element(1, 1, x[0].cos())),
            Arc::new(|x, th, _| th[0] * x[0].sin()),
            Sector::unit(),
        );
        let q = psi_provider_quad(&g, &p, 0, 0.0);
        for x in [-1.0, 0.4, 2.0] {
            let val = q.value(&v(x), 0.0).unwrap()[0];
            assert!((val - 0.5 * x.sin().powi(2)).abs() < 1e-10);
        }
    }

    #[test]
    fn quadrature_frozen_coordinate_gradient() {
        // psi = x1 x2, alpha = x2^2 / 2 + x1 x2, integrate along x2 from 0:
        // Psi = x1 ∫ s (s + x1) ds = x1 x2^3 / 3 + x1^2 x2^2 / 2
        let g = GoalSpec::new(
            scalar_field(|x, _| x[0] * x[1]),
            vector_field(|x, _| DVector::from_vec(vec![x[1], x[0]])),
            TargetDynamics::linear(1.0),
        );
        let p = Parameterization::new(
            1,
            vector_field(|x, _| DVector::from_element(1, 0.5 * x[1] * x[1] + x[0] * x[1])),
            matrix_field(|x, _| DMatrix::from_row_slice(1, 2, &[x[1], x[1] + x[0]])),
            Arc::new(|_, _, _| 0.0),
            Sector::unit(),
        );
        let q = psi_provider_quad(&g, &p, 1, 0.0);
        let w = DVector::from_vec(vec![1.3, -0.8]);
        let pv = q.evaluate(&w, 0.0).unwrap();
        let (a, b) = (w[0], w[1]);
        let exact = a * b.powi(3) / 3.0 + a * a * b * b / 2.0;
        let d_a = b.powi(3) / 3.0 + a * b * b;
        let d_b = a * b * b + a * a * b;
        assert!((pv.value[0] - exact).abs() < 1e-12);
        assert!((pv.grad[(0, 0)] - d_a).abs() < 1e-9);
        assert!((pv.grad[(0, 1)] - d_b).abs() < 1e-12);
    }

    #[test]
    fn independent_provider_checks() {
        let time_only = Parameterization::new(
            1,
            vector_field(|_, t| DVector::from_element(1, t.sin())),
            matrix_field(|_, _| DMatrix::zeros(1, 2)),
            Arc::new(|_, _, _| 0.0),
            Sector::unit(),
        );
        let bx = SampleBox::symmetric(2, 2.0);
        assert!(psi_provider_independent(&time_only, &[1], &bx, 100, 3).is_ok());
        let x1_only = Parameterization::new(
            1,
            vector_field(|x, _| DVector::from_element(1, x[0])),
            matrix_field(|_, _| DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
            Arc::new(|_, _, _| 0.0),
            Sector::unit(),
        );
        assert!(psi_provider_independent(&x1_only, &[1], &bx, 100, 3).is_ok());
        let x2 = Parameterization::new(
            1,
            vector_field(|x, _| DVector::from_element(1, x[1])),
            matrix_field(|_, _| DMatrix::from_row_slice(1, 2, &[0.0, 1.0])),
            Arc::new(|_, _, _| 0.0),
            Sector::unit(),
        );
        assert!(matches!(
            psi_provider_independent(&x2, &[1], &bx, 100, 3),
            Err(Error::IndependenceViolated { coordinate: 1, .. })
        ));
    }

    #[test]
    fn pde_validation_rejects_wrong_potential() {
        let wrong = closed_form_scalar(|x, _| x[0].powi(3), |x, _| DVector::from_element(1, 3.0 * x[0] * x[0]));
        let est = FiniteFormEstimator::new(Gain::scalar(1, 1.0).unwrap(), wrong, vec![0]).unwrap();
        let bx = SampleBox::symmetric(1, 3.0);
        assert!(matches!(
            est.validate_provider(&goal(), &par(), &bx, 50, 7),
            Err(Error::RealizabilityViolated { .. })
        ));
        let est = FiniteFormEstimator::new(Gain::scalar(1, 1.0).unwrap(), closed(), vec![0]).unwrap();
        assert!(est.validate_provider(&goal(), &par(), &bx, 1000, 7).unwrap() < 1e-12);
    }

    #[test]
    fn leakage_must_be_nonnegative() {
        let est = FiniteFormEstimator::new(Gain::scalar(1, 1.0).unwrap(), closed(), vec![0]).unwrap();
        assert!(est.clone().with_leakage(-0.1).is_err());
        assert_eq!(est.with_leakage(0.1).unwrap().leak(), 0.1);
    }
}
