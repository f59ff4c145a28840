//! Goal functions, target dynamics and the certainty-equivalence control.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fields::{MatrixField, ScalarField, UncertainScalar, VectorField};
use crate::numeric::{gauss_legendre_adaptive, seeded_rng, SampleBox};
use crate::plant::PartitionedPlant;

/// Default lower bound on `|L_g psi|`.
pub const DEFAULT_DELTA1: f64 = 1e-6;

type Phi = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Target dynamics `psi' = -phi(psi)`.
#[derive(Clone)]
pub enum TargetDynamics {
    /// `k psi`
    Linear { k: f64 },
    /// `k psi^3`
    Cubic { k: f64 },
    /// `k tanh(psi)`
    Tanh { k: f64 },
    /// Any odd-signed increasing map; `dphi` is its derivative.
    Custom { phi: Phi, dphi: Phi },
}

impl fmt::Debug for TargetDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { k } => write!(f, "Linear {{ k: {k} }}"),
            Self::Cubic { k } => write!(f, "Cubic {{ k: {k} }}"),
            Self::Tanh { k } => write!(f, "Tanh {{ k: {k} }}"),
            Self::Custom { .. } => f.write_str("Custom"),
        }
    }
}

impl TargetDynamics {
    pub fn linear(k: f64) -> Self {
        Self::Linear { k }
    }

    pub fn phi(&self, psi: f64) -> f64 {
        match self {
            Self::Linear { k } => k * psi,
            Self::Cubic { k } => k * psi * psi * psi,
            Self::Tanh { k } => k * psi.tanh(),
            Self::Custom { phi, .. } => phi(psi),
        }
    }

    pub fn dphi(&self, psi: f64) -> f64 {
        match self {
            Self::Linear { k } => *k,
            Self::Cubic { k } => 3.0 * k * psi * psi,
            Self::Tanh { k } => {
                let c = psi.cosh();
                k / (c * c)
            }
            Self::Custom { dphi, .. } => dphi(psi),
        }
    }

    /// `Q(psi) = ∫_0^psi phi`.
    pub fn q(&self, psi: f64) -> f64 {
        match self {
            Self::Linear { k } => 0.5 * k * psi * psi,
            Self::Cubic { k } => 0.25 * k * psi.powi(4),
            // ln cosh evaluated without overflow
            Self::Tanh { k } => {
                let a = psi.abs();
                k * (a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2)
            }
            Self::Custom { phi, .. } => {
                let phi = phi.clone();
                gauss_legendre_adaptive(move |s| Ok(DVector::from_element(1, phi(s))), 0.0, psi, 1e-13)
                    .map(|v| v[0])
                    .unwrap_or(f64::NAN)
            }
        }
    }

    /// Linear gain `K` when the dynamics are `K psi`.
    pub fn linear_gain(&self) -> Option<f64> {
        match self {
            Self::Linear { k } => Some(*k),
            _ => None,
        }
    }
}

/// Goal function `psi(x, t)` with its gradient and target dynamics.
#[derive(Clone)]
pub struct GoalSpec {
    psi: ScalarField,
    grad: VectorField,
    dpsi_dt: Option<ScalarField>,
    phi: TargetDynamics,
    psi_limit: f64,
}

impl fmt::Debug for GoalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GoalSpec")
            .field("phi", &self.phi)
            .field("time_varying", &self.dpsi_dt.is_some())
            .finish_non_exhaustive()
    }
}

impl GoalSpec {
    pub fn new(psi: ScalarField, grad: VectorField, phi: TargetDynamics) -> Self {
        Self {
            psi,
            grad,
            dpsi_dt: None,
            phi,
            psi_limit: 1e8,
        }
    }

    pub fn with_time_derivative(mut self, dpsi_dt: ScalarField) -> Self {
        self.dpsi_dt = Some(dpsi_dt);
        self
    }

    pub fn with_target(mut self, phi: TargetDynamics) -> Self {
        self.phi = phi;
        self
    }

    /// Largest `|psi|` searched by [`lambda_of`].
    pub fn with_psi_limit(mut self, limit: f64) -> Self {
        self.psi_limit = limit;
        self
    }

    pub fn psi(&self, x: &DVector<f64>, t: f64) -> f64 {
        (self.psi)(x, t)
    }

    pub fn grad(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.grad)(x, t)
    }

    pub fn dpsi_dt(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.dpsi_dt.as_ref().map_or(0.0, |f| f(x, t))
    }

    pub fn is_time_varying(&self) -> bool {
        self.dpsi_dt.is_some()
    }

    pub fn target(&self) -> &TargetDynamics {
        &self.phi
    }

    pub fn phi(&self, psi: f64) -> f64 {
        self.phi.phi(psi)
    }

    pub fn q(&self, psi: f64) -> f64 {
        self.phi.q(psi)
    }

    /// Finite-difference cross-check of the supplied gradient and time
    /// derivative at `x`, relative tolerance `tol`.
    pub fn check_gradient(&self, x: &DVector<f64>, t: f64, tol: f64) -> Result<()> {
        let g = self.grad(x, t);
        if g.len() != x.len() {
            return Err(Error::DimensionMismatch {
                context: "goal gradient",
                expected: x.len(),
                got: g.len(),
            });
        }
        for i in 0..x.len() {
            let eps = 1e-6 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (self.psi(&xp, t) - self.psi(&xm, t)) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1.0);
            if rel > tol {
                return Err(Error::GradientMismatch {
                    what: format!("d psi / dx{}", i + 1),
                    rel_err: rel,
                });
            }
        }
        let eps = 1e-6 * t.abs().max(1.0);
        let fd = (self.psi(x, t + eps) - self.psi(x, t - eps)) / (2.0 * eps);
        let given = self.dpsi_dt(x, t);
        let rel = (fd - given).abs() / given.abs().max(1.0);
        if rel > tol {
            return Err(Error::GradientMismatch {
                what: "d psi / dt".into(),
                rel_err: rel,
            });
        }
        Ok(())
    }
}

/// Sector constants of a monotone parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sector {
    pub d: f64,
    pub d1: Option<f64>,
}

impl Sector {
    pub fn new(d: f64, d1: Option<f64>) -> Result<Self> {
        if !(d > 0.0) {
            return Err(Error::InvalidArgument(format!("D must be positive, got {d}")));
        }
        if let Some(d1) = d1 {
            if !(d1 > 0.0) || d1 > d {
                return Err(Error::InvalidArgument(format!(
                    "need 0 < D1 <= D, got D1 = {d1}, D = {d}"
                )));
            }
        }
        Ok(Self { d, d1 })
    }

    /// `D = D1 = 1`, the linearly parameterized case.
    pub fn unit() -> Self {
        Self { d: 1.0, d1: Some(1.0) }
    }
}

/// Regressor `alpha(x, t)` and uncertainty term `z(x, theta, t)`.
#[derive(Clone)]
pub struct Parameterization {
    dim: usize,
    alpha: VectorField,
    alpha_jacobian: MatrixField,
    alpha_dt: Option<VectorField>,
    z: UncertainScalar,
    sector: Sector,
}

impl fmt::Debug for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameterization")
            .field("dim", &self.dim)
            .field("sector", &self.sector)
            .finish_non_exhaustive()
    }
}

impl Parameterization {
    /// `alpha_jacobian` returns the `d × n` matrix `∂alpha/∂x`.
    pub fn new(
        dim: usize,
        alpha: VectorField,
        alpha_jacobian: MatrixField,
        z: UncertainScalar,
        sector: Sector,
    ) -> Self {
        Self {
            dim,
            alpha,
            alpha_jacobian,
            alpha_dt: None,
            z,
            sector,
        }
    }

    /// Builds `z(x, theta, t) = ∂psi/∂x · nu(x, theta)` from the plant.
    pub fn from_plant(
        plant: &PartitionedPlant,
        goal: &GoalSpec,
        alpha: VectorField,
        alpha_jacobian: MatrixField,
        sector: Sector,
    ) -> Self {
        let plant = plant.clone();
        let goal = goal.clone();
        let dim = plant.theta_dim();
        let z: UncertainScalar = Arc::new(move |x, th, t| goal.grad(x, t).dot(&plant.nu_full(x, th)));
        Self::new(dim, alpha, alpha_jacobian, z, sector)
    }

    pub fn with_time_derivative(mut self, alpha_dt: VectorField) -> Self {
        self.alpha_dt = Some(alpha_dt);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sector(&self) -> Sector {
        self.sector
    }

    pub fn alpha(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.alpha)(x, t)
    }

    pub fn alpha_jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.alpha_jacobian)(x, t)
    }

    pub fn alpha_dt(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.alpha_dt
            .as_ref()
            .map_or_else(|| DVector::zeros(self.dim), |f| f(x, t))
    }

    pub fn is_time_varying(&self) -> bool {
        self.alpha_dt.is_some()
    }

    pub fn z(&self, x: &DVector<f64>, theta: &DVector<f64>, t: f64) -> f64 {
        (self.z)(x, theta, t)
    }

    /// Finite-difference cross-check of the regressor Jacobian.
    pub fn check_jacobian(&self, x: &DVector<f64>, t: f64, tol: f64) -> Result<()> {
        let j = self.alpha_jacobian(x, t);
        if j.nrows() != self.dim || j.ncols() != x.len() {
            return Err(Error::DimensionMismatch {
                context: "alpha jacobian columns",
                expected: x.len(),
                got: j.ncols(),
            });
        }
        for i in 0..x.len() {
            let eps = 1e-6 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (self.alpha(&xp, t) - self.alpha(&xm, t)) / (2.0 * eps);
            for r in 0..self.dim {
                let rel = (fd[r] - j[(r, i)]).abs() / j[(r, i)].abs().max(1.0);
                if rel > tol {
                    return Err(Error::GradientMismatch {
                        what: format!("d alpha_{} / dx{}", r + 1, i + 1),
                        rel_err: rel,
                    });
                }
            }
        }
        Ok(())
    }

    /// Samples the sector conditions on `(x, theta_a, theta_b)` triples.
    pub fn sample_monotonicity(&self, x_box: &SampleBox, theta_box: &SampleBox, draws: usize, seed: u64) -> Result<()> {
        let mut rng = seeded_rng(seed);
        for _ in 0..draws {
            let x = x_box.sample(&mut rng);
            let a = theta_box.sample(&mut rng);
            let b = theta_box.sample(&mut rng);
            let t = 0.0;
            let dz = self.z(&x, &a, t) - self.z(&x, &b, t);
            let lin = self.alpha(&x, t).dot(&(&a - &b));
            if dz.abs() <= 1e-12 * (1.0 + lin.abs()) {
                continue;
            }
            if dz * lin <= 0.0 {
                return Err(Error::MonotonicityViolation(format!(
                    "sign of z difference {dz:e} against alpha'(a - b) = {lin:e}"
                )));
            }
            let slack = 1e-9 * (1.0 + lin.abs());
            if dz.abs() > self.sector.d * lin.abs() + slack {
                return Err(Error::MonotonicityViolation(format!(
                    "|dz| = {dz:e} exceeds D |alpha'(a - b)| = {:e}",
                    self.sector.d * lin.abs()
                )));
            }
            if let Some(d1) = self.sector.d1 {
                if dz.abs() + slack < d1 * lin.abs() {
                    return Err(Error::MonotonicityViolation(format!(
                        "|dz| = {dz:e} below D1 |alpha'(a - b)| = {:e}",
                        d1 * lin.abs()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Control that solves `psi' = -target + z(x, theta, t) - z(x, theta_hat, t)`
/// for the given target value.
pub(crate) fn control_for_target(
    plant: &PartitionedPlant,
    goal: &GoalSpec,
    par: &Parameterization,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    t: f64,
    target: f64,
    delta1: f64,
) -> Result<f64> {
    let grad = goal.grad(x, t);
    let lg = grad.dot(&plant.g(x));
    if lg.abs() <= delta1 {
        return Err(Error::SingularControlDirection { lg, delta1 });
    }
    let lf = grad.dot(&plant.f(x));
    Ok((-target - lf - par.z(x, theta_hat, t) - goal.dpsi_dt(x, t)) / lg)
}

/// Certainty-equivalence control evaluated at the estimate `theta_hat`.
pub fn certainty_equiv_control(
    plant: &PartitionedPlant,
    goal: &GoalSpec,
    par: &Parameterization,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    t: f64,
    delta1: f64,
) -> Result<f64> {
    let psi = goal.psi(x, t);
    control_for_target(plant, goal, par, x, theta_hat, t, goal.phi(psi), delta1)
}

/// Finite-difference `psi'` minus the error-model right-hand side
/// `-phi(psi) + z(x, theta*, t) - z(x, theta_hat, t)`, sample by sample.
pub fn error_residual(
    times: &[f64],
    states: &[DVector<f64>],
    theta_hat: &[DVector<f64>],
    goal: &GoalSpec,
    par: &Parameterization,
    theta_star: &DVector<f64>,
) -> Vec<f64> {
    let psi: Vec<f64> = states.iter().zip(times).map(|(x, t)| goal.psi(x, *t)).collect();
    let dpsi = crate::numeric::finite_difference(times, &psi);
    (0..times.len())
        .map(|k| {
            let (x, t) = (&states[k], times[k]);
            let model = -goal.phi(psi[k]) + par.z(x, theta_star, t) - par.z(x, &theta_hat[k], t);
            dpsi[k] - model
        })
        .collect()
}

/// `Λ(d)`: the `|psi| >= 0` with `Q(|psi|) = d`, by bisection.
pub fn lambda_of(goal: &GoalSpec, d: f64) -> Result<f64> {
    lambda_of_target(&goal.phi, d, goal.psi_limit)
}

/// [`lambda_of`] for bare target dynamics, searching `|psi| <= limit`.
pub fn lambda_of_target(target: &TargetDynamics, d: f64, limit: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::InvalidArgument(format!("Λ needs d >= 0, got {d}")));
    }
    if d == 0.0 {
        return Ok(0.0);
    }
    let q = |s: f64| target.q(s);
    let mut hi = 1.0;
    while q(hi) < d {
        hi *= 2.0;
        if hi > limit {
            return Err(Error::NoSolution { d, limit });
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-13 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if q(mid) < d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{matrix_field, scalar_field, vector_field};
    use crate::plant::scalar_quadratic_plant;

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

    #[test]
    fn control_hand_values() {
        let plant = scalar_quadratic_plant(1.0);
        let goal = scalar_goal();
        let par = scalar_par(&goal);
        let x = DVector::from_element(1, 2.0);
        let u0 = certainty_equiv_control(&plant, &goal, &par, &x, &DVector::zeros(1), 0.0, DEFAULT_DELTA1).unwrap();
        assert_eq!(u0, -1.0);
        let u3 = certainty_equiv_control(
            &plant,
            &goal,
            &par,
            &x,
            &DVector::from_element(1, 3.0),
            0.0,
            DEFAULT_DELTA1,
        )
        .unwrap();
        assert_eq!(u3, -13.0);
    }

    #[test]
    fn matched_on_manifold_holds_psi() {
        let plant = scalar_quadratic_plant(1.0);
        let goal = scalar_goal();
        let par = scalar_par(&goal);
        let x = DVector::from_element(1, 1.0);
        let th = DVector::from_element(1, 1.0);
        let u = certainty_equiv_control(&plant, &goal, &par, &x, &th, 0.0, DEFAULT_DELTA1).unwrap();
        let dx = plant.eval_dynamics(&x, u, 0.0).unwrap();
        assert_eq!(goal.grad(&x, 0.0).dot(&dx), 0.0);
    }

    #[test]
    fn singular_direction_is_reported() {
        let plant = scalar_quadratic_plant(1.0);
        let goal = GoalSpec::new(
            scalar_field(|x, _| x[0] * x[0] - 1.0),
            vector_field(|x, _| DVector::from_element(1, 2.0 * x[0])),
            TargetDynamics::linear(1.0),
        );
        let par = scalar_par(&goal);
        let r = certainty_equiv_control(
            &plant,
            &goal,
            &par,
            &DVector::zeros(1),
            &DVector::zeros(1),
            0.0,
            DEFAULT_DELTA1,
        );
        assert!(matches!(r, Err(Error::SingularControlDirection { .. })));
    }

    #[test]
    fn lambda_closed_forms() {
        let k = 3.0;
        let g = scalar_goal().with_target(TargetDynamics::linear(k));
        assert!((lambda_of(&g, 1.7).unwrap() - (2.0 * 1.7 / k).sqrt()).abs() < 1e-10);
        assert_eq!(lambda_of(&g, 0.0).unwrap(), 0.0);
        let c = scalar_goal().with_target(TargetDynamics::Cubic { k: 1.0 });
        assert!((lambda_of(&c, 0.25).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lambda_no_solution_for_saturating_phi() {
        // Q of tanh grows linearly, so a small limit is exceeded
        let g = scalar_goal()
            .with_target(TargetDynamics::Tanh { k: 1.0 })
            .with_psi_limit(10.0);
        assert!(matches!(lambda_of(&g, 100.0), Err(Error::NoSolution { .. })));
    }

    #[test]
    fn custom_phi_q_by_quadrature() {
        let phi: Phi = Arc::new(|s| s + s * s * s);
        let dphi: Phi = Arc::new(|s| 1.0 + 3.0 * s * s);
        let t = TargetDynamics::Custom { phi, dphi };
        assert!((t.q(2.0) - (2.0 + 4.0)).abs() < 1e-12);
        assert!((t.q(-2.0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_catches_wrong_gradient() {
        let good = scalar_goal();
        assert!(good.check_gradient(&DVector::from_element(1, 0.3), 0.0, 1e-5).is_ok());
        let bad = GoalSpec::new(
            scalar_field(|x, _| x[0] * x[0]),
            vector_field(|x, _| DVector::from_element(1, x[0])),
            TargetDynamics::linear(1.0),
        );
        assert!(matches!(
            bad.check_gradient(&DVector::from_element(1, 2.0), 0.0, 1e-5),
            Err(Error::GradientMismatch { .. })
        ));
    }

    #[test]
    fn sector_validation() {
        assert!(Sector::new(1.0, Some(2.0)).is_err());
        assert!(Sector::new(0.0, None).is_err());
        assert!(Sector::new(5.0, Some(0.1)).is_ok());
    }
}
