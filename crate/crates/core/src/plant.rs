//! Plant families with an explicit uncertainty partition.
//!
//! The true parameter vector is stored inside the plant but can only be read
//! with a [`SimulatorKey`], which is constructible inside this crate alone.
//! Controllers built from the public API therefore never see it.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fields::{Signal, VectorSignal};
use crate::numeric::SampleBox;

/// Capability token for reading true parameters.
pub struct SimulatorKey(());

impl SimulatorKey {
    pub(crate) fn new() -> Self {
        SimulatorKey(())
    }
}

type StateMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type UncertainMap = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// `x1' = f1(x) + g1(x) u`, `x2' = f2(x) + nu(x, theta) + g2(x) u`, with
/// `x1 = x[..m]` and `x2 = x[m..]`.
#[derive(Clone)]
pub struct PartitionedPlant {
    n: usize,
    m: usize,
    theta_true: DVector<f64>,
    f: StateMap,
    g: StateMap,
    nu: UncertainMap,
    disturbance: Option<Signal>,
    adaptation_disturbance: Option<VectorSignal>,
}

impl fmt::Debug for PartitionedPlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartitionedPlant")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("theta_dim", &self.theta_true.len())
            .finish_non_exhaustive()
    }
}

impl PartitionedPlant {
    pub fn new<F, G, N>(n: usize, m: usize, theta_true: DVector<f64>, f: F, g: G, nu: N) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        N: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if n == 0 || m > n {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= m <= n and n > 0, got n={n}, m={m}"
            )));
        }
        Ok(Self {
            n,
            m,
            theta_true,
            f: Arc::new(f),
            g: Arc::new(g),
            nu: Arc::new(nu),
            disturbance: None,
            adaptation_disturbance: None,
        })
    }

    /// Additive disturbance `eps(t)` on the last state coordinate.
    pub fn with_disturbance(mut self, eps: Signal) -> Self {
        self.disturbance = Some(eps);
        self
    }

    /// Disturbance `delta(t)` acting on the adaptation channel.
    pub fn with_adaptation_disturbance(mut self, delta: VectorSignal) -> Self {
        self.adaptation_disturbance = Some(delta);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_true.len()
    }

    /// Indices of the uncertainty-dependent coordinates.
    pub fn dependent(&self) -> Vec<usize> {
        (self.m..self.n).collect()
    }

    pub fn theta_true(&self, _key: &SimulatorKey) -> &DVector<f64> {
        &self.theta_true
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "plant state",
                expected: self.n,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }

    pub fn g(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.g)(x)
    }

    /// `nu(x, theta)` for an arbitrary parameter vector, padded with zeros
    /// over the independent partition so it has length `n`.
    pub fn nu_full(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let nu = (self.nu)(x, theta);
        let mut out = DVector::zeros(self.n);
        out.rows_mut(self.m, self.n - self.m).copy_from(&nu);
        out
    }

    pub fn disturbance(&self, t: f64) -> f64 {
        self.disturbance.as_ref().map_or(0.0, |e| e(t))
    }

    pub fn adaptation_disturbance(&self, t: f64) -> Option<DVector<f64>> {
        self.adaptation_disturbance.as_ref().map(|d| d(t))
    }

    pub fn has_disturbances(&self) -> bool {
        self.disturbance.is_some() || self.adaptation_disturbance.is_some()
    }

    /// Right-hand side under the true parameters.
    pub fn eval_dynamics(&self, x: &DVector<f64>, u: f64, t: f64) -> Result<DVector<f64>> {
        self.check_state(x)?;
        let nu = (self.nu)(x, &self.theta_true);
        if nu.len() != self.n - self.m {
            return Err(Error::DimensionMismatch {
                context: "nu output",
                expected: self.n - self.m,
                got: nu.len(),
            });
        }
        let mut dx = self.f(x) + self.g(x) * u;
        for (i, v) in nu.iter().enumerate() {
            dx[self.m + i] += v;
        }
        dx[self.n - 1] += self.disturbance(t);
        Ok(dx)
    }
}

/// Plant `x1' = x1^2 theta0 + x2`, `x2' = x1 theta1 + x2 theta2 + u`
/// with `theta = (1, 1, 0.5)`.
pub fn example_plant_linear() -> PartitionedPlant {
    PartitionedPlant::new(
        2,
        0,
        DVector::from_vec(vec![1.0, 1.0, 0.5]),
        |x| DVector::from_vec(vec![x[1], 0.0]),
        |_| DVector::from_vec(vec![0.0, 1.0]),
        |x, th| DVector::from_vec(vec![x[0] * x[0] * th[0], x[0] * th[1] + x[1] * th[2]]),
    )
    .expect("valid partition")
}

/// As [`example_plant_linear`] with `5 tanh(x1 theta1 + x2 theta2)` in the
/// second equation.
pub fn example_plant_tanh() -> PartitionedPlant {
    PartitionedPlant::new(
        2,
        0,
        DVector::from_vec(vec![1.0, 1.0, 0.5]),
        |x| DVector::from_vec(vec![x[1], 0.0]),
        |_| DVector::from_vec(vec![0.0, 1.0]),
        |x, th| DVector::from_vec(vec![x[0] * x[0] * th[0], 5.0 * (x[0] * th[1] + x[1] * th[2]).tanh()]),
    )
    .expect("valid partition")
}

/// Scalar plant `x' = theta x^2 + u`.
pub fn scalar_quadratic_plant(theta: f64) -> PartitionedPlant {
    PartitionedPlant::new(
        1,
        0,
        DVector::from_element(1, theta),
        |_| DVector::zeros(1),
        |_| DVector::from_element(1, 1.0),
        |x, th| DVector::from_element(1, th[0] * x[0] * x[0]),
    )
    .expect("valid partition")
}

/// Scalar plant `x' = theta1 x + theta2 x^2 + u`.
pub fn scalar_two_parameter_plant(theta1: f64, theta2: f64) -> PartitionedPlant {
    PartitionedPlant::new(
        1,
        0,
        DVector::from_vec(vec![theta1, theta2]),
        |_| DVector::zeros(1),
        |_| DVector::from_element(1, 1.0),
        |x, th| DVector::from_element(1, th[0] * x[0] + th[1] * x[0] * x[0]),
    )
    .expect("valid partition")
}

/// Sector constants `(D, D1)` of `z = 5 tanh(s)` for `|s| <= s_max`.
///
/// The slope of `5 tanh` lies in `[5 sech^2(s_max), 5]`.
pub fn tanh_sector_constants(s_max: f64) -> (f64, f64) {
    let sech = 1.0 / s_max.abs().cosh();
    (5.0, 5.0 * sech * sech)
}

/// `f_i` of a cascade stage: receives `x[..=i]` and `theta_i`.
pub type StageFn = Arc<dyn Fn(&[f64], &DVector<f64>) -> f64 + Send + Sync>;

/// Strict-feedback plant `x_i' = f_i(x_1..x_i, theta_i) + x_{i+1}`,
/// `x_n' = f_n(x, theta_n) + u + eps(t)`.
#[derive(Clone)]
pub struct CascadePlant {
    stages: Vec<StageFn>,
    theta_blocks: Vec<DVector<f64>>,
    disturbance: Option<Signal>,
    disturbance_l2: Option<f64>,
}

impl fmt::Debug for CascadePlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CascadePlant")
            .field("n", &self.stages.len())
            .field(
                "block_dims",
                &self.theta_blocks.iter().map(|b| b.len()).collect::<Vec<_>>(),
            )
            .finish_non_exhaustive()
    }
}

impl CascadePlant {
    pub fn new(stages: Vec<StageFn>, theta_blocks: Vec<DVector<f64>>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidArgument("a cascade needs at least one stage".into()));
        }
        if stages.len() != theta_blocks.len() {
            return Err(Error::DimensionMismatch {
                context: "cascade parameter blocks",
                expected: stages.len(),
                got: theta_blocks.len(),
            });
        }
        Ok(Self {
            stages,
            theta_blocks,
            disturbance: None,
            disturbance_l2: None,
        })
    }

    /// Disturbance on the last stage. `l2_certificate` is the value of
    /// `∫ eps^2` when the disturbance is square integrable.
    pub fn with_disturbance(mut self, eps: Signal, l2_certificate: Option<f64>) -> Self {
        self.disturbance = Some(eps);
        self.disturbance_l2 = l2_certificate;
        self
    }

    pub fn n(&self) -> usize {
        self.stages.len()
    }

    pub fn block_dim(&self, i: usize) -> usize {
        self.theta_blocks[i].len()
    }

    pub fn disturbance_l2(&self) -> Option<f64> {
        self.disturbance_l2
    }

    pub fn theta_block(&self, i: usize, _key: &SimulatorKey) -> &DVector<f64> {
        &self.theta_blocks[i]
    }

    /// `f_i(x_1..x_i, theta)` for an arbitrary parameter block.
    pub fn stage_value(&self, i: usize, x: &[f64], theta: &DVector<f64>) -> f64 {
        (self.stages[i])(&x[..=i], theta)
    }

    pub fn eval_dynamics(&self, x: &DVector<f64>, u: f64, t: f64) -> Result<DVector<f64>> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                context: "cascade state",
                expected: n,
                got: x.len(),
            });
        }
        let xs = x.as_slice();
        let mut dx = DVector::zeros(n);
        for i in 0..n {
            let coupling = if i + 1 < n { xs[i + 1] } else { u };
            dx[i] = self.stage_value(i, xs, &self.theta_blocks[i]) + coupling;
        }
        dx[n - 1] += self.disturbance.as_ref().map_or(0.0, |e| e(t));
        Ok(dx)
    }
}

/// Cascade form of [`example_plant_linear`].
pub fn example_cascade_linear() -> CascadePlant {
    CascadePlant::new(
        vec![
            Arc::new(|x: &[f64], th: &DVector<f64>| x[0] * x[0] * th[0]),
            Arc::new(|x: &[f64], th: &DVector<f64>| x[0] * th[0] + x[1] * th[1]),
        ],
        vec![DVector::from_element(1, 1.0), DVector::from_vec(vec![1.0, 0.5])],
    )
    .expect("two stages")
}

/// Cascade form of [`example_plant_tanh`].
pub fn example_cascade_tanh() -> CascadePlant {
    CascadePlant::new(
        vec![
            Arc::new(|x: &[f64], th: &DVector<f64>| x[0] * x[0] * th[0]),
            Arc::new(|x: &[f64], th: &DVector<f64>| 5.0 * (x[0] * th[0] + x[1] * th[1]).tanh()),
        ],
        vec![DVector::from_element(1, 1.0), DVector::from_vec(vec![1.0, 0.5])],
    )
    .expect("two stages")
}

/// `F̄(x, x', z)` of a stage substitution.
pub type PairFactor = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
/// `D̄_i(x_i, x_i')`.
pub type CoordFactor = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Lipschitz-type factor functions supplied by the designer.
#[derive(Clone)]
pub struct LipschitzFactors {
    pub fbar: PairFactor,
    /// `dbar[j]` bounds the increment of stage `j`; `None` means zero.
    pub dbar: Vec<Option<CoordFactor>>,
}

impl fmt::Debug for LipschitzFactors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LipschitzFactors")
            .field("dbar", &self.dbar.iter().map(Option::is_some).collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl LipschitzFactors {
    pub fn new(fbar: PairFactor) -> Self {
        Self { fbar, dbar: Vec::new() }
    }

    pub fn with_dbar(mut self, dbar: Vec<Option<CoordFactor>>) -> Self {
        self.dbar = dbar;
        self
    }

    pub fn fbar(&self, x: &[f64], xp: &[f64], z: &[f64]) -> f64 {
        (self.fbar)(x, xp, z)
    }

    pub fn dbar(&self, j: usize, x: &[f64], xp: &[f64]) -> f64 {
        match self.dbar.get(j) {
            Some(Some(d)) => d(x, xp),
            _ => 0.0,
        }
    }

    /// Samples `F̄` on pairs drawn from `pair_box` (the concatenation
    /// `x ⊕ x' ⊕ z` split at `split = (len x, len x')`) and rejects negatives.
    pub fn check_nonnegative(
        &self,
        pair_box: &SampleBox,
        split: (usize, usize),
        samples: usize,
        seed: u64,
    ) -> Result<()> {
        let mut rng = crate::numeric::seeded_rng(seed);
        for _ in 0..samples {
            let p = pair_box.sample(&mut rng);
            let s = p.as_slice();
            let (a, rest) = s.split_at(split.0);
            let (b, z) = rest.split_at(split.1);
            let v = self.fbar(a, b, z);
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!("F̄ = {v} at a sampled point")));
            }
            for j in 0..self.dbar.len() {
                let d = self.dbar(j, a, b);
                if !(d >= 0.0) {
                    return Err(Error::InvalidArgument(format!("D̄_{j} = {d} at a sampled point")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn linear_example_hand_values() {
        let p = example_plant_linear();
        assert_eq!(p.theta_dim(), 3);
        let dx = p.eval_dynamics(&v(&[2.0, 0.2]), 0.0, 0.0).unwrap();
        assert!((dx[0] - 4.2).abs() < 1e-15 && (dx[1] - 2.1).abs() < 1e-15);
        assert_eq!(p.eval_dynamics(&v(&[0.0, 0.0]), 0.0, 0.0).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(p.eval_dynamics(&v(&[1.0, 0.0]), 0.0, 0.0).unwrap(), v(&[1.0, 1.0]));
    }

    #[test]
    fn tanh_example_hand_values() {
        let p = example_plant_tanh();
        assert_eq!(p.theta_dim(), 3);
        assert_eq!(p.eval_dynamics(&v(&[0.0, 0.0]), 3.0, 0.0).unwrap(), v(&[0.0, 3.0]));
        assert_eq!(p.eval_dynamics(&v(&[0.0, 0.0]), 0.0, 0.0).unwrap(), v(&[0.0, 0.0]));
        let dx = p.eval_dynamics(&v(&[1.0, 1.0]), 0.0, 0.0).unwrap();
        assert!((dx[0] - 2.0).abs() < 1e-15);
        assert!((dx[1] - 4.525_741_268_224_334).abs() < 1e-12);
    }

    #[test]
    fn zero_plant_is_zero() {
        let p = PartitionedPlant::new(
            3,
            1,
            DVector::zeros(2),
            |x| DVector::zeros(x.len()),
            |x| DVector::from_element(x.len(), 1.0),
            |x, th| DVector::from_element(2, th[0] * x[0] + th[1] * x[2]),
        )
        .unwrap();
        assert_eq!(
            p.eval_dynamics(&v(&[1.0, 2.0, 3.0]), 0.0, 0.0).unwrap(),
            DVector::zeros(3)
        );
    }

    #[test]
    fn dimension_errors() {
        let p = example_plant_linear();
        assert!(matches!(
            p.eval_dynamics(&v(&[1.0]), 0.0, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(
            PartitionedPlant::new(1, 2, DVector::zeros(1), |x| x.clone(), |x| x.clone(), |x, _| x.clone()).is_err()
        );
    }

    #[test]
    fn disturbance_hits_last_coordinate() {
        let p = scalar_quadratic_plant(1.0).with_disturbance(Arc::new(|t| t));
        let dx = p.eval_dynamics(&v(&[0.0]), 0.0, 2.5).unwrap();
        assert_eq!(dx[0], 2.5);
    }

    #[test]
    fn cascade_matches_partitioned_form() {
        let c = example_cascade_linear();
        let p = example_plant_linear();
        let x = v(&[1.3, -0.4]);
        assert_eq!(
            c.eval_dynamics(&x, 0.7, 0.0).unwrap(),
            p.eval_dynamics(&x, 0.7, 0.0).unwrap()
        );
        let c = example_cascade_tanh();
        let p = example_plant_tanh();
        assert_eq!(
            c.eval_dynamics(&x, 0.7, 0.0).unwrap(),
            p.eval_dynamics(&x, 0.7, 0.0).unwrap()
        );
    }

    #[test]
    fn tanh_sector_bounds() {
        let (d, d1) = tanh_sector_constants(0.0);
        assert_eq!((d, d1), (5.0, 5.0));
        let (_, d1) = tanh_sector_constants(3.0);
        assert!(d1 > 0.0 && d1 < 0.1);
    }
}
