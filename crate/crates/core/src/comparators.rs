//! Reference adaptive backstepping controllers for the two-stage example
//! `x1' = theta_0 x1² + x2`, `x2' = theta_1 x1 + theta_2 x2 + u`, regulating
//! `x1` to 1.

use nalgebra::DVector;

use crate::closed_loop::{ClosedLoop, LoopEval};
use crate::error::{Error, Result};
use crate::plant::{CascadePlant, SimulatorKey};

/// Overparameterized design with two estimates of `theta_0`.
/// State `[x1, x2, θ̂0, θ̂1, θ̂2, θ̂3]`; returns `(state', u)`.
pub fn backstepping_classic_rhs(plant: &CascadePlant, s: &DVector<f64>, t: f64) -> Result<(DVector<f64>, f64)> {
    check_len(s, 6)?;
    let (x1, x2, th, t1, t2, t3) = (s[0], s[1], s[2], s[3], s[4], s[5]);
    let c = x2 + x1 - 1.0 + t3 * x1 * x1;
    let u = -2.0 * x2
        - (x1 - 1.0)
        - t3 * x1 * x1
        - x1.powi(4) * (x1 - 1.0)
        - 2.0 * t3 * x1 * x2
        - (x1 * x1 + 2.0 * t3 * x1.powi(3)) * th
        - x1 * t1
        - x2 * t2;
    let dx = plant.eval_dynamics(&DVector::from_vec(vec![x1, x2]), u, t)?;
    let ds = DVector::from_vec(vec![
        dx[0],
        dx[1],
        c * x1 * x1 * (1.0 + 2.0 * t3 * x1),
        c * x1,
        c * x2,
        (x1 - 1.0) * x1 * x1,
    ]);
    Ok((ds, u))
}

/// Tuning-functions design with a single estimate of `theta_0`.
/// State `[x1, x2, θ̂0, θ̂1, θ̂2]`; returns `(state', u)`.
pub fn backstepping_tuning_rhs(plant: &CascadePlant, s: &DVector<f64>, t: f64) -> Result<(DVector<f64>, f64)> {
    check_len(s, 5)?;
    let (x1, x2, th, t1, t2) = (s[0], s[1], s[2], s[3], s[4]);
    let c = x2 + x1 - 1.0 + x1 * x1 * th;
    let tau = tuning_function(x1, x2, th);
    let u = -c - (x1 - 1.0) - (1.0 + 2.0 * x1 * th) * (x2 + th * x1 * x1) - x1 * x1 * tau - x1 * t1 - x2 * t2;
    let dx = plant.eval_dynamics(&DVector::from_vec(vec![x1, x2]), u, t)?;
    Ok((DVector::from_vec(vec![dx[0], dx[1], tau, c * x1, c * x2]), u))
}

/// `τ = (x1 - 1) x1² + c x1² (1 + 2 x1 θ̂0)`.
pub fn tuning_function(x1: f64, x2: f64, th: f64) -> f64 {
    let c = x2 + x1 - 1.0 + x1 * x1 * th;
    (x1 - 1.0) * x1 * x1 + c * x1 * x1 * (1.0 + 2.0 * x1 * th)
}

fn check_len(s: &DVector<f64>, n: usize) -> Result<()> {
    if s.len() != n {
        return Err(Error::DimensionMismatch {
            context: "backstepping state",
            expected: n,
            got: s.len(),
        });
    }
    Ok(())
}

fn reference(plant: &CascadePlant) -> Result<DVector<f64>> {
    if plant.n() != 2 || plant.block_dim(0) != 1 || plant.block_dim(1) != 2 {
        return Err(Error::InvalidArgument(
            "backstepping comparators need blocks of size (1, 2)".into(),
        ));
    }
    let key = SimulatorKey::new();
    let (a, b) = (plant.theta_block(0, &key), plant.theta_block(1, &key));
    Ok(DVector::from_vec(vec![a[0], b[0], b[1]]))
}

fn names(extra: &[&str]) -> Vec<String> {
    ["x1", "x2"].iter().chain(extra).map(|s| s.to_string()).collect()
}

/// Closed loop of [`backstepping_classic_rhs`]. Reported `θ̂` is
/// `(θ̂0, θ̂1, θ̂2)`.
pub fn backstepping_classic_loop(plant: &CascadePlant, s0: DVector<f64>) -> Result<ClosedLoop> {
    let reference = reference(plant)?;
    let p = plant.clone();
    let eval = move |t: f64, s: &DVector<f64>| -> Result<LoopEval> {
        let (derivative, control) = backstepping_classic_rhs(&p, s, t)?;
        Ok(LoopEval {
            derivative,
            control,
            psi: s[0] - 1.0,
            theta_hat: DVector::from_vec(vec![s[2], s[3], s[4]]),
        })
    };
    ClosedLoop::new(
        "backstepping_classic",
        eval,
        s0,
        names(&["theta_hat0", "theta_hat1", "theta_hat2", "theta_hat3"]),
        2,
        reference,
    )
}

/// Closed loop of [`backstepping_tuning_rhs`].
pub fn backstepping_tuning_loop(plant: &CascadePlant, s0: DVector<f64>) -> Result<ClosedLoop> {
    let reference = reference(plant)?;
    let p = plant.clone();
    let eval = move |t: f64, s: &DVector<f64>| -> Result<LoopEval> {
        let (derivative, control) = backstepping_tuning_rhs(&p, s, t)?;
        Ok(LoopEval {
            derivative,
            control,
            psi: s[0] - 1.0,
            theta_hat: DVector::from_vec(vec![s[2], s[3], s[4]]),
        })
    };
    ClosedLoop::new(
        "backstepping_tuning",
        eval,
        s0,
        names(&["theta_hat0", "theta_hat1", "theta_hat2"]),
        2,
        reference,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::example_cascade_linear;

    #[test]
    fn classic_control_vanishes_at_setpoint_with_zero_estimates() {
        let p = example_cascade_linear();
        let s = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let (_, u) = backstepping_classic_rhs(&p, &s, 0.0).unwrap();
        assert_eq!(u, 0.0);
    }

    #[test]
    fn classic_overparameterized_rate() {
        let p = example_cascade_linear();
        let s = DVector::from_vec(vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let (ds, _) = backstepping_classic_rhs(&p, &s, 0.0).unwrap();
        assert_eq!(ds[5], 4.0);
    }

    #[test]
    fn tuning_function_value() {
        // c = 1, τ = 4 + 4
        assert_eq!(tuning_function(2.0, 0.0, 0.0), 8.0);
        let p = example_cascade_linear();
        let s = DVector::from_vec(vec![2.0, 0.0, 0.0, 0.0, 0.0]);
        let (ds, _) = backstepping_tuning_rhs(&p, &s, 0.0).unwrap();
        assert_eq!(ds[2], 8.0);
    }

    #[test]
    fn tuning_control_vanishes_at_setpoint() {
        let p = example_cascade_linear();
        let s = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let (ds, u) = backstepping_tuning_rhs(&p, &s, 0.0).unwrap();
        assert_eq!(u, 0.0);
        assert_eq!(ds[2], 0.0);
    }

    #[test]
    fn wrong_state_length() {
        let p = example_cascade_linear();
        assert!(backstepping_tuning_rhs(&p, &DVector::zeros(6), 0.0).is_err());
        assert!(backstepping_classic_rhs(&p, &DVector::zeros(5), 0.0).is_err());
    }
}
