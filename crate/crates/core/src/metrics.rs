//! Post-hoc checks of performance bounds along sampled trajectories.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::finform::Gain;
use crate::goal::{lambda_of_target, TargetDynamics};
use crate::numeric::{finite_difference, trapezoid, SimTrace};

#[derive(Clone, Debug, PartialEq)]
pub enum CheckStatus {
    Pass,
    Fail,
    NotApplicable(String),
}

/// Outcome of one inequality `lhs <= rhs + tol`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`.
    pub margin: f64,
    pub tol: f64,
    pub status: CheckStatus,
}

impl BoundReport {
    pub fn compare(name: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        let ok = lhs.is_finite() && rhs.is_finite() && lhs <= rhs + tol;
        Self {
            name: name.into(),
            lhs,
            rhs,
            margin: rhs - lhs,
            tol,
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
        }
    }

    pub fn not_applicable(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            lhs: f64::NAN,
            rhs: f64::NAN,
            margin: f64::NAN,
            tol: 0.0,
            status: CheckStatus::NotApplicable(reason.into()),
        }
    }

    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }

    pub fn failed(&self) -> bool {
        self.status == CheckStatus::Fail
    }

    pub fn is_applicable(&self) -> bool {
        !matches!(self.status, CheckStatus::NotApplicable(_))
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.status {
            CheckStatus::NotApplicable(why) => write!(f, "N/A  {} ({why})", self.name),
            s => write!(
                f,
                "{} {} lhs={:.6e} rhs={:.6e} margin={:.6e} tol={:.1e}",
                if *s == CheckStatus::Pass { "PASS" } else { "FAIL" },
                self.name,
                self.lhs,
                self.rhs,
                self.margin,
                self.tol
            ),
        }
    }
}

/// Quantities the bounds are stated in.
#[derive(Clone, Debug)]
pub struct BoundContext {
    pub target: TargetDynamics,
    pub gain: Gain,
    /// Upper sector constant `D`.
    pub d: f64,
    pub theta_star: DVector<f64>,
    pub theta_hat0: DVector<f64>,
    pub psi0: f64,
    pub leak: f64,
    /// Disturbances on the plant or the adaptation law.
    pub disturbed: bool,
    /// Largest `|psi|` searched when inverting `Q`.
    pub psi_limit: f64,
}

impl BoundContext {
    /// `|θ̂(0) - θ*|²_{Γ⁻¹}`.
    pub fn initial_distance(&self) -> f64 {
        self.gain.inv_norm_sq(&(&self.theta_hat0 - &self.theta_star))
    }
}

const MIN_SAMPLES: usize = 3;

fn too_short(times: &[f64]) -> Option<String> {
    (times.len() < MIN_SAMPLES).then(|| format!("{} samples, need {MIN_SAMPLES}", times.len()))
}

/// `∫phi(psi)² ` and `∫psi'²` against `2Q(psi0) + |Δθ|²_W`, with
/// `W = (2DΓ)⁻¹` and with the Lyapunov weighting `W = D Γ⁻¹ / 2`.
pub fn l2_bounds_check(times: &[f64], psi: &[f64], ctx: &BoundContext) -> Vec<BoundReport> {
    let names = ["l2_phi", "l2_phi_weighted", "l2_psi_dot", "l2_psi_dot_weighted"];
    if let Some(why) = too_short(times) {
        return names
            .iter()
            .map(|n| BoundReport::not_applicable(*n, why.clone()))
            .collect();
    }
    let phi2: Vec<f64> = psi.iter().map(|p| ctx.target.phi(*p).powi(2)).collect();
    let dpsi = finite_difference(times, psi);
    let dpsi2: Vec<f64> = dpsi.iter().map(|v| v * v).collect();
    let lhs_phi = trapezoid(times, &phi2);
    let lhs_dpsi = trapezoid(times, &dpsi2);
    let q0 = 2.0 * ctx.target.q(ctx.psi0);
    let dist = ctx.initial_distance();
    let rhs_display = q0 + dist / (2.0 * ctx.d);
    let rhs_weighted = q0 + dist * ctx.d / 2.0;
    let tol = 1e-9 * (1.0 + rhs_display.abs());
    vec![
        BoundReport::compare(names[0], lhs_phi, rhs_display, tol),
        BoundReport::compare(names[1], lhs_phi, rhs_weighted, tol),
        BoundReport::compare(names[2], lhs_dpsi, rhs_display, tol),
        BoundReport::compare(names[3], lhs_dpsi, rhs_weighted, tol),
    ]
}

/// `sup |psi| <= Λ(Q(psi0) + |Δθ|²_W)` with `W = (4DΓ)⁻¹`, and with the
/// Lyapunov weighting `W = D Γ⁻¹ / 4`.
pub fn linf_bound_check(times: &[f64], psi: &[f64], ctx: &BoundContext) -> Vec<BoundReport> {
    let names = ["linf_psi", "linf_psi_weighted"];
    if let Some(why) = too_short(times) {
        return names
            .iter()
            .map(|n| BoundReport::not_applicable(*n, why.clone()))
            .collect();
    }
    let sup = psi.iter().fold(0.0_f64, |m, p| m.max(p.abs()));
    let q0 = ctx.target.q(ctx.psi0);
    let dist = ctx.initial_distance();
    [
        (names[0], q0 + dist / (4.0 * ctx.d)),
        (names[1], q0 + dist * ctx.d / 4.0),
    ]
    .into_iter()
    .map(
        |(name, level)| match lambda_of_target(&ctx.target, level, ctx.psi_limit) {
            Ok(rhs) => BoundReport::compare(name, sup, rhs, 1e-9 * (1.0 + rhs)),
            Err(e) => BoundReport::not_applicable(name, e.to_string()),
        },
    )
    .collect()
}

/// Pointwise `|psi(t)| <= |psi0| e^{-Kt} + ½ sqrt(|Δθ|²_{(KDΓ)⁻¹})` for
/// linear targets `phi = K psi`. `lhs` is the worst excess over the envelope.
pub fn exp_envelope_check(times: &[f64], psi: &[f64], ctx: &BoundContext) -> BoundReport {
    let name = "exp_envelope";
    if let Some(why) = too_short(times) {
        return BoundReport::not_applicable(name, why);
    }
    let Some(k) = ctx.target.linear_gain() else {
        return BoundReport::not_applicable(name, "target dynamics are not linear");
    };
    let t0 = times[0];
    let floor = 0.5 * (ctx.initial_distance() / (k * ctx.d)).sqrt();
    let excess = times.iter().zip(psi).fold(f64::NEG_INFINITY, |m, (t, p)| {
        let env = ctx.psi0.abs() * (-k * (t - t0)).exp() + floor;
        m.max(p.abs() - env)
    });
    BoundReport::compare(name, excess, 0.0, 1e-9 * (1.0 + ctx.psi0.abs()))
}

/// `|θ* - θ̂(t)|²_{Γ⁻¹}` is non-increasing. `lhs` is the largest one-step
/// increase. Not applicable with leakage or disturbances.
pub fn param_distance_monotone(times: &[f64], theta_hats: &[DVector<f64>], ctx: &BoundContext) -> BoundReport {
    let name = "param_distance_monotone";
    if ctx.leak > 0.0 {
        return BoundReport::not_applicable(name, "leakage active");
    }
    if ctx.disturbed {
        return BoundReport::not_applicable(name, "disturbances active");
    }
    if let Some(why) = too_short(times) {
        return BoundReport::not_applicable(name, why);
    }
    let v: Vec<f64> = theta_hats
        .iter()
        .map(|th| ctx.gain.inv_norm_sq(&(&ctx.theta_star - th)))
        .collect();
    let rise = v.windows(2).fold(f64::NEG_INFINITY, |m, w| m.max(w[1] - w[0]));
    BoundReport::compare(name, rise, 0.0, 1e-9 * (1.0 + v[0]))
}

/// Cumulative trapezoid of the outer products `alpha alpha^T`.
fn cumulative_gram(times: &[f64], alphas: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
    let d = alphas.first().map_or(0, |a| a.len());
    let mut out = Vec::with_capacity(times.len());
    let mut acc = DMatrix::zeros(d, d);
    out.push(acc.clone());
    for k in 1..times.len() {
        let h = times[k] - times[k - 1];
        let a = &alphas[k - 1];
        let b = &alphas[k];
        acc += (a * a.transpose() + b * b.transpose()) * (0.5 * h);
        out.push(acc.clone());
    }
    out
}

fn interpolate(times: &[f64], cum: &[DMatrix<f64>], t: f64) -> DMatrix<f64> {
    let k = times.partition_point(|s| *s < t);
    if k == 0 {
        return cum[0].clone();
    }
    if k >= times.len() {
        return cum[times.len() - 1].clone();
    }
    let (t0, t1) = (times[k - 1], times[k]);
    let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
    &cum[k - 1] * (1.0 - w) + &cum[k] * w
}

/// `∫_{t0}^{t1} alpha alpha^T dt` by the trapezoid rule, with linear
/// interpolation of the cumulative integral at the window ends.
pub fn gram_integral(times: &[f64], alphas: &[DVector<f64>], t0: f64, t1: f64) -> Result<DMatrix<f64>> {
    if times.len() != alphas.len() || times.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "regressor samples",
            expected: times.len(),
            got: alphas.len(),
        });
    }
    let cum = cumulative_gram(times, alphas);
    Ok(interpolate(times, &cum, t1) - interpolate(times, &cum, t0))
}

/// Smallest eigenvalue of the sliding-window Gram integral over all windows
/// of length `window` starting at a sample, against the level `delta`.
pub fn pe_check(times: &[f64], alphas: &[DVector<f64>], window: f64, delta: f64) -> BoundReport {
    let name = "persistent_excitation";
    if let Some(why) = too_short(times) {
        return BoundReport::not_applicable(name, why);
    }
    let t_end = times[times.len() - 1];
    if times[0] + window > t_end {
        return BoundReport::not_applicable(name, "horizon shorter than the window");
    }
    if times.len() != alphas.len() {
        return BoundReport::not_applicable(name, "regressor samples do not match the time grid");
    }
    let cum = cumulative_gram(times, alphas);
    let mut worst = f64::INFINITY;
    for (k, t) in times.iter().enumerate() {
        if t + window > t_end + 1e-12 {
            break;
        }
        let g = interpolate(times, &cum, t + window) - &cum[k];
        let e = SymmetricEigen::new(g).eigenvalues.min();
        worst = worst.min(e);
    }
    // lhs <= rhs reads delta <= min eigenvalue
    BoundReport::compare(name, delta, worst, 0.0)
}

/// `∫ u²` from the trace accumulator.
pub fn control_energy(trace: &SimTrace) -> Option<f64> {
    trace.accumulator("u").ok().and_then(|a| a.last().copied())
}

/// `|θ̂(t) - θ*|` along the trajectory.
pub fn param_error_trace(theta_hats: &[DVector<f64>], reference: &DVector<f64>) -> Vec<f64> {
    theta_hats.iter().map(|th| (th - reference).norm()).collect()
}

/// First time after which `|v| < tol` holds for the rest of the record.
pub fn settling_time(times: &[f64], values: &[f64], tol: f64) -> Option<f64> {
    let last_bad = values.iter().rposition(|v| !(v.abs() < tol));
    match last_bad {
        None => times.first().copied(),
        Some(k) if k + 1 < times.len() => Some(times[k + 1]),
        Some(_) => None,
    }
}

/// Increase of a running accumulator over the last tenth of the horizon.
pub fn final_decile_growth(times: &[f64], acc: &[f64]) -> Option<f64> {
    let (t0, t1) = (*times.first()?, *times.last()?);
    let cut = t0 + 0.9 * (t1 - t0);
    let k = times.partition_point(|t| *t < cut).clamp(1, times.len() - 1);
    let (ta, tb) = (times[k - 1], times[k]);
    let w = if tb > ta { (cut - ta) / (tb - ta) } else { 1.0 };
    let at_cut = acc[k - 1] + w * (acc[k] - acc[k - 1]);
    Some(acc[acc.len() - 1] - at_cut)
}

/// `max_t |v(t)|` over the record.
pub fn sup_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(theta_hat0: f64) -> BoundContext {
        BoundContext {
            target: TargetDynamics::linear(1.0),
            gain: Gain::scalar(1, 1.0).unwrap(),
            d: 1.0,
            theta_star: DVector::from_element(1, 1.0),
            theta_hat0: DVector::from_element(1, theta_hat0),
            psi0: 1.0,
            leak: 0.0,
            disturbed: false,
            psi_limit: 1e8,
        }
    }

    fn grid(t_end: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|k| t_end * k as f64 / n as f64).collect()
    }

    #[test]
    fn l2_on_pure_decay() {
        // psi = e^{-t}, ∫psi² = ½, ∫psi'² = ½, rhs = 1 + 0
        let t = grid(30.0, 30_000);
        let psi: Vec<f64> = t.iter().map(|s| (-s).exp()).collect();
        let r = l2_bounds_check(&t, &psi, &ctx(1.0));
        assert!(r.iter().all(BoundReport::passed));
        assert!((r[0].lhs - 0.5).abs() < 1e-6);
        assert!((r[0].rhs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linf_closed_form() {
        // Q = ψ²/2, level = ½ + ¼ → Λ = sqrt(1.5)
        let t = grid(1.0, 10);
        let psi = vec![1.0; 11];
        let r = linf_bound_check(&t, &psi, &ctx(2.0));
        assert!((r[0].rhs - 1.5_f64.sqrt()).abs() < 1e-9);
        assert!(r[0].passed());
    }

    #[test]
    fn envelope_detects_excess() {
        let t = grid(5.0, 500);
        let ok: Vec<f64> = t.iter().map(|s| (-s).exp()).collect();
        let bad: Vec<f64> = t.iter().map(|s| 2.0 * (-s).exp()).collect();
        assert!(exp_envelope_check(&t, &ok, &ctx(1.0)).passed());
        assert!(exp_envelope_check(&t, &bad, &ctx(1.0)).failed());
        let mut c = ctx(1.0);
        c.target = TargetDynamics::Cubic { k: 1.0 };
        assert!(!exp_envelope_check(&t, &ok, &c).is_applicable());
    }

    #[test]
    fn monotone_and_not_applicable() {
        let t = grid(1.0, 3);
        let down: Vec<DVector<f64>> = [3.0, 2.0, 1.5, 1.2]
            .iter()
            .map(|v| DVector::from_element(1, *v))
            .collect();
        let bump: Vec<DVector<f64>> = [3.0, 2.0, 2.5, 1.2]
            .iter()
            .map(|v| DVector::from_element(1, *v))
            .collect();
        assert!(param_distance_monotone(&t, &down, &ctx(3.0)).passed());
        assert!(param_distance_monotone(&t, &bump, &ctx(3.0)).failed());
        let mut c = ctx(3.0);
        c.leak = 0.1;
        assert!(!param_distance_monotone(&t, &down, &c).is_applicable());
    }

    #[test]
    fn gram_of_quadrature_pair() {
        let n = 20_000;
        let t = grid(4.0 * std::f64::consts::PI, n);
        let a: Vec<DVector<f64>> = t.iter().map(|s| DVector::from_vec(vec![s.sin(), s.cos()])).collect();
        let g = gram_integral(&t, &a, 0.0, 2.0 * std::f64::consts::PI).unwrap();
        let pi = std::f64::consts::PI;
        assert!((g[(0, 0)] - pi).abs() < 1e-3 && (g[(1, 1)] - pi).abs() < 1e-3 && g[(0, 1)].abs() < 1e-3);
        let r = pe_check(&t, &a, 2.0 * pi, 3.0);
        assert!(r.passed(), "{r}");
        assert!(pe_check(&t, &a, 2.0 * pi, 3.2).failed());
    }

    #[test]
    fn short_records_are_not_applicable() {
        let t = vec![0.0, 0.001];
        let psi = vec![1.0, 1.0];
        assert!(l2_bounds_check(&t, &psi, &ctx(1.0)).iter().all(|r| !r.is_applicable()));
        assert!(!exp_envelope_check(&t, &psi, &ctx(1.0)).is_applicable());
    }

    #[test]
    fn settling_and_growth() {
        let t = grid(4.0, 4);
        assert_eq!(settling_time(&t, &[1.0, 0.5, 0.01, 0.001, 0.0], 0.1), Some(2.0));
        assert_eq!(settling_time(&t, &[1.0, 0.5, 0.01, 0.001, 1.0], 0.1), None);
        let acc = [0.0, 1.0, 2.0, 3.0, 3.5];
        assert!((final_decile_growth(&t, &acc).unwrap() - 0.2).abs() < 1e-12);
    }
}
