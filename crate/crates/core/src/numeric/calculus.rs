use nalgebra::DVector;

use crate::error::{Error, Result};

/// Trapezoidal rule over possibly non-uniform sample times.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(times.len(), values.len());
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Second-order finite-difference derivative of a sampled signal.
///
/// Interior points use the three-point central formula and the endpoints the
/// three-point one-sided formula, both valid on non-uniform grids.
pub fn finite_difference(times: &[f64], values: &[f64]) -> Vec<f64> {
    let n = times.len();
    debug_assert_eq!(n, values.len());
    match n {
        0 => return Vec::new(),
        1 => return vec![0.0],
        2 => {
            let d = (values[1] - values[0]) / (times[1] - times[0]);
            return vec![d, d];
        }
        _ => {}
    }
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        let h1 = times[i] - times[i - 1];
        let h2 = times[i + 1] - times[i];
        out[i] = -h2 / (h1 * (h1 + h2)) * values[i - 1]
            + (h2 - h1) / (h1 * h2) * values[i]
            + h1 / (h2 * (h1 + h2)) * values[i + 1];
    }
    let (h1, h2) = (times[1] - times[0], times[2] - times[1]);
    out[0] = -(2.0 * h1 + h2) / (h1 * (h1 + h2)) * values[0] + (h1 + h2) / (h1 * h2) * values[1]
        - h1 / (h2 * (h1 + h2)) * values[2];
    let (h1, h2) = (times[n - 1] - times[n - 2], times[n - 2] - times[n - 3]);
    out[n - 1] = (2.0 * h1 + h2) / (h1 * (h1 + h2)) * values[n - 1] - (h1 + h2) / (h1 * h2) * values[n - 2]
        + h1 / (h2 * (h1 + h2)) * values[n - 3];
    out
}

const GL7_NODES: [f64; 7] = [
    -0.949_107_912_342_758_5,
    -0.741_531_185_599_394_4,
    -0.405_845_151_377_397_2,
    0.0,
    0.405_845_151_377_397_2,
    0.741_531_185_599_394_4,
    0.949_107_912_342_758_5,
];
const GL7_WEIGHTS: [f64; 7] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
    0.381_830_050_505_118_9,
    0.279_705_391_489_276_7,
    0.129_484_966_168_869_7,
];

const MAX_DEPTH: u32 = 40;

fn gl7<F>(f: &mut F, a: f64, b: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64) -> Result<DVector<f64>>,
{
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc: Option<DVector<f64>> = None;
    for (x, w) in GL7_NODES.iter().zip(GL7_WEIGHTS.iter()) {
        let s = mid + half * x;
        let v = f(s)?;
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::QuadratureFailure(format!("non-finite integrand at {s}")));
        }
        acc = Some(match acc {
            None => v * (*w),
            Some(a) => a + v * (*w),
        });
    }
    Ok(acc.expect("seven nodes") * half)
}

fn refine<F>(f: &mut F, a: f64, b: f64, whole: DVector<f64>, tol: f64, depth: u32) -> Result<DVector<f64>>
where
    F: FnMut(f64) -> Result<DVector<f64>>,
{
    let m = 0.5 * (a + b);
    let left = gl7(f, a, m)?;
    let right = gl7(f, m, b)?;
    let split = &left + &right;
    let scale = split.amax().max(1.0);
    if (&split - &whole).amax() <= tol * scale {
        return Ok(split);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::QuadratureFailure(format!(
            "no convergence on [{a}, {b}] after {MAX_DEPTH} bisections"
        )));
    }
    let l = refine(f, a, m, left, tol, depth + 1)?;
    let r = refine(f, m, b, right, tol, depth + 1)?;
    Ok(l + r)
}

/// Adaptive Gauss–Legendre quadrature of a vector-valued integrand over `[a, b]`.
///
/// Intervals are bisected until the 7-point rule and its two halves agree to
/// `tol` relative to `max(1, |I|)`.
pub fn gauss_legendre_adaptive<F>(mut f: F, a: f64, b: f64, tol: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64) -> Result<DVector<f64>>,
{
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::QuadratureFailure(format!("non-finite limits [{a}, {b}]")));
    }
    let whole = gl7(&mut f, a, b)?;
    if a == b {
        return Ok(whole);
    }
    refine(&mut f, a, b, whole, tol, 0)
}
