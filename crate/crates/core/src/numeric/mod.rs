//! Fixed-step integration, probes and running integrals.

mod calculus;
mod sampling;

pub use calculus::{finite_difference, gauss_legendre_adaptive, trapezoid};
pub use sampling::{seeded_rng, SampleBox};

use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use nalgebra::DVector;

use crate::error::{Error, Result};

/// Default integration step in seconds.
pub const DEFAULT_STEP: f64 = 1e-3;

type RhsFn = dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Send + Sync;

/// A vector field `x' = rhs(t, x)` of fixed dimension.
#[derive(Clone)]
pub struct OdeSystem {
    dim: usize,
    rhs: Arc<RhsFn>,
}

impl OdeSystem {
    pub fn new<F>(dim: usize, rhs: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::try_new(dim, move |t, x| Ok(rhs(t, x)))
    }

    /// Builds a system whose right-hand side may fail, e.g. when a controller
    /// hits a singular control direction.
    pub fn try_new<F>(dim: usize, rhs: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    {
        assert!(dim > 0, "an ODE system needs at least one state");
        Self {
            dim,
            rhs: Arc::new(rhs),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates the field, checking both argument and output dimensions.
    pub fn eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "ode state",
                expected: self.dim,
                got: x.len(),
            });
        }
        let dx = (self.rhs)(t, x)?;
        if dx.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "ode right-hand side",
                expected: self.dim,
                got: dx.len(),
            });
        }
        Ok(dx)
    }
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem").field("dim", &self.dim).finish()
    }
}

fn finite_or(t: f64, v: DVector<f64>) -> Result<DVector<f64>> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFiniteState { t, trace: None })
    }
}

/// One classical Runge–Kutta step of size `h` from `(t, x)`.
pub fn step_rk4(system: &OdeSystem, t: f64, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let half = 0.5 * h;
    let k1 = finite_or(t, system.eval(t, x)?)?;
    let k2 = finite_or(t, system.eval(t + half, &(x + &k1 * half))?)?;
    let k3 = finite_or(t, system.eval(t + half, &(x + &k2 * half))?)?;
    let k4 = finite_or(t, system.eval(t + h, &(x + &k3 * h))?)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    finite_or(t + h, next)
}

/// What a probe feeds into its running integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrand {
    None,
    Value,
    Square,
}

type ProbeFn = dyn Fn(f64, &DVector<f64>) -> Vec<f64> + Send + Sync;

/// Named scalar read-outs of `(t, x)` recorded at every sample. A probe may
/// produce several channels from one evaluation.
#[derive(Clone)]
pub struct Probe {
    names: Vec<String>,
    integrands: Vec<Integrand>,
    f: Arc<ProbeFn>,
}

impl Probe {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        Self {
            names: vec![name.into()],
            integrands: vec![Integrand::None],
            f: Arc::new(move |t, x| vec![f(t, x)]),
        }
    }

    /// Several channels computed together; `f` must return one value per name.
    pub fn multi<F>(channels: Vec<(String, Integrand)>, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> Vec<f64> + Send + Sync + 'static,
    {
        let (names, integrands) = channels.into_iter().unzip();
        Self {
            names,
            integrands,
            f: Arc::new(f),
        }
    }

    /// Also accumulate `∫ p dt` under each channel name.
    pub fn integrate(mut self) -> Self {
        self.integrands.iter_mut().for_each(|i| *i = Integrand::Value);
        self
    }

    /// Also accumulate `∫ p² dt` under each channel name.
    pub fn integrate_square(mut self) -> Self {
        self.integrands.iter_mut().for_each(|i| *i = Integrand::Square);
        self
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn integrands(&self) -> &[Integrand] {
        &self.integrands
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> Vec<f64> {
        let v = (self.f)(t, x);
        debug_assert_eq!(v.len(), self.names.len());
        v
    }
}

impl fmt::Debug for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Probe")
            .field("names", &self.names)
            .field("integrands", &self.integrands)
            .finish()
    }
}

/// Sampled record of a simulation run.
#[derive(Clone, Default, PartialEq)]
pub struct SimTrace {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub outputs: IndexMap<String, Vec<f64>>,
    pub accumulators: IndexMap<String, Vec<f64>>,
}

impl fmt::Debug for SimTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimTrace")
            .field("samples", &self.times.len())
            .field("t_end", &self.times.last())
            .field("outputs", &self.outputs.keys().collect::<Vec<_>>())
            .field("accumulators", &self.accumulators.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn output(&self, name: &str) -> Result<&[f64]> {
        self.outputs
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSignal(name.to_string()))
    }

    pub fn accumulator(&self, name: &str) -> Result<&[f64]> {
        self.accumulators
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSignal(name.to_string()))
    }

    /// Time series of state component `i`.
    pub fn state_component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[i]).collect()
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }

    /// Inserts or replaces a derived output series.
    pub fn set_output(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.times.len() {
            return Err(Error::DimensionMismatch {
                context: "trace output",
                expected: self.times.len(),
                got: values.len(),
            });
        }
        self.outputs.insert(name.into(), values);
        Ok(())
    }
}

/// Sample times for a run: multiples of `h`, with a shortened final step
/// when `t_end` is not a multiple of `h`.
pub fn sample_times(t_end: f64, h: f64) -> Vec<f64> {
    let ratio = t_end / h;
    let nearest = ratio.round();
    let n = if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        ratio.ceil() as usize
    };
    let n = n.max(1);
    let mut times: Vec<f64> = (0..n).map(|k| k as f64 * h).collect();
    times.push(t_end);
    times
}

/// Integrates `system` from `x0` over `[0, t_end]` with fixed step `h`,
/// recording every probe at every sample.
pub fn simulate(system: &OdeSystem, x0: &DVector<f64>, t_end: f64, h: f64, probes: &[Probe]) -> Result<SimTrace> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(Error::InvalidArgument(format!("t_end must be positive, got {t_end}")));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    if x0.len() != system.dim() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: system.dim(),
            got: x0.len(),
        });
    }
    if x0.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteState { t: 0.0, trace: None });
    }

    let times = sample_times(t_end, h);
    let mut trace = SimTrace {
        times: Vec::with_capacity(times.len()),
        states: Vec::with_capacity(times.len()),
        ..SimTrace::default()
    };
    for p in probes {
        for (name, integrand) in p.names.iter().zip(&p.integrands) {
            if trace.outputs.contains_key(name) {
                return Err(Error::InvalidArgument(format!("duplicate probe channel `{name}`")));
            }
            trace.outputs.insert(name.clone(), Vec::with_capacity(times.len()));
            if *integrand != Integrand::None {
                trace.accumulators.insert(name.clone(), Vec::with_capacity(times.len()));
            }
        }
    }

    let record = |trace: &mut SimTrace, t: f64, x: &DVector<f64>, dt: f64| {
        trace.times.push(t);
        trace.states.push(x.clone());
        for p in probes {
            let values = p.eval(t, x);
            for ((name, integrand), v) in p.names.iter().zip(&p.integrands).zip(values) {
                let series = trace.outputs.get_mut(name).expect("probe registered");
                let prev = series.last().copied();
                series.push(v);
                let g = |s: f64| match integrand {
                    Integrand::Square => s * s,
                    _ => s,
                };
                if let Some(acc) = trace.accumulators.get_mut(name) {
                    let next = match (acc.last(), prev) {
                        (Some(&a), Some(pv)) => a + 0.5 * dt * (g(pv) + g(v)),
                        _ => 0.0,
                    };
                    acc.push(next);
                }
            }
        }
    };

    let mut x = x0.clone();
    record(&mut trace, times[0], &x, 0.0);
    for w in times.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        match step_rk4(system, t, &x, t_next - t) {
            Ok(next) => x = next,
            Err(Error::NonFiniteState { t, .. }) => {
                return Err(Error::NonFiniteState {
                    t,
                    trace: Some(Box::new(trace)),
                })
            }
            Err(e) => return Err(e),
        }
        record(&mut trace, t_next, &x, t_next - t);
    }
    Ok(trace)
}

/// Trapezoidal `∫ s² dt` of a named output over the whole trace.
pub fn running_l2(trace: &SimTrace, name: &str) -> Result<f64> {
    let s = trace.output(name)?;
    let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
    Ok(trapezoid(&trace.times, &sq))
}
