use crate::numeric::SimTrace;

/// Errors raised by the core toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An integrator stage produced NaN or Inf. The trace recorded up to the
    /// last finite sample is attached when available.
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64, trace: Option<Box<SimTrace>> },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown signal `{0}`")]
    UnknownSignal(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),

    #[error("singular control direction: |L_g psi| = {lg:e} is not above {delta1:e}")]
    SingularControlDirection { lg: f64, delta1: f64 },

    #[error("Q(psi) never reaches {d} inside |psi| <= {limit}")]
    NoSolution { d: f64, limit: f64 },

    #[error("supplied {what} disagrees with finite differences (relative error {rel_err:e})")]
    GradientMismatch { what: String, rel_err: f64 },

    #[error("monotone parameterization violated: {0}")]
    MonotonicityViolation(String),

    #[error("regressor depends on uncertainty-dependent coordinate {coordinate} (|d alpha/dx| = {value:e})")]
    IndependenceViolated { coordinate: usize, value: f64 },

    #[error("Psi provider fails the realization PDE (residual {residual:e} at coordinate {coordinate})")]
    RealizabilityViolated { coordinate: usize, residual: f64 },

    #[error("observer channel is not linearly parameterized (residual {residual:e})")]
    NotLinearlyParameterized { residual: f64 },

    #[error("hypothesis of embedded variant {variant} violated (value {value:e})")]
    VariantHypothesisViolated { variant: &'static str, value: f64 },

    #[error("stage {stage} violates its assumptions: {detail}")]
    StageAssumptionViolated { stage: usize, detail: String },

    #[error("cascade design supports orders 1 and 2, got {n}")]
    UnsupportedOrder { n: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
