//! Shared closure types. All fields are `Send + Sync` so assembled systems
//! can move between threads for batch runs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

/// `(x, t) -> scalar`.
pub type ScalarField = Arc<dyn Fn(&DVector<f64>, f64) -> f64 + Send + Sync>;
/// `(x, t) -> vector`.
pub type VectorField = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
/// `(x, t) -> matrix`.
pub type MatrixField = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
/// `(x, theta, t) -> scalar`.
pub type UncertainScalar = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send + Sync>;
/// `t -> scalar`.
pub type Signal = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `t -> vector`.
pub type VectorSignal = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

pub fn scalar_field<F>(f: F) -> ScalarField
where
    F: Fn(&DVector<f64>, f64) -> f64 + Send + Sync + 'static,
{
    Arc::new(f)
}

pub fn vector_field<F>(f: F) -> VectorField
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
{
    Arc::new(f)
}

pub fn matrix_field<F>(f: F) -> MatrixField
where
    F: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
{
    Arc::new(f)
}

pub fn signal<F>(f: F) -> Signal
where
    F: Fn(f64) -> f64 + Send + Sync + 'static,
{
    Arc::new(f)
}
