use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Deterministic generator used by every sampled check.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Axis-aligned box of sample points.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl SampleBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                context: "sample box",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::InvalidArgument("sample box needs finite lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    /// Cube `[-r, r]^dim`.
    pub fn symmetric(dim: usize, r: f64) -> Self {
        Self::new(vec![-r; dim], vec![r; dim]).expect("valid cube")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo
                .iter()
                .zip(&self.hi)
                .map(|(l, h)| if l == h { *l } else { rng.random_range(*l..*h) }),
        )
    }
}
