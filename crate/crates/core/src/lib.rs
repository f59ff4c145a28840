//! Finite-form adaptive control for nonlinearly parameterized systems.
//!
//! The crate covers plant models with an explicit uncertainty partition,
//! goal functions and certainty-equivalence control, the finite-form
//! estimator and its realization routes, auxiliary-system embeddings and the
//! cascade design, reference backstepping controllers, and numeric checks of
//! the performance bounds along simulated trajectories.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_loop;
pub mod comparators;
pub mod embedding;
pub mod error;
pub mod fields;
pub mod finform;
pub mod goal;
pub mod metrics;
pub mod numeric;
pub mod plant;
pub mod scenarios;

pub use closed_loop::{finite_form_loop, ClosedLoop, LoopEval};
pub use embedding::{
    cascade_design, embedded_loop, AuxiliarySystem, CascadeDesign, CascadeInit, CascadeLayout, EmbeddedVariant,
    EstimatorTarget, StageModel,
};
pub use error::{Error, Result};
pub use finform::{EstimatorBinding, FiniteFormEstimator, Gain, PsiKind, PsiProvider};
pub use goal::{GoalSpec, Parameterization, Sector, TargetDynamics};
pub use metrics::{BoundContext, BoundReport, CheckStatus};
pub use numeric::{simulate, OdeSystem, Probe, SimTrace};
pub use plant::{CascadePlant, LipschitzFactors, PartitionedPlant};

pub use nalgebra::{DMatrix, DVector};
