//! Scenario loading, batch execution and result emission for the
//! finite-form adaptive control toolkit.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod emit;
pub mod error;
pub mod runner;

pub use bench::{run_bench, BenchRow, BenchTable};
pub use config::{builtin, load_scenario, resolve, CheckSpec, Scenario, BUILTINS};
pub use emit::{csv_bytes, emit, svg, Format};
pub use error::{CliError, ExitStatus};
pub use runner::{build, evaluate_checks, run, Built, RunOutcome};
