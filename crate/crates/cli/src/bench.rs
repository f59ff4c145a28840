//! Control-energy table of the four two-stage loops.

use std::fmt::Write as _;

use finform::metrics::control_energy;

use crate::config::{builtin, REFERENCE_ENERGY};
use crate::error::CliError;
use crate::runner::build;

/// Relative band around each reference energy.
pub const ENERGY_BAND: f64 = 0.15;

/// The four loops in increasing expected energy, as `(loop, built-in id)`.
pub const BENCH_LOOPS: [(&str, &str); 4] = [
    ("finform", "cascade-linear"),
    ("finform_tanh", "cascade-tanh"),
    ("backstepping_classic", "backstepping-classic"),
    ("backstepping_tuning", "backstepping-tuning"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub name: &'static str,
    pub energy: f64,
    pub reference: f64,
}

impl BenchRow {
    pub fn rel_err(&self) -> f64 {
        (self.energy - self.reference) / self.reference
    }

    pub fn within_band(&self) -> bool {
        self.rel_err().abs() <= ENERGY_BAND
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    pub step: f64,
    pub horizon: f64,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    /// Energies strictly increase down the table.
    pub fn ordered(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].energy < w[1].energy)
    }

    pub fn passed(&self) -> bool {
        self.ordered() && self.rows.iter().all(BenchRow::within_band)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "control energy, step {} horizon {}", self.step, self.horizon);
        let _ = writeln!(
            s,
            "{:<22} {:>14} {:>14} {:>9}  status",
            "controller", "energy", "reference", "rel_err"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>14.2} {:>14.2} {:>+8.2}%  {}",
                r.name,
                r.energy,
                r.reference,
                100.0 * r.rel_err(),
                if r.within_band() { "PASS" } else { "FAIL" }
            );
        }
        let names: Vec<&str> = self.rows.iter().map(|r| r.name).collect();
        let _ = writeln!(
            s,
            "ordering {}: {}",
            names.join(" < "),
            if self.ordered() { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Runs the four loops, one thread each.
pub fn run_bench(step: f64, horizon: f64) -> Result<BenchTable, CliError> {
    let results: Vec<Result<BenchRow, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = BENCH_LOOPS
            .iter()
            .map(|&(name, id)| {
                scope.spawn(move || -> Result<BenchRow, CliError> {
                    let mut sc = builtin(id).expect("bench scenarios are built in");
                    sc.step = step;
                    sc.horizon = horizon;
                    let built = build(&sc)?;
                    let trace = built.closed_loop.simulate(horizon, step)?;
                    let energy = control_energy(&trace).unwrap_or(f64::NAN);
                    let reference = REFERENCE_ENERGY
                        .iter()
                        .find(|(n, _)| *n == name)
                        .map_or(f64::NAN, |(_, v)| *v);
                    Ok(BenchRow {
                        name,
                        energy,
                        reference,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench thread")).collect()
    });
    Ok(BenchTable {
        step,
        horizon,
        rows: results.into_iter().collect::<Result<_, _>>()?,
    })
}
