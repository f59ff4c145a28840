use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use finform_cli::{emit, resolve, run, run_bench, CliError, ExitStatus, Format, Scenario, BUILTINS};

#[derive(Parser)]
#[command(name = "finform", version, about = "Finite-form adaptive control scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace, plots and summary.
    Run {
        /// Built-in id or path to a TOML scenario.
        scenario: String,
        #[command(flatten)]
        opts: Overrides,
        #[arg(long, env = "FINFORM_OUT_DIR", default_value = "out")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        format: Format,
    },
    /// Control-energy table of the four two-stage loops.
    Bench {
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 500.0)]
        horizon: f64,
    },
    /// Simulate a scenario and report its checks without writing files.
    Check {
        scenario: String,
        #[command(flatten)]
        opts: Overrides,
    },
    /// List the built-in scenarios.
    List,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, allow_negative_numbers = true)]
    step: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    horizon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, mut sc: Scenario) -> Result<Scenario, CliError> {
        if let Some(h) = self.step {
            sc.step = h;
        }
        if let Some(t) = self.horizon {
            sc.horizon = t;
        }
        if let Some(s) = self.seed {
            sc.seed = Some(s);
        }
        sc.validate()?;
        Ok(sc)
    }
}

fn exit(status: ExitStatus) -> ExitCode {
    ExitCode::from(status as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit(ExitStatus::ConfigError)
            } else {
                exit(ExitStatus::Ok)
            };
        }
    };
    let result = match cli.command {
        Command::List => {
            for (id, what) in BUILTINS {
                println!("{id:<24} {what}");
            }
            Ok(ExitStatus::Ok)
        }
        Command::Bench { step, horizon } => run_bench(step, horizon).map(|table| {
            print!("{}", table.render());
            if table.passed() {
                ExitStatus::Ok
            } else {
                ExitStatus::CheckFailed
            }
        }),
        Command::Run {
            scenario,
            opts,
            out_dir,
            format,
        } => resolve(&scenario)
            .and_then(|sc| opts.apply(sc))
            .and_then(|sc| run(&sc))
            .and_then(|out| {
                print!("{}", out.summary());
                for p in emit(&out, &out_dir, format)? {
                    println!("wrote {}", p.display());
                }
                Ok(out.exit_status())
            }),
        Command::Check { scenario, opts } => resolve(&scenario)
            .and_then(|sc| opts.apply(sc))
            .and_then(|sc| run(&sc))
            .map(|out| {
                print!("{}", out.summary());
                out.exit_status()
            }),
    };
    match result {
        Ok(status) => exit(status),
        Err(e) => {
            eprintln!("error: {e}");
            exit(e.exit_status())
        }
    }
}
