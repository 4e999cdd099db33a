//! The `riskstop` command line.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use config::{load_config, ConfigError, Overrides};

/// Exit status contract of the binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const NO_CONVERGENCE: i32 = 2;
    pub const PROPERTY: i32 = 3;
}

#[derive(Debug, Parser)]
#[command(name = "riskstop", version, about = "Risk-sensitive optimal stopping of continuous-time Markov chains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for `report.json` and CSV tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `simulation.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `threads`.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Writes one row per simulated path to this file.
    #[arg(long)]
    pub paths_csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model and utility and print derived quantities.
    Validate(RunArgs),
    /// Backward iteration over `solver.horizon` jumps.
    SolveFinite(RunArgs),
    /// Fixed-point iteration for the unbounded horizon.
    SolveInfinite(RunArgs),
    /// Closed-form solver for exponential utility.
    SolveExp(RunArgs),
    /// One-step look-ahead sets and certificates.
    Ola(RunArgs),
    /// Monte Carlo value of a stopping rule.
    Simulate(RunArgs),
    /// Transversality diagnostic of the optimal rule.
    TailCheck(RunArgs),
    /// Compare stopping under two utilities.
    CompareRisk(RunArgs),
    /// Solve and check a house-selling model.
    House(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::SolveFinite(_) => "solve-finite",
            Command::SolveInfinite(_) => "solve-infinite",
            Command::SolveExp(_) => "solve-exp",
            Command::Ola(_) => "ola",
            Command::Simulate(_) => "simulate",
            Command::TailCheck(_) => "tail-check",
            Command::CompareRisk(_) => "compare-risk",
            Command::House(_) => "house",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Validate(a)
            | Command::SolveFinite(a)
            | Command::SolveInfinite(a)
            | Command::SolveExp(a)
            | Command::Ola(a)
            | Command::Simulate(a)
            | Command::TailCheck(a)
            | Command::CompareRisk(a)
            | Command::House(a) => a,
        }
    }
}

/// A failed run: exit status plus the machine-readable error object.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub exit: i32,
    pub code: String,
    pub message: String,
    pub details: Value,
}

impl Failure {
    pub fn new(exit: i32, code: &str, message: impl Into<String>) -> Self {
        Self {
            exit,
            code: code.to_string(),
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    fn to_json(&self) -> Value {
        let mut v = json!({"code": self.code, "message": self.message});
        if !self.details.is_null() {
            v["details"] = self.details.clone();
        }
        v
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match &e {
            ConfigError::Io(_) => Failure::new(exit::VALIDATION, "IO_ERROR", e.to_string()),
            ConfigError::Schema { pointer, message } => {
                Failure::new(exit::VALIDATION, "SCHEMA_ERROR", message.clone()).with_details(json!({"pointer": pointer}))
            }
            ConfigError::Model(m) => commands::model_failure(m),
            ConfigError::House(h) => Failure::new(exit::VALIDATION, h.code(), h.to_string()),
        }
    }
}

/// Successful command output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outcome {
    pub result: Value,
    pub diagnostics: Value,
}

/// Parses the command line, runs the command, prints the report and returns
/// the exit status.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    run(&cli.command)
}

pub fn run(command: &Command) -> i32 {
    let args = command.args();
    let overrides = Overrides {
        seed: args.seed,
        threads: args.threads,
    };
    let (config_echo, outcome) = match load_config(&args.config, overrides) {
        Err(e) => (Value::Null, Err(Failure::from(e))),
        Ok(cfg) => {
            // A global pool can only be set once per process; later calls keep it.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
            let outcome = commands::dispatch(command, &cfg, args);
            (cfg.echo(), outcome)
        }
    };
    let (status, report) = match outcome {
        Ok(o) => (
            exit::OK,
            output::report(command.name(), config_echo, o.result, o.diagnostics, None),
        ),
        Err(f) => (
            f.exit,
            output::report(command.name(), config_echo, Value::Null, Value::Null, Some(f.to_json())),
        ),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(dir) = &args.out {
        let written = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(dir.join("report.json"), &text));
        if let Err(e) = written {
            eprintln!("cannot write report: {e}");
            return exit::VALIDATION;
        }
    }
    status
}
