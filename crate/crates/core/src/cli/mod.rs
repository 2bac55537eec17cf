//! Command-line experiment runner.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

pub use commands::{
    build_setup, cmd_converge, cmd_gradcheck, cmd_optimize, cmd_sample, error_exit_code,
    gradcheck_rows, relative_error, run_convergence, run_optimization, solution_inference,
    ConvergeSummary, GradcheckRow, OptimizeRun, Outcome, EXIT_NOT_CONVERGED, EXIT_NUMERICAL,
    EXIT_SUCCESS, EXIT_VALIDATION,
};
pub use config::{ConvergeConfig, GradcheckConfig, KernelChoice, Method, ProblemKind, RunConfig, SampleConfig};

use crate::error::{invalid, Result};

#[derive(Debug, Parser)]
#[command(
    name = "rfopt",
    version,
    about = "Optimize mean and covariance parameters of Gaussian random fields by sample average approximation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON config file; keys not given keep their defaults
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Seed of the normal draws [default: 5]
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Number of Monte Carlo samples N [default: 10000]
    #[arg(long, global = true, value_name = "N")]
    pub samples: Option<usize>,

    /// Covariance sensitivity method [default: scaled]
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,

    /// Print the optimizer iteration history to stderr
    #[arg(long, global = true)]
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write field realizations and the eigenvalue spectrum
    Sample,
    /// Compare pathwise gradients with finite differences
    Gradcheck,
    /// Solve the configured problem and report confidence intervals
    Optimize,
    /// Replicated optimizations over several sample sizes
    Converge,
}

impl Cli {
    /// Defaults, then the config file, then command-line flags.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.samples {
            cfg.samples = n;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        Ok(cfg)
    }
}

fn command_with_defaults() -> clap::Command {
    let defaults = serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes");
    Cli::command().after_long_help(format!(
        "Exit status: 0 success, 1 invalid input, 2 numerical failure, 3 solver did not converge.\n\n\
         Config file schema with default values:\n{defaults}"
    ))
}

/// Run one command with a resolved configuration.
pub fn execute(command: Command, cfg: &RunConfig, trace: bool) -> Result<Outcome> {
    let run = || match command {
        Command::Sample => cmd_sample(cfg),
        Command::Gradcheck => cmd_gradcheck(cfg),
        Command::Optimize => cmd_optimize(cfg, trace),
        Command::Converge => cmd_converge(cfg),
    };
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| invalid(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Parse arguments, run, and return the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command_with_defaults()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_SUCCESS };
            let _ = e.print();
            return code;
        }
    };
    let result = cli.resolve_config().and_then(|cfg| execute(cli.command, &cfg, cli.trace));
    match result {
        Ok(outcome) => {
            match &outcome {
                Outcome::Success => {}
                Outcome::CheckFailed(msg) | Outcome::NotConverged(msg) => eprintln!("error: {msg}"),
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            error_exit_code(&e)
        }
    }
}
