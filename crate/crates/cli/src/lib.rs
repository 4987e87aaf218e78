//! Command-line front end over `moesl-core`. Every subcommand produces one
//! [`TableArtifact`] plus a list of contract violations.

pub mod artifact;
pub mod commands;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

pub use artifact::{config_hash, Cell, TableArtifact};
pub use error::{CliError, CliResult};

use commands::{fit, id, lab, theory};

/// Exit code for runs that finished but broke a checked contract.
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Debug, Clone, Parser, Serialize)]
#[command(name = "moesl", version, about = "MoE scaling-law toolkit")]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file (stdout when absent).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
pub enum Command {
    /// Theoretical exponents for (d, beta) pairs.
    Exponents(theory::ExponentsArgs),
    /// Active-parameter accounting for architecture configs.
    Budget(theory::BudgetArgs),
    /// Power-law fit of a loss curve.
    Fit(fit::FitArgs),
    /// Per-expert-count identity checks and amplification fit.
    PerExpert(fit::PerExpertArgs),
    /// Levina-Bickel intrinsic-dimension estimate.
    IdEstimate(id::IdArgs),
    /// Optimal number of active experts.
    OptimalK(theory::OptimalKArgs),
    /// Compute-optimal split between model size and data.
    ComputeOptimal(theory::ComputeArgs),
    /// Exact routing-pattern counts against the log bound.
    Routing(theory::RoutingArgs),
    /// Approximation-rate experiment on a 1-d manifold.
    ApproxRate(lab::RateArgs),
    /// Softmax Lipschitz check or forward-pass stability.
    Lipschitz(lab::LipschitzArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Exponents(_) => "exponents",
            Command::Budget(_) => "budget",
            Command::Fit(_) => "fit",
            Command::PerExpert(_) => "per-expert",
            Command::IdEstimate(_) => "id-estimate",
            Command::OptimalK(_) => "optimal-k",
            Command::ComputeOptimal(_) => "compute-optimal",
            Command::Routing(_) => "routing",
            Command::ApproxRate(_) => "approx-rate",
            Command::Lipschitz(_) => "lipschitz",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub table: TableArtifact,
    pub violations: Vec<String>,
}

impl Outcome {
    pub(crate) fn ok(table: TableArtifact) -> Self {
        Self {
            table,
            violations: Vec::new(),
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let seed = cli.seed;
    let mut outcome = match &cli.command {
        Command::Exponents(a) => theory::exponents(a)?,
        Command::Budget(a) => theory::budget(a)?,
        Command::Fit(a) => fit::fit(a)?,
        Command::PerExpert(a) => fit::per_expert(a)?,
        Command::IdEstimate(a) => id::id_estimate(a, seed)?,
        Command::OptimalK(a) => theory::optimal_k(a, seed)?,
        Command::ComputeOptimal(a) => theory::compute_optimal(a, seed)?,
        Command::Routing(a) => theory::routing(a)?,
        Command::ApproxRate(a) => lab::approx_rate(a)?,
        Command::Lipschitz(a) => lab::lipschitz(a, seed)?,
    };
    outcome.table.provenance = format!(
        "moesl {} config_sha256={}",
        cli.command.name(),
        config_hash(&(seed, &cli.command))
    );
    Ok(outcome)
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I) -> CliResult<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(&cli)
}
