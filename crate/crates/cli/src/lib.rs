//! Command-line front end for `treerate`.

pub mod commands;
pub mod files;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use treerate::crossover::SolverConfig;
use treerate::trees::Edge;

pub use output::Format;

pub const SEED_ENV: &str = "TREERATE_SEED";
pub const DEFAULT_SEED: u64 = 0x5EED;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Parse(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Usage(_) => 4,
            CliError::NonConvergence(_) => 5,
        }
    }
}

impl From<treerate::Error> for CliError {
    fn from(e: treerate::Error) -> Self {
        match e {
            treerate::Error::SolverNonConvergence { .. } => CliError::NonConvergence(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "treerate", version, about = "Error exponents for Chow-Liu tree learning")]
pub struct Cli {
    /// Report format. `json` is stable and meant for scripts.
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a Chow-Liu tree from a sample file.
    Learn(LearnArgs),
    /// Error exponent of a model.
    Exponent(ExponentArgs),
    /// Crossover rate of one (edge, non-edge) pair.
    Crossover(CrossoverArgs),
    /// Monte Carlo estimate of the structure error probability.
    Simulate(SimulateArgs),
    /// Optimal tree projections of a dense model.
    Project(ProjectArgs),
    /// Canned star experiments, written as CSV.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RateMode {
    Exact,
    Approx,
}

impl From<RateMode> for treerate::exponent::Mode {
    fn from(m: RateMode) -> Self {
        match m {
            RateMode::Exact => treerate::exponent::Mode::Exact,
            RateMode::Approx => treerate::exponent::Mode::Approx,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CrossoverMode {
    Exact,
    Approx,
    Empirical,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Random restarts of the crossover solver.
    #[arg(long, default_value_t = 20)]
    pub restarts: usize,
    /// Tolerance on |I(Q_e) - I(Q_e')| at the solution.
    #[arg(long, default_value_t = 1e-8)]
    pub constraint_tol: f64,
    /// Inner iteration cap per penalty stage.
    #[arg(long, default_value_t = 500)]
    pub max_inner_iters: usize,
}

impl SolverArgs {
    pub fn config(&self, seed: u64) -> SolverConfig {
        SolverConfig {
            restarts: self.restarts,
            constraint_tol: self.constraint_tol,
            max_inner_iters: self.max_inner_iters,
            seed,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SeedArg {
    #[arg(long, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    pub samples: PathBuf,
    /// Where to write the learned model. Without it the model goes to
    /// stdout and the report to stderr.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Alphabet size. Defaults to the largest symbol seen plus one.
    #[arg(long)]
    pub alphabet: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExponentArgs {
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = RateMode::Exact)]
    pub mode: RateMode,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct CrossoverArgs {
    pub model: PathBuf,
    /// Tree edge as `i,j`.
    #[arg(long, value_parser = parse_edge)]
    pub edge: Edge,
    /// Non-edge as `k,l`.
    #[arg(long, value_parser = parse_edge)]
    pub nonedge: Edge,
    #[arg(long, value_enum, default_value_t = CrossoverMode::Exact)]
    pub mode: CrossoverMode,
    /// Sample file for empirical mode.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Add 1/(2n) to every empirical cell so zero counts are allowed.
    #[arg(long)]
    pub smoothing: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub model: PathBuf,
    /// Samples per run; a comma-separated list gives one row per value.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = treerate::simulate::DEFAULT_RUNS)]
    pub runs: u64,
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    pub model: PathBuf,
    /// Also compute the exponent over the projection set.
    #[arg(long)]
    pub exponent: bool,
    #[arg(long, value_enum, default_value_t = RateMode::Exact)]
    pub mode: RateMode,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// Exact and approximate rates over a gamma sweep.
    Star4Rates,
    /// Simulated error exponent over a sample-size sweep.
    Star4Sim,
    /// Plug-in rates from samples over a sample-size sweep.
    Star4Empirical,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub name: Experiment,
    #[arg(long, value_delimiter = ',')]
    pub gamma_list: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,
    /// Monte Carlo runs per row (star4-sim).
    #[arg(long, default_value_t = treerate::simulate::DEFAULT_RUNS)]
    pub runs: u64,
    /// Seeds per row (star4-empirical).
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    /// Add the long n = 8e6 row at gamma = 0.01 (star4-empirical).
    #[arg(long)]
    pub full: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub solver: SolverArgs,
}

pub fn parse_edge(s: &str) -> Result<Edge, String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected i,j, got {s:?}"))?;
    let a = a.trim().parse::<usize>().map_err(|e| format!("{a:?}: {e}"))?;
    let b = b.trim().parse::<usize>().map_err(|e| format!("{b:?}: {e}"))?;
    Edge::try_new(a, b).map_err(|e| e.to_string())
}

/// Runs a parsed command, writing the primary output to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let f = cli.format;
    match &cli.command {
        Command::Learn(a) => commands::learn(a, f, out),
        Command::Exponent(a) => commands::exponent(a, f, out),
        Command::Crossover(a) => commands::crossover(a, f, out),
        Command::Simulate(a) => commands::simulate(a, f, out),
        Command::Project(a) => commands::project(a, f, out),
        Command::Experiment(a) => commands::experiment(a, f, out),
    }
}
