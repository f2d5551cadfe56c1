//! Command-line experiments: rank-table validation, error decomposition,
//! forecasting from score files, cache coverage and the gridworld pipeline.
//!
//! Each command writes CSV files and a `manifest.txt` into its output
//! directory and reports gates through [`Outcome`].

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tailcast::Execution;

pub mod grid;
pub mod output;
pub mod settings;
pub mod stats;

use settings::{Count, Settings};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<tailcast::Error> for CliError {
    fn from(e: tailcast::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<tailcast_grid::GridError> for CliError {
    fn from(e: tailcast_grid::GridError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Gate {
    Skipped,
    Pass,
    Inconclusive,
    Fail,
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gate::Skipped => "skipped",
            Gate::Pass => "pass",
            Gate::Inconclusive => "inconclusive",
            Gate::Fail => "fail",
        })
    }
}

/// Worst gate of a run; commands without gates report `Skipped`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome(pub Gate);

impl Outcome {
    pub fn of(gates: impl IntoIterator<Item = Gate>) -> Self {
        Outcome(gates.into_iter().max().unwrap_or(Gate::Skipped))
    }

    pub fn exit_code(self) -> i32 {
        match self.0 {
            Gate::Skipped | Gate::Pass => 0,
            Gate::Inconclusive | Gate::Fail => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tailcast", version, about = "Tail-forecasting experiments", propagate_version = true)]
pub struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Monte Carlo trial count; its meaning and default depend on the command.
    #[arg(long, global = true)]
    pub trials: Option<Count>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat key=value file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank coefficients and whole-estimator bias against the reference table.
    ValidateRank(stats::ValidateRankArgs),
    /// Rank, curvature, occupancy and residual components of forecast error.
    Decompose(stats::DecomposeArgs),
    /// Fit the tail line to a score file and predict deployment quantiles.
    Forecast(stats::ForecastArgs),
    /// Fit-side coverage of a union top-C cache.
    Coverage(stats::CoverageArgs),
    /// Mean forecast error across top-counts at fixed deployment ratio.
    Ksweep(stats::KsweepArgs),
    /// Rank coefficient over a (k, R) grid.
    RankGrid(stats::RankGridArgs),
    /// Empirical survival and log-hazard of a score file.
    Hazard(stats::HazardArgs),
    /// Gridworld pretraining, fine-tuning, baselines and evaluation.
    #[command(subcommand)]
    Gridworld(grid::GridCommand),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ValidateRank(_) => "validate-rank",
            Command::Decompose(_) => "decompose",
            Command::Forecast(_) => "forecast",
            Command::Coverage(_) => "coverage",
            Command::Ksweep(_) => "ksweep",
            Command::RankGrid(_) => "rank-grid",
            Command::Hazard(_) => "hazard",
            Command::Gridworld(g) => g.name(),
        }
    }
}

/// Resolved global options.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub exec: Execution,
}

impl Globals {
    fn resolve(cli: &Cli, settings: &mut Settings) -> Result<Self, CliError> {
        let seed = settings.take("seed", cli.seed, 0u64)?;
        let default_out = format!("runs/{}", cli.command.name().replace(' ', "-"));
        let out: String = settings.take(
            "out_dir",
            cli.out.as_ref().map(|p| p.display().to_string()),
            default_out,
        )?;
        let threads = settings.take("threads", cli.threads, 0usize)?;
        let exec = if threads == 1 { Execution::Sequential } else { Execution::Parallel };
        Ok(Globals { seed, out: PathBuf::from(out), threads, exec })
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: usize) {
    if threads > 1 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_threads: usize) {}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let globals = Globals::resolve(&cli, &mut settings)?;
    configure_threads(globals.threads);
    match &cli.command {
        Command::ValidateRank(a) => stats::validate_rank(a, cli.trials, &globals, settings),
        Command::Decompose(a) => stats::decompose(a, cli.trials, &globals, settings),
        Command::Forecast(a) => stats::forecast(a, cli.trials, &globals, settings),
        Command::Coverage(a) => stats::coverage(a, cli.trials, &globals, settings),
        Command::Ksweep(a) => stats::ksweep(a, cli.trials, &globals, settings),
        Command::RankGrid(a) => stats::rank_grid(a, cli.trials, &globals, settings),
        Command::Hazard(a) => stats::hazard(a, cli.trials, &globals, settings),
        Command::Gridworld(g) => {
            if cli.trials.is_some() {
                return Err(CliError::Usage("--trials does not apply to gridworld commands".into()));
            }
            grid::run(g, &globals, settings)
        }
    }
}

/// Shared `--set key=value` overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}
