//! `sdecluster`: generate synthetic datasets, cluster a series into SDE
//! regimes, scan the hyperparameters, and fit and run stochastic closures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sdecluster::Error),
    #[error("no convergence: {0}")]
    NotConverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 1,
            CliError::Core(_) | CliError::Usage(_) => 2,
            CliError::NotConverged(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "sdecluster", version, about = "Regime clustering of one-dimensional SDEs")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, short = 'o', global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one of the built-in example datasets.
    Generate(GenerateArgs),
    /// Cluster a series with fixed K and ε².
    Cluster(ClusterArgs),
    /// Energy scan over ε² and, optionally, the gap statistic over K.
    Scan(ScanArgs),
    /// Fit scaling functions to a clustering and run the closed model.
    Closure(ClosureArgs),
    /// Run a fitted closure on the aux series of a dataset.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// ou, logdrift or doublewell.
    #[arg(long)]
    pub example: String,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dt_internal: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset CSV with columns `t,x[,aux…]`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model id; read from the dataset sidecar when absent.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eps2: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also write the final fitness matrix.
    #[arg(long)]
    pub dump_fitness: bool,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub k: Option<usize>,
    /// Skip the ε² scan and use this value for the gap statistic.
    #[arg(long)]
    pub eps2: Option<f64>,
    /// Run the gap statistic over the configured K values.
    #[arg(long)]
    pub gap: bool,
    /// Reference datasets per K.
    #[arg(long)]
    pub b: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ClosureArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `result.json` from `cluster` or `scan`.
    #[arg(long)]
    pub result: Option<PathBuf>,
    /// Polynomial degree for every parameter.
    #[arg(long)]
    pub degree: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `closure.json` from `closure`.
    #[arg(long)]
    pub closure: Option<PathBuf>,
    #[arg(long)]
    pub x0: Option<f64>,
    #[arg(long)]
    pub substeps: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.seed = cli.seed.or(cfg.seed);
    cfg.threads = cli.threads.or(cfg.threads);
    cfg.out = cli.out.clone().or(cfg.out.take());
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Generate(a) => commands::generate(&cfg, a),
        Command::Cluster(a) => commands::cluster(&cfg, a),
        Command::Scan(a) => commands::scan(&cfg, a),
        Command::Closure(a) => commands::closure(&cfg, a),
        Command::Simulate(a) => commands::simulate(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
