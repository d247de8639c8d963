//! Command-line pipeline: synthetic data generation, router training,
//! evaluation, frontiers, ablations, pool-change and cold-start studies,
//! gradient checks and multi-seed reports.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use latent_router::evaluation::Scenario;

pub use config::RunConfig;
pub use error::CliError;

/// Environment variable capping evaluation and training parallelism.
pub const THREADS_ENV: &str = "LATENT_ROUTER_THREADS";

#[derive(Debug, Parser)]
#[command(name = "latent-router", version, about = "Train and evaluate learned model routers")]
pub struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cost weight, overriding the config.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic traces, pool metadata and ground truth.
    GenData,
    /// Train the router and write a checkpoint and training report.
    Train,
    /// Evaluate the router and baselines on the test split.
    Eval {
        /// Also time single routing decisions into latency.csv.
        #[arg(long)]
        latency: bool,
    },
    /// Trace cost-quality frontiers over the lambda grid.
    Frontier,
    /// Train the ablation variants and the depth and capsule sweeps.
    Ablate,
    /// Evaluate under restricted candidate pools.
    PoolRobustness {
        /// Run one scenario instead of all.
        #[arg(long)]
        scenario: Option<Scenario>,
    },
    /// Insert a held-out model with small calibration budgets.
    ColdStart,
    /// Compare analytic gradients with central finite differences.
    GradCheck,
    /// Aggregate result CSVs into means and standard deviations over seeds.
    Report,
}

/// Loads the config, applies flag overrides and validates the result.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(lambda) = cli.lambda {
        cfg.lambda = lambda;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the thread cap from the environment, if set.
pub fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Validation(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Eval { latency } => commands::eval(&cfg, *latency),
        Command::Frontier => commands::frontier(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::PoolRobustness { scenario } => commands::pool_robustness(&cfg, *scenario),
        Command::ColdStart => commands::cold_start(&cfg),
        Command::GradCheck => commands::grad_check(&cfg),
        Command::Report => commands::report(&cfg),
    }
}
