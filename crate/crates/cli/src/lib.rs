//! Command-line front end for the federated mixture EM library.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fedmix", version, about = "Distributed EM for two-component Gaussian mixtures across sites")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a simulated study and export one CSV per site.
    Simulate(SimulateArgs),
    /// Fit estimators to exported site files.
    Fit(FitArgs),
    /// Per-iteration relative distance between distributed and pooled EM.
    ReproduceFig1(Fig1Args),
    /// Bias, variance and MSE of every estimator over the simulation grid.
    ReproduceBiasMse(BiasMseArgs),
    /// Data summary, SNR and the initialization radius check.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of replications; more than one writes rep_000, rep_001, ...
    #[arg(long)]
    pub reps: Option<usize>,
    /// First replication index.
    #[arg(long, default_value_t = 0)]
    pub rep: u64,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub a: Option<f64>,
    /// Number of sites K.
    #[arg(long)]
    pub sites: Option<usize>,
    /// Observations per site.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// A study directory or a list of site files; the first is the lead site.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Shared isotropic covariance σ²I.
    #[arg(long, conflicts_with = "covariance")]
    pub sigma2: Option<f64>,
    /// Shared covariance matrix as a CSV file of d rows with d values each.
    #[arg(long)]
    pub covariance: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated list of local, average, pooled, distributed.
    #[arg(long, default_value = "distributed")]
    pub estimators: String,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Fig1Args {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Iterations to record.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BiasMseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Comma-separated estimator list.
    #[arg(long)]
    pub estimators: Option<String>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Radius-check constants; defaults are c0 = cw = 0.1, c1 = 0.75.
    #[arg(long)]
    pub c0: Option<f64>,
    #[arg(long)]
    pub cw: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
}

pub fn run(cli: Cli) -> fedmix::Result<()> {
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::ReproduceFig1(a) => commands::reproduce_fig1(&a),
        Command::ReproduceBiasMse(a) => commands::reproduce_bias_mse(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
    }
}

/// The error summary written to stderr on failure.
pub fn error_json(err: &fedmix::FedMixError) -> String {
    let mut causes = Vec::new();
    let mut source = std::error::Error::source(err);
    while let Some(e) = source {
        causes.push(e.to_string());
        source = e.source();
    }
    serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
        "causes": causes,
    })
    .to_string()
}
