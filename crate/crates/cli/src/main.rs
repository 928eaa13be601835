//! `mvu`: design, check and apply compressed LDP mechanism tables.
//!
//! Exit codes: 0 on success, 2 on invalid input or an infeasible table,
//! 3 when the designer did not converge (artifacts are still written),
//! 1 on any other failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mvu", version, about = "Jointly designed local-DP and compression mechanisms")]
pub struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Suppress the human-readable summary on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Design a mechanism table and write it as JSON.
    Design(DesignArgs),
    /// Validate a table file against its tolerances.
    Check(CheckArgs),
    /// Privatize vectors from a CSV file into packed payloads.
    Privatize(PrivatizeArgs),
    /// Rényi-DP accounting for repeated vector use of a table.
    Account(AccountArgs),
    /// Simulate distributed mean estimation and write per-trial CSV rows.
    SimulateDme(SimulateArgs),
    /// Design tables over several output budgets at a fixed input grid.
    BudgetSweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MechanismKind {
    Mvu,
    MvuMetric,
    Brr,
    Grr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Hard,
    Penalty,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[arg(long, value_enum)]
    pub mechanism: MechanismKind,
    /// Privacy parameter in nats.
    #[arg(long)]
    pub epsilon: f64,
    /// Input bits; defaults to `--bout`.
    #[arg(long)]
    pub bin: Option<u32>,
    #[arg(long)]
    pub bout: u32,
    /// Exponent of the metric `|x - y|^p`.
    #[arg(long, default_value_t = 1.0)]
    pub metric_p: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Hard)]
    pub method: MethodArg,
    /// Extra perturbed starts.
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    pub table: PathBuf,
    #[arg(long)]
    pub tol_dp: Option<f64>,
    #[arg(long)]
    pub tol_bias: Option<f64>,
    #[arg(long)]
    pub tol_row_sum: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PrivatizeArgs {
    #[arg(long)]
    pub table: PathBuf,
    /// CSV of client vectors, one per row; `#` starts a comment.
    #[arg(long)]
    pub input: PathBuf,
    /// Norm of the sensitivity ball.
    #[arg(long, default_value_t = 1.0)]
    pub p: f64,
    /// Radius of the sensitivity ball.
    #[arg(long, default_value_t = 1.0)]
    pub sensitivity: f64,
    /// Quantize each vector onto the table's input grid with a norm-bounded
    /// dither first; the shrink factor is written to the sidecar file.
    #[arg(long)]
    pub norm_preserving: bool,
    #[arg(long, default_value_t = 0.01)]
    pub dither_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RdpMethodArg {
    Greedy,
    Lp,
    Exact,
}

#[derive(Debug, Args)]
pub struct AccountArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub metric_p: f64,
    /// Neighbouring-input distance after scaling into the unit cube.
    #[arg(long, default_value_t = 0.5)]
    pub sensitivity: f64,
    /// Vector dimension.
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub steps: u64,
    #[arg(long)]
    pub delta: f64,
    #[arg(long, value_enum, default_value_t = RdpMethodArg::Lp)]
    pub method: RdpMethodArg,
    /// Rényi orders; defaults to 1.25, 1.5, 2, 3, ..., 64.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Scalar,
    VectorL1,
    VectorL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Laplace,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Existing table files, each simulated at its own ε.
    #[arg(long)]
    pub table: Vec<PathBuf>,
    /// Uncompressed baselines, run at every `--epsilons` value.
    #[arg(long, value_enum)]
    pub baseline: Vec<BaselineArg>,
    /// Design an MVU table for every `--epsilons` value (metric for vector
    /// modes, pure LDP for scalar mode).
    #[arg(long)]
    pub mvu: bool,
    #[arg(long)]
    pub bin: Option<u32>,
    #[arg(long, default_value_t = 3)]
    pub bout: u32,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 3.0, 5.0])]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Scalar inputs in [-1, 1]; the squared error is averaged over them.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Vec<f64>,
    /// δ of the Gaussian baseline.
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dither_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrivacyKindArg {
    Pure,
    Metric,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long)]
    pub bin: u32,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5])]
    pub bouts: Vec<u32>,
    #[arg(long, value_enum, default_value_t = PrivacyKindArg::Pure)]
    pub kind: PrivacyKindArg,
    #[arg(long, default_value_t = 1.0)]
    pub metric_p: f64,
    /// Clients per simulated trial; 0 skips simulation.
    #[arg(long, default_value_t = 0)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::dispatch(&cli) {
        Ok(commands::Status::Done) => ExitCode::SUCCESS,
        Ok(commands::Status::NotConverged) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
