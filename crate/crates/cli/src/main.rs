//! `kqr` command-line front end.
//!
//! Exit codes: 0 on success with a certified fit, 1 on usage, input or I/O
//! errors, 2 when a fit finished without a KKT certificate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "kqr", version, about = "Exact kernel quantile regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one quantile level, or several jointly with a crossing penalty.
    Fit(FitArgs),
    /// Predict new rows from a saved model.
    Predict(PredictArgs),
    /// Choose λ by k-fold cross-validation.
    Cv(CvArgs),
    /// Write a simulated dataset.
    Simulate(SimulateArgs),
    /// Time the spectral λ path against the dense per-λ baseline.
    Bench(BenchArgs),
    /// Write fitted quantile curves on a grid for a model with one covariate.
    EmitCurves(CurvesArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Comma-separated input table.
    #[arg(long)]
    pub data: PathBuf,
    /// Response column, by header name or zero-based index. Defaults to the last column.
    #[arg(long)]
    pub response: Option<String>,
    /// Treat the first row as data even if it looks like a header.
    #[arg(long)]
    pub no_header: bool,
    /// Center and scale covariates before fitting.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelChoice {
    Rbf,
    Linear,
}

#[derive(Args, Debug, Clone)]
pub struct KernelArgs {
    #[arg(long, value_enum, default_value = "rbf")]
    pub kernel: KernelChoice,
    /// RBF bandwidth, or "median" for the median pairwise distance.
    #[arg(long, default_value = "median")]
    pub sigma: String,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub kkt_tol: f64,
    /// Iteration cap per smoothing level.
    #[arg(long, default_value_t = 20_000)]
    pub max_iter: usize,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Quantile level(s); two or more select the joint non-crossing fit.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_tau)]
    pub tau: Vec<f64>,
    /// Ridge weight λ (λ₂ for joint fits).
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Crossing penalty weight λ₁ for joint fits.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Width of the smooth crossing penalty.
    #[arg(long, default_value_t = 1e-5)]
    pub eta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Covariate table. All columns are covariates unless --response names one to drop.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub response: Option<String>,
    #[arg(long)]
    pub no_header: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_tau)]
    pub tau: Vec<f64>,
    /// Explicit λ values (λ₂ for joint fits); overrides the log grid.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_max: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda_min: f64,
    #[arg(long, default_value_t = 50)]
    pub lambda_count: usize,
    /// λ₁ values searched for joint fits.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub lambda1s: Vec<f64>,
    #[arg(long, default_value_t = 1e-5)]
    pub eta: f64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-λ loss table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Design {
    Friedman,
    Yuan,
    Heteroscedastic,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub model: Design,
    #[arg(long)]
    pub n: usize,
    /// Covariate count (friedman only).
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    /// Pairwise covariate correlation (friedman only).
    #[arg(long, default_value_t = 0.1)]
    pub rho: f64,
    /// Signal-to-noise ratio (friedman only).
    #[arg(long, default_value_t = 3.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    #[arg(long, default_value_t = 50)]
    pub lambda_count: usize,
    #[arg(long, default_value_t = 0.5, value_parser = parse_tau)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Timing and objective table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CurvesArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Number of grid points across the training range.
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_tau(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("quantile level must lie strictly between 0 and 1, got {v}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage_error { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Cv(a) => commands::cv(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::EmitCurves(a) => commands::emit_curves(&a),
    };
    match result {
        Ok(commands::Outcome::Certified) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Uncertified(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
