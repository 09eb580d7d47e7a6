//! `collapse-lab`: closed-form minima, collapse prediction, β sweeps and
//! oracle verification for linear latent-variable models.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use collapse_lab::Error;

#[derive(Parser, Debug)]
#[command(name = "collapse-lab", version, about = "Closed-form global minima and posterior collapse in linear VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Whitened cross-moment spectrum of a dataset.
    Spectrum {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Closed-form global minimum at one β.
    Solve {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Post-multiply the solution by a random orthogonal factor drawn from this seed.
        #[arg(long, value_name = "SEED")]
        random_p: Option<u64>,
        /// Include the full U and W matrices.
        #[arg(long)]
        matrices: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Collapse prediction at one β.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Optimal loss, rank and encoder std devs over a β grid.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Grid `lo:hi:step`.
        #[arg(long, value_name = "LO:HI:STEP")]
        beta_grid: String,
        /// Also train at every β and add the empirical loss and σ columns.
        #[arg(long)]
        train: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Gradient-based training of the linear model.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train on random instances and compare with the closed forms.
    Verify {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Learn the decoder variance and check it against its optimum.
        #[arg(long)]
        learnable_decvar: bool,
        /// Scale β on the analytic side only (negative control).
        #[arg(long, default_value_t = 1.0, hide = true)]
        analytic_beta_scale: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Spectrum, global minimum and collapse prediction in one document.
    Report {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Also train and compare against the closed form.
        #[arg(long)]
        train: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset file (`.csv`, anything else is read as binary).
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Random synthetic dataset `d0,d2,n,seed`.
    #[arg(long, value_name = "D0,D2,N,SEED")]
    synthetic: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Latent dimension (defaults to min(d0, d2)).
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    eta_enc: f64,
    #[arg(long, default_value_t = 1.0)]
    eta_dec: f64,
    /// Learn the encoder std devs instead of fixing them at eta_enc.
    #[arg(long)]
    learnable_sigma: bool,
    /// Learn the decoder variance.
    #[arg(long)]
    learnable_decvar: bool,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// Input-dependent encoder std devs `|C x + f|` (implies learned σ).
    #[arg(long)]
    ddv: bool,
    /// Encoder and decoder biases (data is then used uncentered).
    #[arg(long)]
    bias: bool,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100_000)]
    max_steps: usize,
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report a Monte Carlo estimate of the final loss from this many draws.
    #[arg(long, value_name = "DRAWS")]
    monte_carlo: Option<usize>,
    /// Write the per-step trace as CSV.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Write to this file instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum OptimizerArg {
    PlainGd,
    Adam,
    Lbfgs,
}

/// Exit status: 1 for I/O and parse failures, 2 for invalid or degenerate
/// input, 3 when verification fails.
enum Failure {
    Lib(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io { .. } | Error::Parse { .. } => 1,
                _ => 2,
            })
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}
