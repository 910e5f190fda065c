mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Long-tailed contrastive training, verification and geometry tools.
#[derive(Parser, Debug)]
#[command(name = "ecl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set loss.tau=0.1` or `--set lambda_cc_ge=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for data, initialization and training order.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write history.csv, checkpoint.json and config.toml.
    Train {
        /// Run the four loss-ablation rows, one subdirectory each.
        #[arg(long)]
        ablation_sweep: bool,
        /// Also write test-split embeddings (z and f spaces).
        #[arg(long)]
        embeddings: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run a property suite; exit 1 on any violation.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        /// Number of random instances (suite default when omitted).
        #[arg(long)]
        instances: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// FC, MS, SD and 2-D PCA of an embeddings CSV.
    Metrics {
        /// CSV with header `id,label,dim1,...,dimd`.
        #[arg(long)]
        embeddings: PathBuf,
        /// Checkpoint supplying classifier weights for SD.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate the synthetic long-tailed dataset.
    Gendata {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Bounds,
    Trivials,
    Duplication,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            ablation_sweep,
            embeddings,
            common,
        } => commands::train(&common, ablation_sweep, embeddings),
        Command::Verify {
            suite,
            instances,
            common,
        } => commands::verify(&common, suite, instances),
        Command::Metrics {
            embeddings,
            checkpoint,
            common,
        } => commands::metrics(&common, &embeddings, checkpoint.as_deref()),
        Command::Gendata { common } => commands::gendata(&common),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
