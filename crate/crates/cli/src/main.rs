//! Command-line front end.
//!
//! Exit codes: 0 ok, 1 config error, 2 numeric failure, 3 check failure.

mod commands;
mod config;
mod csvio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::SweepKind;
use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum AppError {
    /// Bad config, paths, file formats, incompatible checkpoints.
    Config(String),
    /// NaN/Inf, divergence, degenerate numeric inputs.
    Numeric(String),
    /// A verification (gradient check) failed.
    Check(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl AppError {
    pub fn config(msg: String) -> Self {
        Self::Config(msg)
    }

    pub fn numeric(msg: String) -> Self {
        Self::Numeric(msg)
    }

    pub fn check(msg: String) -> Self {
        Self::Check(msg)
    }

    fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => 1,
            AppError::Numeric(_) => 2,
            AppError::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Numeric(m) | AppError::Check(m) => m,
        }
    }
}

impl From<cmlmcse::trainer::TrainError> for AppError {
    fn from(e: cmlmcse::trainer::TrainError) -> Self {
        use cmlmcse::trainer::TrainError as T;
        match &e {
            T::Diverged { .. } => AppError::Numeric(e.to_string()),
            T::Tensor(inner) => match inner {
                cmlmcse::TensorError::NonFinite { .. } | cmlmcse::TensorError::DegenerateInput { .. } => {
                    AppError::Numeric(e.to_string())
                }
                _ => AppError::Config(e.to_string()),
            },
            _ => AppError::Config(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "cmlmcse",
    about = "Contrastive sentence-embedding training with a conditional-MLM auxiliary network",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and CSV artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the conditional-MLM loss weight.
    #[arg(long)]
    lambda: Option<f32>,
    /// Override the masking rate.
    #[arg(long = "mask-rate")]
    mask_rate: Option<f32>,
    /// Allow overwriting existing outputs.
    #[arg(long)]
    force: bool,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig, AppError> {
        RunConfig::load(
            &self.config,
            Overrides { seed: self.seed, lambda: self.lambda, mask_rate: self.mask_rate },
        )
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Warm-up MLM pretraining: builds the vocabulary and the base encoder.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Combined contrastive + conditional-MLM training from a base checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Pretrain checkpoint to start from.
        #[arg(long)]
        base: PathBuf,
    },
    /// Spearman STS evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Three-column TSV: sentence_a, sentence_b, gold.
        #[arg(long)]
        sts: PathBuf,
    },
    /// Train one model per sweep point and evaluate each.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_enum)]
        sweep: SweepKind,
    },
    /// Full gradient-checking suite.
    Gradcheck,
    /// Generate a synthetic STS TSV from the corpus.
    GenSts {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::Pretrain { common } => {
            let cfg = common.load()?;
            commands::cmd_pretrain(&cfg, &common.out, common.force)
        }
        Cmd::Train { common, base } => {
            let cfg = common.load()?;
            commands::cmd_train(&cfg, &base, &common.out, common.force)
        }
        Cmd::Eval { common, ckpt, sts } => {
            let cfg = common.load()?;
            commands::cmd_eval(&cfg, &ckpt, &sts, &common.out, common.force)
        }
        Cmd::Ablate { common, base, sweep } => {
            let cfg = common.load()?;
            commands::cmd_ablate(&cfg, &base, sweep, &common.out, common.force)
        }
        Cmd::Gradcheck => commands::cmd_gradcheck(),
        Cmd::GenSts { common } => {
            let cfg = common.load()?;
            commands::cmd_gen_sts(&cfg, &common.out, common.force)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are success paths
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
