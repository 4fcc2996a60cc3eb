//! `scenefill`: fine-tune, complete, benchmark and synthetic-data commands.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scenefill_core::Error;

/// Exit status plus a one-line diagnostic.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_MISMATCH: u8 = 3;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_)
            | Error::IncompleteScene { .. }
            | Error::TooManyReferences { .. }
            | Error::GeometryMismatch(_)
            | Error::InvalidImage(_)
            | Error::ShapeTooSmall { .. }
            | Error::NoInjectionTargets => EXIT_INVALID,
            Error::AdapterMismatch(_) => EXIT_MISMATCH,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "scenefill", version, about = "Reference-driven image completion", after_long_help = config::key_listing())]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override any configuration key, e.g. `--set train.rank=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// `toy` or `pretrained:<checkpoint.json>`.
    #[arg(long)]
    backend: Option<String>,

    /// Seed for training and sampling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune adapters on one scene.
    #[command(after_long_help = config::key_listing())]
    Finetune {
        scene_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample, composite and rank candidates for one scene.
    #[command(after_long_help = config::key_listing())]
    Complete {
        scene_dir: PathBuf,
        /// Adapter directory written by `finetune`; omit to use the base model.
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        filter_rate: Option<f64>,
        /// Condition on an all-ones mask (blank canvas).
        #[arg(long)]
        mask_all: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the benchmark over every scene directory in a dataset.
    #[command(after_long_help = config::key_listing())]
    Bench {
        dataset_dir: PathBuf,
        /// Parent of run directories.
        #[arg(long)]
        out: PathBuf,
        /// Run directory name; defaults to `run-<config hash>`.
        #[arg(long)]
        run_id: Option<String>,
        /// Comma-separated filtering rates, e.g. `0,0.75`.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Keep completed stages from an earlier run.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Write synthetic scenes with ground truth.
    MakeSynthetic {
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Square side length in pixels (even, at least 16).
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train the toy denoiser on synthetic data and save a checkpoint usable
    /// as `--backend pretrained:<path>`.
    #[command(after_long_help = config::key_listing())]
    PretrainToy {
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Finetune {
            scene_dir,
            out,
            iterations,
            common,
        } => commands::finetune(&scene_dir, &out, iterations, &common),
        Command::Complete {
            scene_dir,
            adapters,
            out,
            candidates,
            filter_rate,
            mask_all,
            steps,
            common,
        } => commands::complete(
            &scene_dir,
            adapters.as_deref(),
            &out,
            commands::CompleteFlags {
                candidates,
                filter_rate,
                mask_all,
                steps,
            },
            &common,
        ),
        Command::Bench {
            dataset_dir,
            out,
            run_id,
            rates,
            resume,
            workers,
            iterations,
            candidates,
            steps,
            common,
        } => commands::bench(
            &dataset_dir,
            &out,
            commands::BenchFlags {
                run_id,
                rates,
                resume,
                workers,
                iterations,
                candidates,
                steps,
            },
            &common,
        ),
        Command::MakeSynthetic {
            out,
            count,
            first_seed,
            size,
        } => commands::make_synthetic(&out, count, first_seed, size),
        Command::PretrainToy { out, steps, common } => commands::pretrain_toy(&out, steps, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
