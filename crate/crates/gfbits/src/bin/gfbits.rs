//! Thin command-line front end over the library's experiment commands.

use clap::{Parser, Subcommand};
use gfbits::cli;
use gfbits::data::Split;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gfbits", about = "Dynamically quantized network training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantization-aware pretraining at the static precision.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Iterative alternating retraining (pretrains inline unless resumed).
    Alternate {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume from (round granularity).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Accuracy, model size, and the per-layer bit table of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Dataset split: "train" or "test".
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Per-round summaries and a plot-ready series from a metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn run() -> gfbits::Result<()> {
    match Cli::parse().command {
        Command::Pretrain { config, seed, out } => {
            let ckpt = cli::cmd_pretrain(&config, seed, &out)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Alternate {
            config,
            resume,
            seed,
            out,
        } => {
            let ckpt = cli::cmd_alternate(&config, resume.as_deref(), seed, &out)?;
            println!("final checkpoint written to {}", ckpt.display());
        }
        Command::Eval {
            checkpoint,
            config,
            split,
        } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(gfbits::Error::Usage(format!(
                        "unknown split {other:?} (expected train or test)"
                    )));
                }
            };
            let report = cli::cmd_eval(&checkpoint, &config, split)?;
            print!("{}", report.render());
        }
        Command::Report { metrics, out } => {
            let report = cli::cmd_report(&metrics, &out)?;
            println!(
                "{} round summaries written to {}",
                report.summaries.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
