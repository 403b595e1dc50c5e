mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Flags;

#[derive(Parser)]
#[command(name = "hls", version, about = "Hierarchical code encoder for staged vulnerability detection")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a big_vul-style CSV into the JSONL corpus format.
    Convert(Flags),
    /// Class balance and truncation statistics of a corpus.
    Stats(Flags),
    /// Pretrain the encoder with MLM and masked statement prediction.
    Pretrain(Flags),
    /// Train the detection heads (and encoder) on a labelled corpus.
    Finetune(Flags),
    /// Score a split and write metrics, predictions and the Top-k% curve.
    Evaluate(Flags),
    /// Write a line heatmap for one sample.
    Explain(Flags),
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or input data (exit code 2).
    Usage(String),
    /// Failure while running (exit code 1).
    Runtime(String),
}

impl CliError {
    pub fn usage(e: impl fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, flags) = match &cli.command {
        Command::Convert(f) => ("convert", f),
        Command::Stats(f) => ("stats", f),
        Command::Pretrain(f) => ("pretrain", f),
        Command::Finetune(f) => ("finetune", f),
        Command::Evaluate(f) => ("evaluate", f),
        Command::Explain(f) => ("explain", f),
    };
    let cfg = flags.resolve(name)?;
    match cli.command {
        Command::Convert(_) => commands::cmd_convert(&cfg),
        Command::Stats(_) => commands::cmd_stats(&cfg),
        Command::Pretrain(_) => commands::cmd_pretrain(&cfg),
        Command::Finetune(_) => commands::cmd_finetune(&cfg),
        Command::Evaluate(_) => commands::cmd_evaluate(&cfg),
        Command::Explain(_) => commands::cmd_explain(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
