//! Command-line front end for the distillation pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod workspace;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use distill_core::corpus::SftSubtask;
use distill_core::filtering::FilterStrategy;
use distill_core::prompts::PromptKind;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "distill", version, about = "Distill, filter and evaluate structured-reasoning data")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "distill.json")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Induce task prompts for question parsing and unified reasoning.
    Induce {
        /// QP or UCoT; both when omitted.
        #[arg(long, value_parser = parse_prompt_kind)]
        subtask: Option<PromptKind>,
    },
    /// Annotate the question pool with retrieved demonstrations.
    Synthesize {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Structural and reward filtering.
    Filter {
        /// structure, zero, few or average.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<FilterStrategy>,
    },
    /// Write SFT training files from a filtered set.
    Export {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<FilterStrategy>,
        /// QP, CP or CV; all three when omitted.
        #[arg(long, value_parser = parse_subtask)]
        subtask: Option<SftSubtask>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the agent cascade over the test questions.
    Infer {
        #[arg(long)]
        k: Option<usize>,
        /// Prediction file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against the test annotations.
    Eval {
        /// Prediction file; defaults to the one `infer` writes.
        predictions: Option<PathBuf>,
        /// Report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trace and row counts of a dataset file.
    Stats {
        /// Dataset file; defaults to the filtered set for `--strategy`.
        file: Option<PathBuf>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<FilterStrategy>,
    },
}

fn parse_strategy(s: &str) -> Result<FilterStrategy, String> {
    s.parse()
}

fn parse_subtask(s: &str) -> Result<SftSubtask, String> {
    s.parse()
}

fn parse_prompt_kind(s: &str) -> Result<PromptKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "qp" => Ok(PromptKind::Qp),
        "ucot" => Ok(PromptKind::UCot),
        _ => Err(format!("unknown subtask {s:?} (expected QP or UCoT)")),
    }
}

/// What a successful command prints.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub summary: serde_json::Value,
    /// Human-readable text printed before the summary.
    pub text: Option<String>,
}

pub fn run(cli: Cli) -> Result<Output, CliError> {
    let (config, hash) = RunConfig::load(&cli.config)?;
    let ws = Workspace::open(config, hash)?;
    let plain = |summary| Ok(Output { summary, text: None });
    match cli.command {
        Command::Induce { subtask } => plain(commands::induce(&ws, subtask)?),
        Command::Synthesize { k } => plain(commands::synthesize(&ws, k)?),
        Command::Filter { strategy } => plain(commands::filter(&ws, strategy)?),
        Command::Export { strategy, subtask, out } => plain(commands::export(&ws, strategy, subtask, out)?),
        Command::Infer { k, out } => plain(commands::infer(&ws, k, out)?),
        Command::Eval { predictions, out } => {
            let (summary, table) = commands::eval(&ws, predictions, out)?;
            Ok(Output { summary, text: Some(table) })
        }
        Command::Stats { file, strategy } => plain(commands::stats(&ws, strategy, file)?),
    }
}
