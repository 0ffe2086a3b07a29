//! The `raf` command-line tool: argument parsing, settings resolution and
//! the subcommand implementations, plus the multi-condition toy experiment
//! suite.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod suite;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "raf",
    version,
    about = "Retrieval-augmented expression features: banks, retrieval, coverage and toy experiments"
)]
pub struct Cli {
    /// JSON file of settings; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest CSV or JSONL feature records into a binary bank.
    BuildBank(commands::BuildBankArgs),
    /// Nearest-neighbor lookup of query features in a bank.
    Query(commands::QueryArgs),
    /// MMD, KL and B2T of vanilla and retrieval-mixed training sets.
    Coverage(commands::CoverageArgs),
    /// One epoch's conditioning plan as JSON lines.
    Plan(commands::PlanArgs),
    /// Generate a synthetic world: subject train/heldout codes and a bank.
    ToyGen(commands::ToyGenArgs),
    /// Train the toy deformation model and evaluate it on heldout frames.
    ToyTrain(commands::ToyTrainArgs),
    /// Re-evaluate a saved toy model.
    ToyEval(commands::ToyEvalArgs),
    /// 2-D PCA scatter of a bank with query neighborhoods marked.
    PcaExport(commands::PcaExportArgs),
    /// Every augmentation condition over several seeds, summarized as CSV.
    Suite(commands::SuiteArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Top1,
    Top5,
}

impl Mode {
    pub fn substitute_mode(self) -> raf_core::retrieval::SubstituteMode {
        match self {
            Mode::Top1 => raf_core::retrieval::SubstituteMode::Top1,
            Mode::Top5 => raf_core::retrieval::SubstituteMode::TopKUniform(5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    #[default]
    Vanilla,
    Noise,
    Raf,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code. Errors are reported on stderr as
/// `raf: error[<category>]: <message>`.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = match e.kind() {
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => "missing subcommand; see `raf --help`",
                _ => msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "),
            };
            eprintln!("raf: {}", CliError::usage(first));
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("raf: {e}");
            e.category.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref().map(config::load_config_file).transpose()?;
    let file = file.as_ref();
    match &cli.command {
        Command::BuildBank(a) => commands::build_bank(a, file),
        Command::Query(a) => commands::query(a, file),
        Command::Coverage(a) => commands::coverage(a, file),
        Command::Plan(a) => commands::plan(a, file),
        Command::ToyGen(a) => commands::toy_gen(a, file),
        Command::ToyTrain(a) => commands::toy_train(a, file),
        Command::ToyEval(a) => commands::toy_eval(a, file),
        Command::PcaExport(a) => commands::pca_export(a, file),
        Command::Suite(a) => commands::suite(a, file),
    }
}
