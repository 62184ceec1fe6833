//! Command-line driver: `index`, `ask`, `eval` and `analyze` over one shared
//! configuration.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{resolve, CommonFlags, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "memloop", version, about = "Iterative memory-reasoning QA over long conversations")]
pub struct Cli {
    #[command(flatten)]
    pub flags: CommonFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest the corpus and build the retrieval index.
    Index,
    /// Answer one question.
    Ask {
        question: String,
        /// Trace file stem.
        #[arg(long, default_value = "ask")]
        query_id: String,
    },
    /// Run a question set and write the report.
    Eval {
        /// JSON file of eval items.
        items: PathBuf,
    },
    /// Chunk-distance profile of false retrievals in a trace directory.
    Analyze {
        #[arg(long)]
        traces: PathBuf,
        /// Eval items carrying gold evidence dia_ids.
        #[arg(long)]
        gold: PathBuf,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration as JSON.
    Config,
}

/// Runs a parsed command and returns what it prints.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let config = RunConfig::from_flags(&cli.flags)?;
    match &cli.command {
        Command::Index => commands::cmd_index(&config),
        Command::Ask { question, query_id } => commands::cmd_ask(&config, question, query_id),
        Command::Eval { items } => commands::cmd_eval(&config, items),
        Command::Analyze { traces, gold, out } => {
            commands::cmd_analyze(&config, traces, gold, out.as_deref()).map(|(text, _)| text)
        }
        Command::Config => Ok(serde_json::to_string_pretty(&config).expect("config serializes") + "\n"),
    }
}
