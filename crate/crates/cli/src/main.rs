//! `cid`: contrastive input decoding from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 backend error,
//! 3 partial batch failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub const USAGE: u8 = 1;
    pub const BACKEND: u8 = 2;
    pub const PARTIAL: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: Self::USAGE, message: message.into() }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self { code: Self::BACKEND, message: message.into() }
    }

    pub fn partial(message: impl Into<String>) -> Self {
        Self { code: Self::PARTIAL, message: message.into() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cid", version, about = "Contrastive input decoding")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// `table:PATH` or `remote:URL`
    #[arg(long, global = true, value_name = "SPEC")]
    pub backend: Option<String>,
    /// Model id to request from a remote backend
    #[arg(long, global = true, value_name = "ID")]
    pub model: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub top_k: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub max_new_tokens: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Machine-readable output
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (and concurrent remote requests)
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Output file, or directory for commands that write several files
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Key-value config file; flags take precedence over it
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode x against x' and x' against x
    Contrast {
        input: String,
        contrast: String,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Plain greedy decoding
    Greedy { input: String },
    /// Sweep lambda over perturbed pairs and report lambda* per type
    Lambdastar {
        /// JSON-lines file of {"original", "perturbed", "type"}
        pairs: PathBuf,
        #[arg(long, value_delimiter = ',', value_name = "F,F,...")]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        tau: Option<f64>,
        /// Prefix for the reverse continuation: `original` or `own`
        #[arg(long)]
        prefix: Option<String>,
        /// `token_overlap` or `embedding:URL`
        #[arg(long)]
        similarity: Option<String>,
    },
    /// Tally continuations over all name pairs of two groups
    Audit {
        /// Groups JSON file (defaults to the built-in groups)
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long, value_name = "LABEL")]
        group_a: Option<String>,
        #[arg(long, value_name = "LABEL")]
        group_b: Option<String>,
        /// Template with <name> and {male|female} slots
        #[arg(long)]
        template: Option<String>,
        #[arg(long, value_delimiter = ',', value_name = "F,F,...")]
        lambdas: Option<Vec<f64>>,
        /// Labels JSON file; adds the biased-fraction table
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Fold continuations seen fewer times than this into "other"
        #[arg(long, value_name = "N")]
        fold_below: Option<usize>,
    },
    /// Re-render tables from a saved tally CSV
    Render {
        tallies: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        fold_below: Option<usize>,
    },
    /// CSV of the scaling function exp(lambda * v) for v in [-1, 1]
    AlphaCurve {
        #[arg(long, value_delimiter = ',', value_name = "F,F,...")]
        lambdas: Option<Vec<f64>>,
    },
    /// Apply one perturbation to a text
    Perturb {
        text: String,
        #[arg(long = "type", value_name = "TYPE")]
        kind: String,
        /// Perturbation tables JSON (defaults to the built-in tables)
        #[arg(long)]
        tables: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { CliError::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cid: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
