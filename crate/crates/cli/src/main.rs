//! `context-gate`: operator surface for the CA-BERT context-necessity
//! classifier. Subcommands cover the full lifecycle — synthesize a corpus,
//! train, evaluate, predict one input, and serve an HTTP inference endpoint.

mod commands;
mod server;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "context-gate", version, about = "Context-necessity gate for multi-turn chat")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    /// Pick by file extension (`.jsonl` -> jsonl, otherwise csv).
    #[default]
    Auto,
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus CSV and print its stats.
    Synth {
        /// Number of records to generate.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Probability that a turn is context-dependent.
        #[arg(long, default_value_t = 0.44)]
        context_rate: f64,
    },
    /// Train on a dataset file: window, split by conversation, build the
    /// vocabulary from the training fold, run the regimen, keep the best
    /// checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: FormatArg,
        /// Training config file (flat key=value); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path. The vocabulary lands at `<out>.vocab` and
        /// the history record at `<out>.history.json`.
        #[arg(long)]
        out: PathBuf,
        /// Prior turns per example.
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 8192)]
        vocab_size: usize,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = 2)]
        n_layers: usize,
        #[arg(long, default_value_t = 256)]
        d_ff: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 0.1)]
        dropout: f64,
    },
    /// Evaluate a checkpoint over a whole dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: FormatArg,
        #[arg(long, default_value_t = 0)]
        k: usize,
        /// Emit the machine-readable report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Classify one input: the turns of the current window, oldest first.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Emit the same JSON the service returns.
        #[arg(long)]
        json: bool,
        #[arg(required = true)]
        turns: Vec<String>,
    },
    /// Serve POST /classify and GET /healthz over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("CONTEXT_GATE_LOG", "error"),
    )
    .init();
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
