//! `mixrag` command-line driver.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::settings::Settings;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_DEGRADED: u8 = 3;

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<mixrag::error::Error> for Failure {
    fn from(e: mixrag::error::Error) -> Self {
        let code = if e.is_data_error() { EXIT_DATA } else { EXIT_USAGE };
        Self { code, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mixrag", version, about = "Mixture-of-experts retrieval over textual graphs")]
pub struct Cli {
    /// Key-value settings file (`key = value` per line).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling, sampling and corpus generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Top-k for every expert [default: 20].
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Encoder layers [default: 3].
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an edge-list TSV export to graph JSON.
    Convert {
        input: PathBuf,
        output: PathBuf,
    },
    /// Hash-embed a graph into `<name>.{nodes,relations,triples}.emb`.
    Embed {
        graph: PathBuf,
        /// Output directory [default: the graph's directory].
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Generate a planted synthetic corpus.
    Synth {
        /// Output directory; receives `graphs/`, `train.jsonl`, `eval.jsonl`.
        out: PathBuf,
        #[arg(long)]
        num_graphs: Option<usize>,
        #[arg(long)]
        nodes_per_graph: Option<usize>,
        #[arg(long)]
        one_hop_fraction: Option<f64>,
        #[arg(long)]
        train_queries: Option<usize>,
        #[arg(long)]
        eval_queries: Option<usize>,
    },
    /// Train on a JSONL corpus and write a checkpoint.
    Train {
        #[command(flatten)]
        data: GraphArgs,
        /// Training corpus (JSON lines of TrainExample).
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Evaluate a checkpoint end to end.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Train a fresh model per depth (comma-separated) and report
        /// accuracy for each; needs `--corpus`.
        #[arg(long, value_delimiter = ',')]
        sweep_layers: Option<Vec<usize>>,
        /// Training corpus for `--sweep-layers`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Evaluate every non-empty expert subset.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare analytic and numeric gradients on one training example.
    Gradcheck {
        #[command(flatten)]
        data: GraphArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to check [default: a fresh model].
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// `surrogate`, `soft-prompt-norm` or `combined`.
        #[arg(long, default_value = "combined")]
        objective: String,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Directory of `<name>.json` graphs (with optional `.emb` files).
    #[arg(long)]
    graphs: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    data: GraphArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Evaluation dataset (JSON lines of EvalExample).
    #[arg(long)]
    dataset: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Active experts, e.g. `E+R` or `all`.
    #[arg(long)]
    experts: Option<String>,
    /// `mock` or `http`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
    /// `accuracy` or `hit@1`.
    #[arg(long)]
    metric: Option<String>,
}

fn settings(cli: &Cli) -> Result<Settings, Failure> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    if let Some(seed) = cli.seed {
        s.set("seed", seed);
    }
    if let Some(k) = cli.k {
        for key in ["k", "k_entity", "k_relation", "k_subgraph"] {
            s.set(key, k);
        }
    }
    if let Some(l) = cli.layers {
        s.set("layers", l);
    }
    Ok(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = settings(&cli).and_then(|s| commands::run(cli.command, s));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
