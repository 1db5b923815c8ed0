//! `duple` — few-shot vibration-event recognition across deployments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error
//! (including flag parse errors, which clap also reports with 2).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use duple_cli::commands;
use duple_cli::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "duple", version, about = "Few-shot vibration-event recognition across sensor deployments")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed (parameters, corpus, episodes).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory (written by generate, read by the rest).
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<String>,
    /// Run directory for output documents.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    /// Checkpoint path (written by train, read by eval).
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<String>,
    /// Episode count: training episodes for train/ablate, evaluation
    /// episodes for eval.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Classes per episode.
    #[arg(long, global = true)]
    way: Option<usize>,
    /// Support samples per class.
    #[arg(long, global = true)]
    shot: Option<usize>,
    /// Query samples per class.
    #[arg(long, global = true)]
    query: Option<usize>,
    /// Source (training) domain; repeat the flag for several.
    #[arg(long = "source", global = true, value_name = "DOMAIN")]
    sources: Vec<String>,
    /// Held-out target domain.
    #[arg(long, global = true, value_name = "DOMAIN")]
    target: Option<String>,
    /// Baseline model: protonet | protonet-cosine | protonet-euclidean.
    #[arg(long, global = true)]
    baseline: Option<String>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Evaluation worker threads (results identical for any count).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cross-deployment benchmark corpus.
    Generate,
    /// Export the statistical features of every manifest record.
    Features,
    /// Meta-train a model on the source domains.
    Train,
    /// Evaluate a checkpoint on the held-out target domain.
    Eval {
        /// Replace the model with a stub predictor: perfect | uniform.
        #[arg(long, value_name = "KIND")]
        stub: Option<String>,
    },
    /// Train and evaluate the five-row ablation grid.
    Ablate,
}

fn run(cli: Cli) -> duple::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let stub = match &cli.command {
        Command::Eval { stub } => stub.clone(),
        _ => None,
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        data: cli.data,
        out: cli.out,
        checkpoint: cli.checkpoint,
        episodes: cli.episodes,
        episodes_to_eval: matches!(cli.command, Command::Eval { .. }),
        way: cli.way,
        shot: cli.shot,
        query: cli.query,
        sources: cli.sources,
        target: cli.target,
        baseline: cli.baseline,
        stub,
        lr: cli.lr,
        workers: cli.workers,
    });
    cfg.validate()?;
    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Features => commands::features(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Ablate => commands::ablate(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                duple::Error::Config(_) => 2u8,
                _ => 1u8,
            })
        }
    }
}
