use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajscope_core::cvae::ContextMode;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "trajscope", version, about = "Context-aware trajectory anomaly detection")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Context mode: none, poi-categories, poi-contextual, agent-id or combined.
    #[arg(long, global = true)]
    pub mode: Option<ContextMode>,

    /// Scoring threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Working directory for inputs and outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic city, GPS traces and ground-truth labels.
    Simulate,
    /// Turn raw traces into grid-token sequences with a temporal split.
    Preprocess {
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Grid definition JSON; defaults to `<out>/grid.json`, then the config grid.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Embed and cluster POIs and write per-cell count vectors.
    EmbedPoi {
        #[arg(long)]
        pois: Option<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Train one model on the training half.
    Train,
    /// Score the test half with a trained checkpoint.
    Score {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate scores per agent and compute the PR curve.
    Evaluate {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train and evaluate every context mode on one dataset.
    Ablation {
        /// Comma-separated subset of modes; all five by default.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<ContextMode>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&std::env::var("TRAJSCOPE_LOG").unwrap_or_else(|_| "info".into()))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();

    let g = &cli.global;
    let result = match cli.command {
        Command::Simulate => commands::simulate(g),
        Command::Preprocess { trajectories, grid } => commands::preprocess(g, trajectories, grid),
        Command::EmbedPoi { pois, grid } => commands::embed_poi(g, pois, grid),
        Command::Train => commands::train(g),
        Command::Score { checkpoint } => commands::score(g, checkpoint),
        Command::Evaluate { scores, labels } => commands::evaluate(g, scores, labels),
        Command::Ablation { modes } => commands::ablation(g, modes),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
