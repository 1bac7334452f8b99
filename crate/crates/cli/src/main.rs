//! `hatnet` command-line front end.
//!
//! Every command writes only below `--out`. Failures print a JSON object
//! `{"error": {"kind": .., "message": ..}}` to stderr and exit nonzero.

mod attn;
mod bench;
mod commands;
mod failure;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "hatnet", version, about = "Hierarchical attention classifier for tiled images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides `paths.data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `paths.out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the train split, select with the val split, write checkpoints and logs.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Classification metrics and attention overlap for one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Top-k bags or words and coefficient heatmaps for one input.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG image, or an HTNT tensor of word pixels or word features.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        top_k: f64,
        #[arg(long, default_value = "bag")]
        level: String,
    },
    /// Generate a planted-motif synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Forward-pass latency over repeated trials.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Benchmark this checkpoint instead of a freshly initialised model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, Failure> {
    match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Eval { common, checkpoint, split } => commands::eval(&common, &checkpoint, &split),
        Command::Attn {
            common,
            checkpoint,
            input,
            top_k,
            level,
        } => attn::attn(&common, &checkpoint, &input, top_k, &level),
        Command::Synth { common } => commands::synth(&common),
        Command::Bench { common, checkpoint, trials } => bench::bench(&common, checkpoint.as_deref(), trials),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            Failure::new("usage", e.to_string().trim()).print();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary is valid JSON");
            // a closed stdout is not a failure of the command itself
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            f.print();
            ExitCode::FAILURE
        }
    }
}
