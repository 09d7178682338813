//! `layoutprior`: build corpora, train, sample, decode, evaluate and render.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::PromptSource;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "layoutprior",
    version,
    about = "Scene-layout priors from serialized annotations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert annotation files into a sequence corpus, vocabulary and manifest.
    Ingest(Common),
    /// Train (or resume) the model on the corpus.
    Train(Common),
    /// Sample sequences with their sidecar metadata.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Single prompt, sampled `sample.count` times.
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        /// One prompt per line.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
    },
    /// Parse a sequence file into a layout file.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Sequence file; defaults to the run's samples.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate the trained model against ground-truth layouts.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Layout file; defaults to the ingested records.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Render a layout file to SVG, one file per record.
    Render {
        #[command(flatten)]
        common: Common,
        /// Layout file; defaults to the decoded layouts.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Ingest(c) => commands::ingest(&load(&c)?),
        Command::Train(c) => commands::train(&load(&c)?),
        Command::Sample {
            common,
            prompt,
            prompt_file,
        } => {
            let source = match (prompt, prompt_file) {
                (Some(p), _) => PromptSource::Single(p),
                (None, Some(f)) => PromptSource::File(f),
                (None, None) => PromptSource::Generator,
            };
            commands::sample_cmd(&load(&common)?, source)
        }
        Command::Decode { common, input } => commands::decode_cmd(&load(&common)?, input),
        Command::Eval {
            common,
            ground_truth,
        } => commands::eval_cmd(&load(&common)?, ground_truth),
        Command::Render { common, input } => commands::render_cmd(&load(&common)?, input),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
