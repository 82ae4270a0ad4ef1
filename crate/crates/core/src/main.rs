use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dga::cli::{dispatch, error_line, parse_config, thread_cap, Command, THREADS_ENV};

/// Informed domain-adaptive pre-training on a toy transformer.
#[derive(Debug, Parser)]
#[command(name = "dga", version)]
struct Cli {
    /// TOML configuration file; omitted keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set datrain.tau=0.1`; may be repeated.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the general and domain corpora with their vocabulary.
    GenCorpus,
    /// Pre-train the encoder with MLM on the general corpus.
    Pretrain,
    /// Estimate and normalize head importance on the domain corpus.
    Importance,
    /// Domain-adaptive training of the pre-trained model.
    DaTrain,
    /// Fine-tune classifiers on the domain and general end tasks.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Held-out perplexity on both corpora.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every ablation variant over every seed and write the report.
    Ablate,
    /// Finite-difference check of every parameter and gate gradient.
    GradCheck,
    /// Rebuild report files from an ablation directory.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenCorpus => Command::GenCorpus,
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Importance => Command::Importance,
            Cmd::DaTrain => Command::DaTrain,
            Cmd::Finetune { checkpoint } => Command::Finetune { checkpoint },
            Cmd::Eval { checkpoint } => Command::Eval { checkpoint },
            Cmd::Ablate => Command::Ablate,
            Cmd::GradCheck => Command::GradCheck,
            Cmd::Report { dir } => Command::Report { dir },
        }
    }
}

fn run(cli: Cli) -> dga::Result<()> {
    thread_cap(std::env::var(THREADS_ENV).ok().as_deref())?;
    let cfg = parse_config(cli.config.as_deref(), &cli.overrides)?;
    dispatch(&cli.command.into(), &cfg, &mut io::stdout().lock())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
