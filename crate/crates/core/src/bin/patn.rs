use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use patn::commands;
use patn::config::RunConfig;
use patn::corpus::Split;

#[derive(Parser)]
#[command(name = "patn", version, about = "Acoustic word embeddings with a phonetically associated triplet network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train an encoder on a corpus directory.
    Train {
        #[command(flatten)]
        common: Common,
        corpus: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: Option<PathBuf>,
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: Split,
    },
    /// Train and evaluate one model per lambda.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        corpus: Option<PathBuf>,
        /// Comma-separated values in [0, 1].
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.3, 0.5, 1.0])]
        lambdas: Vec<f64>,
    },
    /// Export 2-D PCA coordinates of a split's embeddings.
    Project {
        #[command(flatten)]
        common: Common,
        checkpoint: Option<PathBuf>,
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test_ood")]
        split: Split,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn pick(arg: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    arg.or_else(|| fallback.clone())
        .ok_or_else(|| anyhow!("missing {what} path (positional or paths.{what} in the config)"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = load_config(common.config.as_deref())?;
            commands::cmd_gen(&cfg, &common.out)?;
        }
        Command::Train { common, corpus } => {
            let cfg = load_config(common.config.as_deref())?;
            let corpus = pick(corpus, &cfg.paths.corpus, "corpus")?;
            commands::cmd_train(&cfg, &corpus, &common.out)?;
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            split,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let ckpt = pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let corpus = pick(corpus, &cfg.paths.corpus, "corpus")?;
            commands::cmd_eval(&cfg, &ckpt, &corpus, split, &common.out)?;
        }
        Command::SweepLambda {
            common,
            corpus,
            lambdas,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let corpus = pick(corpus, &cfg.paths.corpus, "corpus")?;
            commands::cmd_sweep_lambda(&cfg, &corpus, &lambdas, &common.out)?;
        }
        Command::Project {
            common,
            checkpoint,
            corpus,
            split,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let ckpt = pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let corpus = pick(corpus, &cfg.paths.corpus, "corpus")?;
            let n = commands::cmd_project(&cfg, &ckpt, &corpus, split, &common.out)?;
            println!("projected {n} segments");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
