use std::path::PathBuf;

use anesi_cli::config::{self, Overrides};
use anesi_cli::{commands, CliError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "anesi",
    version,
    about = "Neural approximate inference for weighted model counting"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// Flags shared by train and eval. Every value beats both the config file
/// and the `ANESI_SEED` environment variable.
#[derive(Args, Debug, Default)]
struct CommonOpts {
    /// Task name; only "add" is implemented.
    #[arg(long)]
    task: Option<String>,
    /// Digits per operand.
    #[arg(long)]
    n: Option<usize>,
    /// predict | explain | pruning | no-prior
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config path, or a built-in preset name like desk-n1.
    #[arg(long)]
    config: Option<String>,
    /// Output directory for checkpoint and metrics.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Beam width at evaluation; defaults to k.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// IDX image file; requires --idx-labels.
    #[arg(long)]
    idx_images: Option<PathBuf>,
    /// IDX label file; requires --idx-images.
    #[arg(long)]
    idx_labels: Option<PathBuf>,
}

impl CommonOpts {
    fn overrides(&self) -> Overrides {
        Overrides {
            task: self.task.clone(),
            n: self.n,
            variant: self.variant.clone(),
            seed: self.seed,
            out: self.out.clone(),
            beam: self.beam,
            epochs: self.epochs,
            idx_images: self.idx_images.clone(),
            idx_labels: self.idx_labels.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, writing JSONL metrics and a checkpoint.
    Train {
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Evaluate a checkpoint on a fresh test split.
    Eval {
        /// Checkpoint file written by train.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Median single-input inference time across problem sizes.
    Timing {
        /// Comma-separated list of problem sizes.
        #[arg(long, default_value = "1,2,4,8,15")]
        n_list: String,
        #[arg(long, default_value_t = 25)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the symbolic pruner against brute-force oracles.
    VerifyPruner {
        /// Largest operand width to check (at most 3).
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Randomized cases at n = 3.
        #[arg(long, default_value_t = 100_000)]
        cases: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Benchmark gradient estimators on a two-variable disjunction.
    GradestBench {
        #[arg(long, default_value_t = 4000)]
        fit_iters: usize,
        /// Score-function sample count.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Train { opts } => {
            let cfg = config::resolve(opts.config.as_deref(), &opts.overrides())?;
            let summary = commands::cmd_train(&cfg)?;
            println!("{}", to_json(&summary)?);
        }
        Cmd::Eval { checkpoint, opts } => {
            let cfg = config::resolve(opts.config.as_deref(), &opts.overrides())?;
            let summary = commands::cmd_eval(&cfg, &checkpoint)?;
            println!("{}", to_json(&summary)?);
        }
        Cmd::Timing {
            n_list,
            repeats,
            beam,
            seed,
            out,
        } => {
            let ns = parse_n_list(&n_list)?;
            let seed = config::resolve_seed(seed)?;
            let hidden = anesi::train::TrainConfig::desk().hidden;
            let report = commands::cmd_timing(&ns, repeats, beam, &hidden, seed)?;
            emit(&report, out.as_deref())?;
        }
        Cmd::VerifyPruner { n, cases, seed } => {
            let seed = config::resolve_seed(seed)?;
            let report = commands::cmd_verify_pruner(n, cases, seed)?;
            println!("{}", to_json(&report)?);
        }
        Cmd::GradestBench {
            fit_iters,
            samples,
            seed,
            out,
        } => {
            let seed = config::resolve_seed(seed)?;
            let report = commands::cmd_gradest_bench(fit_iters, samples, seed)?;
            emit(&report, out.as_deref())?;
        }
    }
    Ok(())
}

fn parse_n_list(raw: &str) -> Result<Vec<usize>, CliError> {
    raw.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("bad n-list entry {part:?}")))
        })
        .collect()
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&std::path::Path>) -> Result<(), CliError> {
    let text = to_json(value)?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text.as_bytes())?;
    }
    Ok(())
}
