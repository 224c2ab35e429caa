//! `ink`: the pipeline driver.
//!
//! Every run is controlled by one `RunConfig`: defaults, then an optional
//! `--config` file, then repeatable `--set key=value` overrides, then the
//! handful of per-command convenience flags. Commands that write artifacts
//! snapshot the effective config into their output directory before doing
//! any work, so a finished directory always records how it was produced.
//!
//! Exit codes: 0 success, 1 anything the user can fix (bad flags, malformed
//! files, missing inputs), 2 runtime or numeric failures.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ink_core::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "ink", version, about = "Train, adapt, and evaluate a small translation model with a retrieval datastore")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Settings file (key = value lines, # comments) applied over defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// One settings override, e.g. --set train.seed=7; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for batched decoding (1 = fully deterministic)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-domain corpus files
    GenToy(commands::GenToyArgs),
    /// Train the base model on a parallel corpus and save it
    Pretrain(commands::PretrainArgs),
    /// Record (representation, target token) entries from a model and corpus
    BuildDatastore(commands::BuildDatastoreArgs),
    /// Tune adapter layers with retrieval-guided losses
    TrainInk(commands::TrainInkArgs),
    /// Decode source sentences with a trained model
    Translate(commands::TranslateArgs),
    /// Score a model against a reference corpus
    Eval(commands::EvalArgs),
    /// Compare decode throughput with and without retrieval smoothing
    Bench(commands::BenchArgs),
    /// Run the loss/refresh ablation grid
    Ablate(commands::AblateArgs),
}

fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => artifacts::with_path("config file", path, RunConfig::read(path))?,
        None => RunConfig::default(),
    };
    for pair in &global.sets {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(Error::config(format!("--set wants KEY=VALUE, got {pair:?}")));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    if global.threads == 0 {
        return Err(Error::config("--threads must be at least 1"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    let threads = cli.global.threads;
    match cli.command {
        Command::GenToy(args) => commands::gen_toy(&cfg, &args),
        Command::Pretrain(args) => commands::pretrain(&cfg, &args),
        Command::BuildDatastore(args) => commands::build_datastore(&cfg, &args),
        Command::TrainInk(args) => commands::train_ink(&mut cfg, &args),
        Command::Translate(args) => commands::translate(&cfg, &args),
        Command::Eval(args) => commands::eval(&cfg, &args),
        Command::Bench(args) => commands::bench(&cfg, &args, threads),
        Command::Ablate(args) => commands::ablate(&cfg, &args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
