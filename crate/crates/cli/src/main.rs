mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};

use xai_class::rounds::MAX_ROUNDS_LIMIT;

use crate::config::{Overrides, RunConfig};
use crate::exit::{CliResult, Failure};

/// Weakly-supervised text classification with explanation-enhanced
/// pseudo-labels.
#[derive(Debug, Parser)]
#[command(name = "xai-class", version, about)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "xai-class.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides train.lambda.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Enhanced-round budget; a comma-separated list for ablate-rounds.
    #[arg(long, global = true, value_delimiter = ',')]
    rounds: Vec<usize>,
    /// Overrides paths.out_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Label the training corpus with the two oracles.
    PseudoGen,
    /// Train the classifier on the pseudo-labels.
    Train,
    /// Score a checkpoint on the test corpus.
    Eval {
        /// Checkpoint directory; defaults to the training output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also run the post-hoc explainers and write per-token attributions.
        #[arg(long)]
        explain: bool,
    },
    /// Repeat the pipeline for several round budgets and tabulate the metrics.
    AblateRounds,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PseudoGen => "pseudo-gen",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::AblateRounds => "ablate-rounds",
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let ablating = matches!(cli.command, Command::AblateRounds);
    let max_rounds = match cli.rounds.as_slice() {
        [] => None,
        [r] if !ablating => Some(*r),
        _ if ablating => None,
        _ => {
            return Err(Failure::config(anyhow!(
                "--rounds takes a single value for {}",
                cli.command.name()
            )))
        }
    };
    let overrides = Overrides {
        seed: cli.seed,
        lambda: cli.lambda,
        max_rounds,
        out_dir: cli.out_dir.clone(),
    };
    let cfg = RunConfig::load(&cli.config, &overrides).map_err(Failure::config)?;

    match &cli.command {
        Command::PseudoGen => {
            let stats = commands::pseudo_gen(&cfg)?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Train => {
            let out = commands::train_model(&cfg)?;
            for epoch in &out.epochs {
                let dev = epoch
                    .dev_micro_f1
                    .map(|f| format!(" dev_micro_f1 {f:.4}"))
                    .unwrap_or_default();
                println!(
                    "epoch {} l_c {:.4} l_e {:.4} total {:.4}{dev}",
                    epoch.epoch, epoch.l_c, epoch.l_e, epoch.total
                );
            }
            if let Some(path) = &out.checkpoint {
                println!("selected epoch {} -> {}", out.selected_epoch, path.display());
            }
        }
        Command::Eval { checkpoint, explain } => {
            let checkpoint = checkpoint.clone().unwrap_or_else(|| commands::default_checkpoint(&cfg));
            let report = commands::eval(&cfg, &checkpoint, *explain)?;
            print!("{}", report.table());
        }
        Command::AblateRounds => {
            let budgets = if cli.rounds.is_empty() {
                (0..=MAX_ROUNDS_LIMIT).collect()
            } else {
                cli.rounds.clone()
            };
            print!("{}", commands::ablate_rounds(&cfg, &budgets)?);
        }
    }
    commands::write_run_metadata(&cfg, cli.command.name())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code)
        }
    }
}
