//! Command-line front end for the prune-and-dissect pipeline.
//!
//! Every subcommand works on the same cached experiment state, so running
//! `dissect` first will transparently generate data and train the baseline,
//! and a later `run` picks up from whatever already exists.

use clap::{Parser, Subcommand};
use prunedissect::orchestrator::{load_config, run_experiment, OrchestratorError, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "prunedissect",
    version,
    about = "Train a small CNN, prune it round by round, and measure how its units' \
             concept alignment holds up"
)]
struct Cli {
    /// Experiment description (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory that receives (or already holds) the experiment's artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Run a single trial with this model-initialization seed, overriding the
    /// config's trial list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Continue an interrupted run: completed stages are verified and
    /// skipped. Required by `run` when the output directory is not empty.
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the config and list every constraint violation.
    Validate,
    /// Generate the concept dataset.
    GenData,
    /// Train the dense baseline (generating data first if needed).
    Train,
    /// Prune through round ROUND, retraining after each round.
    Prune {
        /// Last pruning round to reach; defaults to the config's full count.
        #[arg(long, value_name = "ROUND")]
        round: Option<u32>,
    },
    /// Dissect the network of round ROUND (0 = the dense baseline).
    Dissect {
        #[arg(long, value_name = "ROUND", default_value_t = 0)]
        round: u32,
    },
    /// Aggregate every round into CSV tables and SVG figures.
    Report,
    /// Run the whole pipeline end to end.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn execute(cli: Cli) -> Result<(), OrchestratorError> {
    let config_path = cli.config.ok_or_else(|| OrchestratorError::Invalid(vec![
        "--config: a config file is required".into(),
    ]))?;
    let mut config = load_config(&config_path)?;
    if let Some(seed) = cli.seed {
        config.trials = vec![seed];
    }

    if matches!(cli.command, Command::Validate) {
        println!("ok: {}", config_path.display());
        return Ok(());
    }

    let out = cli.out.ok_or_else(|| {
        OrchestratorError::Invalid(vec!["--out: an output directory is required".into()])
    })?;

    // Partial-pipeline subcommands always build on whatever is already in the
    // output directory; only a full `run` insists on --resume for that.
    let (until, resume) = match &cli.command {
        Command::Validate => unreachable!("handled above"),
        Command::GenData => (Some("gen_data".into()), true),
        Command::Train => (Some("train".into()), true),
        Command::Prune { round } => {
            let r = round.unwrap_or(config.prune.rounds);
            (Some(format!("replay_r{r:02}")), true)
        }
        Command::Dissect { round } => (Some(format!("dissect_r{round:02}")), true),
        Command::Report => (Some("report".into()), true),
        Command::Run => (None, cli.resume),
    };

    let outcome = run_experiment(
        &config,
        &out,
        &RunOptions {
            resume,
            stage_limit: None,
            until,
        },
    )?;
    log::info!(
        "{} stage(s) executed, {} skipped; artifacts under {}",
        outcome.executed,
        outcome.skipped,
        out.display()
    );
    Ok(())
}
