//! Command-line entry point for the closed-loop trainer.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use a3t::orchestrator::{RunConfig, Runner};
use a3t::trajectory::Split;

#[derive(Parser, Debug)]
#[command(
    name = "a3t",
    about = "Closed-loop trajectory annotation and contrastive self-training for text agents",
    version
)]
struct Cli {
    /// Path to the run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override [run].run_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override [run].workers.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override [run].out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the round-0 prompting bootstrap: gather, build dataset, train,
    /// evaluate, report.
    Bootstrap,
    /// Evaluate the current policy on the training split and explore every
    /// failed task (rounds >= 1).
    Collect {
        #[arg(long)]
        round: u32,
    },
    /// Shape the accumulated store into the round's weighted dataset.
    BuildDataset {
        #[arg(long)]
        round: u32,
    },
    /// Train a fresh policy on the round's dataset.
    Train {
        #[arg(long)]
        round: u32,
    },
    /// Report best-of-`shots` metrics for a split over the last rounds.
    Evaluate {
        #[arg(long)]
        split: String,
        #[arg(long, default_value_t = 1)]
        shots: u32,
    },
    /// Run the full closed loop: bootstrap plus rounds 1..N-1.
    Loop {
        #[arg(long)]
        rounds: u32,
    },
    /// Aggregate all completed round reports into report.md / report.json.
    Report,
}

fn parse_split(name: &str) -> Result<Split, String> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(format!(
            "unknown split {other:?}; expected train, valid, or test"
        )),
    }
}

fn run(cli: Cli) -> Result<(), a3t::A3tError> {
    let Some(config_path) = &cli.config else {
        // Treated as a usage error by the caller.
        return Err(a3t::orchestrator::RunError::Config("--config is required".into()).into());
    };
    let cfg = RunConfig::load(config_path)?.with_overrides(cli.seed, cli.workers, cli.out.clone());
    let runner = Runner::new(cfg)?;
    match cli.command {
        Command::Bootstrap => runner.run_round0()?,
        Command::Collect { round } => {
            if round == 0 {
                return Err(a3t::orchestrator::RunError::Precondition(
                    "round 0 is the bootstrap; use the bootstrap subcommand".into(),
                )
                .into());
            }
            runner.collect_round(round)?;
        }
        Command::BuildDataset { round } => runner.build_dataset(round)?,
        Command::Train { round } => runner.train_round(round)?,
        Command::Evaluate { split, shots } => {
            let split = parse_split(&split).map_err(a3t::orchestrator::RunError::Config)?;
            let metrics = runner.evaluate(split, shots)?;
            println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics"));
        }
        Command::Loop { rounds } => runner.run_loop(rounds)?,
        Command::Report => {
            runner.write_aggregate_reports()?;
            println!("wrote {}", runner.out_dir().join("report.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let missing_config = cli.config.is_none();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if missing_config => {
            eprintln!("usage error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
