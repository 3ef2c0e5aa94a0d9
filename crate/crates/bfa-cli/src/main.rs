//! `bfa` — train small quantized networks, run bit-flip attacks, and
//! aggregate the evaluation reports.
//!
//! Exit codes: 0 success, 2 config error, 3 data/artifact error, 4 run
//! failure. `bfa attack` additionally reports how it stopped: 0 the lowest
//! goal was reached, 10 the flip budget ran out, 11 the search stalled.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bfa_cli::commands::{self, AttackOutcome};
use bfa_cli::config::{experiment_plan, AttackOverrides, MaskSpec, RawConfig};
use bfa_cli::experiment::run_experiment;
use bfa_core::attack::{Heuristic, Termination};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bfa", version, about = "Bit-flip attack workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the MNIST IDX files (overrides [data] dir).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Output directory for checkpoint.bfck and train.csv.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the bit-flip attack against a checkpoint.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional config file with [attack] (and [data]) sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "runs/attack")]
        out: PathBuf,
        /// Attack seed (attack-set sampling and eval subsample).
        #[arg(long)]
        seed: Option<u64>,
        /// Maximum number of permanent bit flips.
        #[arg(long)]
        budget: Option<usize>,
        /// Comma-separated accuracy goals in (0,1), e.g. 0.5,0.25,0.11.
        #[arg(long, value_delimiter = ',')]
        goals: Option<Vec<f64>>,
        /// Attackable layers: "all", or names/ordinals like conv1,dense4.
        #[arg(long)]
        mask: Option<String>,
        /// Bit ranking heuristic: gradient or taylor.
        #[arg(long)]
        heuristic: Option<String>,
        /// Test-subsample size for goal checks (0 = full test set).
        #[arg(long)]
        eval_subsample: Option<usize>,
    },
    /// Run a full seeds x attacks experiment plan.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Overrides the plan's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare goal statistics across two or more experiment directories.
    Compare {
        dirs: Vec<PathBuf>,
    },
    /// Per-layer |grad| distribution of a checkpoint on an attack set.
    GradStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        attack_set_size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer histogram of dequantized weights.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUN: u8 = 4;
const EXIT_BUDGET_EXHAUSTED: u8 = 10;
const EXIT_STALLED: u8 = 11;

/// Sorts an error into the exit-code taxonomy.
fn classify(err: &anyhow::Error) -> u8 {
    use bfa_core::Error as E;
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::BadMagic { .. } | E::Integrity(_) | E::VersionMismatch { .. } | E::Malformed(_) | E::Io(_) => EXIT_DATA,
                E::InvalidArgument(_) | E::ShapeMismatch(_) | E::AddressOutOfRange(_) => EXIT_CONFIG,
                E::TrainingDiverged { .. } | E::AttackStalled | E::NonFinite(_) => EXIT_RUN,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_CONFIG
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, data_dir, out, seed } => {
            commands::cmd_train(&config, data_dir.as_ref(), &out, seed)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack {
            checkpoint,
            config,
            data_dir,
            out,
            seed,
            budget,
            goals,
            mask,
            heuristic,
            eval_subsample,
        } => {
            let overrides = AttackOverrides {
                seed,
                budget,
                goals,
                mask: mask.map(|m| m.parse::<MaskSpec>().expect("infallible")),
                heuristic: heuristic.as_deref().map(str::parse::<Heuristic>).transpose()?,
                eval_subsample,
            };
            let AttackOutcome { termination, .. } =
                commands::cmd_attack(&checkpoint, config.as_ref(), data_dir.as_ref(), &out, &overrides)?;
            Ok(match termination {
                Termination::GoalReached => ExitCode::SUCCESS,
                Termination::BudgetExhausted => ExitCode::from(EXIT_BUDGET_EXHAUSTED),
                Termination::Stalled => ExitCode::from(EXIT_STALLED),
            })
        }
        Command::Experiment { plan, data_dir, out, jobs } => {
            let raw = RawConfig::load(&plan)?;
            let plan = experiment_plan(&raw, data_dir.as_ref(), out.as_ref())?;
            let outcome = run_experiment(&plan, jobs, &|msg| eprintln!("{msg}"))?;
            eprintln!(
                "experiment complete: {} traces, {} failures; reports in {}",
                outcome.traces,
                outcome.failures.len(),
                plan.out.join("reports").display()
            );
            println!("{}", plan.out.display());
            if outcome.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(EXIT_RUN))
            }
        }
        Command::Compare { dirs } => {
            let table = commands::cmd_compare(&dirs)?;
            print!("{table}");
            Ok(ExitCode::SUCCESS)
        }
        Command::GradStats { checkpoint, config, data_dir, attack_set_size, seed, out } => {
            commands::cmd_grad_stats(&checkpoint, config.as_ref(), data_dir.as_ref(), attack_set_size, seed, out.as_ref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Hist { checkpoint, bins, out } => {
            commands::cmd_hist(&checkpoint, bins, out.as_ref())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
