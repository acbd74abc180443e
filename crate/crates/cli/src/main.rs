use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use safeshed_cli::{commands, exit, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "safeshed", version, about = "Safe augmented random search for emergency load shedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rollout worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override, e.g. `--set reward.c4=0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with ARS.
    Train {
        #[command(flatten)]
        common: Common,
        /// Drop the barrier term (c4 = 0): the standard ARS objective.
        #[arg(long)]
        standard: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Greedy evaluation of a checkpoint with per-task trajectory CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `all`, `train`, `held-out`, or `bus=B,dur=D[;...]`.
        #[arg(long, default_value = "all")]
        tasks: String,
    },
    /// Uncontrolled (zero-action) response.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "bus=4,dur=0.15")]
        tasks: String,
    },
    /// Side-by-side evaluation of a safe and a standard checkpoint.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        safe: PathBuf,
        #[arg(long)]
        standard: PathBuf,
        #[arg(long, default_value = "all")]
        tasks: String,
    },
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &common.sets)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, standard, quiet } => {
            let (mut cfg, out) = resolve(&common)?;
            if standard {
                cfg.reward.c4 = 0.0;
            }
            let s = commands::train(&cfg, &out, quiet)?;
            let last = s.outcome.history.records.last();
            println!(
                "trained {} iterations; final greedy return {}; checkpoints in {}",
                s.outcome.iterations_completed,
                last.map_or("n/a".into(), |r| format!("{:.3} ({} violation steps)", r.greedy_return, r.violations)),
                out.join("checkpoints").display()
            );
        }
        Command::Eval { common, checkpoint, tasks } => {
            let (cfg, out) = resolve(&common)?;
            print!("{}", commands::eval(&cfg, &checkpoint, &tasks, &out)?.to_table());
        }
        Command::Baseline { common, tasks } => {
            let (cfg, out) = resolve(&common)?;
            print!("{}", commands::baseline(&cfg, &tasks, &out)?.to_table());
        }
        Command::Compare { common, safe, standard, tasks } => {
            let (cfg, out) = resolve(&common)?;
            print!("{}", commands::compare(&cfg, &safe, &standard, &tasks, &out)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
