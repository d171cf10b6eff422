//! `endotrack`: dataset generation, supervised and reinforcement
//! fine-tuning, evaluation and rollout inspection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "endotrack", version, about = "Vision-to-action tracking workbench for a two-motor continuum endoscope")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub(crate) enum Command {
    /// Roll the oracle over a seeded scene pool and write labeled datasets.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning on a generated dataset.
    Sft {
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a dataset produced under a different configuration.
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Group-relative reinforcement fine-tuning from a supervised checkpoint.
    Grpo {
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Outer iterations (overrides `grpo_steps`).
        #[arg(long)]
        steps: Option<u64>,
        /// Permit starting from an untrained checkpoint.
        #[arg(long)]
        allow_cold_start: bool,
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Closed-loop evaluation of the oracle or a checkpoint.
    Eval {
        /// `oracle`, `random`, `stop` or a checkpoint path.
        #[arg(long)]
        controller: String,
        /// pp, ar, cc, seq-chars, seq-fruit, hole, or all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Output directory for report.json and report.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Step-by-step traces for scenes from a scene file.
    Rollout {
        #[arg(long)]
        controller: String,
        /// Scene file (JSON, as written by `gen-data`).
        #[arg(long)]
        scenes: PathBuf,
        /// Only roll out this scene id.
        #[arg(long)]
        scene_id: Option<u64>,
        /// Step budget (defaults to the task's evaluation budget).
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write every observed frame as PGM.
        #[arg(long)]
        dump_frames: bool,
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

/// Errors caused by invalid invocations or configurations (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ENDOTRACK_LOG", "info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };

    if let Some(n) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: configuring worker pool: {e}");
            return ExitCode::from(2);
        }
    }

    match commands::run(&cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
