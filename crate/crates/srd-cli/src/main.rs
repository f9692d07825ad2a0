//! `srd` — batch command line over the distillation toolkit.
//!
//! Five commands: `gen` writes a synthetic corpus, `reflect` scores one with
//! a student checkpoint, `train` runs a full distillation (or baseline) and
//! writes its artifacts, `eval` scores a checkpoint on a dataset, and
//! `sweep` runs a one-axis grid and emits a CSV of final metrics.
//!
//! Exit codes: 0 on success; 2 for usage and configuration errors (bad
//! flags, malformed or contradictory config files, unreadable inputs);
//! 1 for runtime failures (output writes, training-engine errors). Every
//! command is deterministic given its flags and config file: reruns produce
//! byte-identical artifacts, except for measured wall-clock numbers, which
//! are confined to the `timing` object of `train`'s summary.
//!
//! The worker-thread count follows the `SRD_THREADS` environment variable
//! (default: all logical processors).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Command outcome carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// The invocation itself is wrong: flags, config keys, missing or
    /// unreadable inputs. Exit code 2.
    Usage(String),
    /// The work failed underway: unwritable outputs, engine errors.
    /// Exit code 1.
    Runtime(String),
}

impl CliError {
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Shorthand for mapping an error into the usage exit path.
pub fn usage(err: impl std::fmt::Display) -> CliError {
    CliError::Usage(err.to_string())
}

/// Shorthand for mapping an error into the runtime exit path.
pub fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

#[derive(Parser)]
#[command(
    name = "srd",
    version,
    about = "Student-informed data curation and curriculum-scheduled distillation, batch style"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic prompt/response corpus as JSONL.
    Gen {
        /// Task family: copy | reverse | pattern.
        #[arg(long)]
        template: String,
        /// Number of records.
        #[arg(long)]
        count: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Distinct payload letters (1..=26).
        #[arg(long, default_value_t = 8)]
        alphabet: usize,
        /// Difficulty grades; level L draws an L-letter payload.
        #[arg(long, default_value_t = 6)]
        levels: usize,
        /// Fraction of records with randomized (mislabeled) responses.
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset with a student checkpoint and write the report.
    Reflect {
        /// Dataset JSONL path.
        #[arg(long)]
        data: PathBuf,
        /// Student checkpoint JSON path.
        #[arg(long)]
        student: PathBuf,
        /// key=value config file (curation keys apply).
        #[arg(long)]
        config: PathBuf,
        /// Output report path (JSONL, one row per pair).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a distillation or baseline and write its artifacts.
    Train {
        /// key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Run mode, overriding the config's `mode` key:
        /// srd | baseline_offpolicy | baseline_onpolicy | srd_onpolicy.
        #[arg(long)]
        mode: Option<String>,
        /// Directory for checkpoints, logs, and the summary.
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a dataset and print metrics JSON.
    Eval {
        /// Checkpoint JSON path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSONL path.
        #[arg(long)]
        data: PathBuf,
        /// Tokenizer length cap for the dataset.
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        /// Greedy-decode cap for the ROUGE side of the metrics.
        #[arg(long, default_value_t = 16)]
        decode_max_len: usize,
    },
    /// Run a one-axis grid of training runs and write a CSV of results.
    Sweep {
        /// key=value config file (the grid's base configuration).
        #[arg(long)]
        config: PathBuf,
        /// Run mode, overriding the config's `mode` key.
        #[arg(long)]
        mode: Option<String>,
        /// Swept knob: lambda | n_stages | tau_n | alpha0.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values, e.g. 0.5,0.65,0.8.
        #[arg(long)]
        values: String,
        /// Comma-separated run seeds, e.g. 0,1,2.
        #[arg(long)]
        seeds: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_thread_pool() -> Result<(), CliError> {
    match std::env::var("SRD_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw
                .parse()
                .map_err(|_| usage(format!("SRD_THREADS must be a positive integer, got \"{raw}\"")))?;
            if n == 0 {
                return Err(usage("SRD_THREADS must be a positive integer, got \"0\""));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(runtime)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen {
            template,
            count,
            seed,
            alphabet,
            levels,
            label_noise,
            out,
        } => commands::gen(&template, count, seed, alphabet, levels, label_noise, &out),
        Command::Reflect {
            data,
            student,
            config,
            out,
        } => commands::reflect(&data, &student, &config, &out),
        Command::Train {
            config,
            mode,
            out_dir,
        } => commands::train(&config, mode.as_deref(), &out_dir),
        Command::Eval {
            checkpoint,
            data,
            max_len,
            decode_max_len,
        } => commands::eval(&checkpoint, &data, max_len, decode_max_len),
        Command::Sweep {
            config,
            mode,
            axis,
            values,
            seeds,
            out,
        } => commands::sweep(&config, mode.as_deref(), &axis, &values, &seeds, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(err) = init_thread_pool() {
        eprintln!("error: {}", err.message());
        return ExitCode::from(err.exit_code());
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
