//! Command-line harness: demo generation, training with ablations,
//! checkpoint evaluation, self-check diagnostics, and report rendering.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 validation
//! error (bad flags, bad config, unknown names), 2 runtime failure
//! (training/evaluation errors, corrupt artifacts, failed diagnostics).

mod config;
mod ops;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "guilearn",
    version,
    about = "GUI agent workbench: generate demonstrations, train, evaluate, diagnose",
    after_help = "Exit codes: 0 success, 1 validation error, 2 runtime failure.\n\
                  GUILEARN_RUN_DIR overrides the output directory of any command."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that resolve a full run configuration.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// TOML run-configuration file (see `config.rs` header for the schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter preset: desk | paper.
    #[arg(long)]
    preset: Option<String>,
    /// Master run seed; every phase derives its own stream from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (GUILEARN_RUN_DIR takes precedence).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training-field override, e.g. --set lr=0.001 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert demonstration dataset with the search oracle.
    GenDemos {
        /// Directory of app-spec JSON files (defaults to the built-in suite).
        #[arg(long, requires = "tasks")]
        apps: Option<PathBuf>,
        /// Directory of task JSON files (defaults to the built-in suite).
        #[arg(long, requires = "apps")]
        tasks: Option<PathBuf>,
        /// Restrict generation to these task ids (comma-separated). With the
        /// built-in suite the default is its demonstration subset.
        #[arg(long, value_delimiter = ',')]
        task_ids: Option<Vec<String>>,
        /// Demonstrations per task.
        #[arg(long)]
        per_task: usize,
        /// Master seed for replay jitter.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Search depth bound for the planning oracle.
        #[arg(long, default_value_t = 8)]
        depth_bound: usize,
        /// Output dataset file (a .obs observation archive sits beside it).
        #[arg(long)]
        out: PathBuf,
        /// Policy preset used to validate that actions are encodable.
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Run the hybrid trainer: cloning, collection, value fitting, extraction.
    Train {
        #[command(flatten)]
        config: ConfigFlags,
        /// Expert dataset file (required unless --ablation no-bc).
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Phase ablation: none | no-rl | no-bc.
        #[arg(long, default_value = "none")]
        ablation: String,
    },
    /// Evaluate a checkpoint (or the planning oracle) on a suite partition.
    Eval {
        #[command(flatten)]
        config: ConfigFlags,
        /// Checkpoint file, or the literal `oracle` for the planning oracle.
        #[arg(long)]
        checkpoint: String,
        /// Which partition to evaluate: train | heldout.
        #[arg(long, default_value = "train")]
        partition: String,
        /// Evaluation episode seeds, comma-separated.
        #[arg(long, default_value = "0", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Model name used in reports (defaults to the checkpoint stem).
        #[arg(long)]
        model: Option<String>,
        /// Search depth bound for optimal lengths.
        #[arg(long, default_value_t = 8)]
        depth_bound: usize,
        /// Metrics JSON output path (defaults inside the run directory).
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Verify every reverse-mode primitive against central differences.
    GradCheck {
        /// Run only these named checks, comma-separated. An empty value
        /// selects nothing and succeeds as a no-op.
        #[arg(long)]
        only: Option<String>,
    },
    /// Verify the planning/value oracles against closed forms.
    OracleCheck,
    /// Render metric tables from one or more evaluation JSON files.
    Report {
        /// Evaluation JSON files produced by `eval`.
        #[arg(long, required = true, value_delimiter = ',')]
        inputs: Vec<PathBuf>,
        /// Optional path for the rendered text (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenDemos {
            apps,
            tasks,
            task_ids,
            per_task,
            seed,
            depth_bound,
            out,
            preset,
        } => ops::gen_demos(
            apps.as_deref(),
            tasks.as_deref(),
            task_ids,
            per_task,
            seed,
            depth_bound,
            &out,
            &preset,
        ),
        Command::Train {
            config,
            demos,
            ablation,
        } => ops::train(&config, demos, &ablation),
        Command::Eval {
            config,
            checkpoint,
            partition,
            seeds,
            model,
            depth_bound,
            report_out,
        } => ops::eval(
            &config,
            &checkpoint,
            &partition,
            &seeds,
            model,
            depth_bound,
            report_out,
        ),
        Command::GradCheck { only } => ops::grad_check(only.as_deref()),
        Command::OracleCheck => ops::oracle_check(),
        Command::Report { inputs, out } => ops::report(&inputs, out.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
