//! `wnet` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Failures print one JSON object to stderr:
//! `{"error":{"kind":"usage","message":"..."}}`.

mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] wnet::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) | CliError::Core(wnet::Error::Config(_)) => "usage",
            CliError::Core(_) => "runtime",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            "usage" => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "wnet", version, about = "Multi-task optic disc and exudate segmentation")]
struct Cli {
    /// Log filter, e.g. `warn`, `info`, `wnet=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic fundus-like dataset with exact masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
    /// Resize and enhance a dataset to the network resolution.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a model on a whole dataset, one fold, or every fold.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Hold out this fold and keep the best held-out checkpoint.
        #[arg(long, conflicts_with = "cv")]
        fold: Option<usize>,
        /// Run k-fold cross-validation.
        #[arg(long)]
        cv: bool,
        /// Comma-separated subset of folds for `--cv`.
        #[arg(long, value_delimiter = ',', requires = "cv")]
        folds: Option<Vec<usize>>,
    },
    /// Evaluate a checkpoint or a set of prediction masks against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Ground-truth manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Manifest whose mask columns hold predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Restrict to the held-out records of this fold.
        #[arg(long)]
        fold: Option<usize>,
        /// Skip the PNG overlays.
        #[arg(long)]
        no_overlays: bool,
    },
    /// Write predicted masks and probability maps.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cross-validated F1 for each loss equilibrium value.
    SweepOmega {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated omega values; 0, 0.1, ..., 1 when omitted.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Comma-separated subset of folds.
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Summarise evaluation, sweep and trace outputs as Markdown.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn fail(err: &CliError) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": err.kind(), "message": err.to_string() } });
    eprintln!("{body}");
    ExitCode::from(err.exit_code())
}

fn run(cli: Cli) -> CliResult<()> {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
            name,
        } => commands::synth(&out, count, size, seed, &name, &argv),
        Command::Preprocess { common, manifest } => commands::preprocess(&common, &manifest, &argv),
        Command::Train {
            common,
            manifest,
            fold,
            cv,
            folds,
        } => commands::train(&common, &manifest, fold, cv, folds.as_deref(), &argv),
        Command::Eval {
            common,
            manifest,
            checkpoint,
            predictions,
            fold,
            no_overlays,
        } => commands::eval(
            &common,
            &manifest,
            checkpoint.as_deref(),
            predictions.as_deref(),
            fold,
            !no_overlays,
            &argv,
        ),
        Command::Predict {
            common,
            manifest,
            checkpoint,
        } => commands::predict(&common, &manifest, &checkpoint, &argv),
        Command::SweepOmega {
            common,
            manifest,
            grid,
            folds,
        } => commands::sweep(&common, &manifest, grid, folds.as_deref(), &argv),
        Command::Report { out, eval, sweep, trace } => {
            commands::report(&out, eval.as_deref(), sweep.as_deref(), trace.as_deref(), &argv)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.render().to_string().trim().to_string())),
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
