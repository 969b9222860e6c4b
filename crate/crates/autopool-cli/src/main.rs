//! Experiment CLI: dataset generation, training, evaluation, gradient
//! checking, and plot-data export, driven by a TOML config with environment
//! (`AUTOPOOL_*`) and flag overrides.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::CmdResult;

#[derive(Parser)]
#[command(
    name = "autopool",
    version,
    about = "Adaptive pooling for multiple instance learning: experiments on synthetic event-detection data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print its per-class duration summary.
    Generate {
        /// TOML config file (see README for the schema).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; the dataset lands in OUT/dataset/.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// RNG seed (overrides AUTOPOOL_SEED and the config file).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an instance model with the chosen operator.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// max | mean | softmax | auto | cap | rap:<lambda> | strong
        #[arg(long)]
        operator: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory (defaults to OUT/dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: static metrics plus segment-based metrics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        dataset: PathBuf,
        /// Which split to evaluate (default: test).
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        segment_duration: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Where to write report-<split>.{json,csv}; defaults to the
        /// checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional config file supplying [eval] defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
    /// Export tidy plot tables (alpha bars, per-class F1, training curves).
    #[command(name = "export-plots")]
    ExportPlots {
        /// history.csv files from training runs.
        #[arg(long = "history", num_args = 1..)]
        histories: Vec<PathBuf>,
        /// report-<split>.json files from evaluations.
        #[arg(long = "report", num_args = 0..)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate { config, out, seed } => {
            commands::cmd_generate(&config, &out, seed)
        }
        Command::Train {
            config,
            out,
            operator,
            seed,
            dataset,
        } => commands::cmd_train(&config, &out, operator.as_deref(), seed, dataset.as_deref()),
        Command::Evaluate {
            checkpoint,
            dataset,
            split,
            segment_duration,
            threshold,
            out,
            config,
        } => commands::cmd_evaluate(
            &checkpoint,
            &dataset,
            split.as_deref(),
            segment_duration,
            threshold,
            out.as_deref(),
            config.as_deref(),
        ),
        Command::Gradcheck { seed, trials } => commands::cmd_gradcheck(seed, trials),
        Command::ExportPlots {
            histories,
            reports,
            out,
        } => commands::cmd_export_plots(&histories, &reports, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
