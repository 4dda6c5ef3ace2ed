//! `xpln` binary: dataset synthesis, training, evaluation, explanation.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 numeric failure,
//! 4 file-format or I/O failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{cmd_eval, cmd_report, cmd_synth, cmd_train};

#[derive(Parser)]
#[command(name = "xpln", version, about = "Lesion-explained image grading")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic graded dataset with lesion masks.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Total number of images (a multiple of images_per_eye).
        #[arg(long, default_value_t = 80)]
        count: usize,
        /// Generator seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
        /// key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a dataset directory and save the best checkpoint.
    Train {
        /// Dataset directory containing manifest.csv.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write (history lands beside it).
        #[arg(long)]
        out: PathBuf,
        /// key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Foreground-sparsity weight (overrides the config file).
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Accepted for the record; runs are bit-reproducible regardless.
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint on a dataset and write metrics + curves.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory containing manifest.csv.
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON path (curve CSVs land beside it).
        #[arg(long)]
        report: PathBuf,
        /// Also score the pixel maps against mask files, when present.
        #[arg(long)]
        pixel_masks: bool,
    },
    /// Explain one image: heatmaps, color map, JSON breakdown, sentences.
    Report {
        /// Checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Image to explain.
        #[arg(long)]
        image: PathBuf,
        /// Output directory for the bundle.
        #[arg(long)]
        out: PathBuf,
        /// channel=keyword file naming the patterns.
        #[arg(long)]
        keywords: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth { out, count, seed, config } => {
            cmd_synth(&commands::SynthArgs { out, count, seed, config })
        }
        Cmd::Train { data, out, config, seed, epochs, lr, gamma, threads, deterministic } => {
            cmd_train(&commands::TrainArgs {
                data,
                out,
                config,
                seed,
                epochs,
                lr,
                gamma,
                threads,
                deterministic,
            })
        }
        Cmd::Eval { model, data, report, pixel_masks } => {
            cmd_eval(&commands::EvalArgs { model, data, report, pixel_masks })
        }
        Cmd::Report { model, image, out, keywords } => {
            cmd_report(&commands::ReportArgs { model, image, out, keywords })
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
