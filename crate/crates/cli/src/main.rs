//! `sino`: phantom dataset generation, cGAN sinogram denoising, OSEM
//! reconstruction, and metric evaluation from one binary.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use sino_cli::commands::{self, GenDataArgs, TrainArgs};
use sino_cli::formats::ExperimentConfig;
use sino_core::gan::TrainConfig;

#[derive(Parser)]
#[command(name = "sino", version, about = "SPECT sinogram denoising toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Master seed for all derived random streams
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Suppress progress output
    #[arg(long)]
    quiet: bool,
    /// Replace existing outputs instead of failing or appending
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate random phantoms with clean and noisy sinograms
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of phantoms
        #[arg(long)]
        count: usize,
        /// Image side length in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Number of projection views
        #[arg(long, default_value_t = 32)]
        views: usize,
        /// Number of detector bins per view
        #[arg(long, default_value_t = 128)]
        bins: usize,
        /// Noise levels: all, or a comma list of low/medium/high
        #[arg(long, default_value = "all")]
        levels: String,
        /// First record id (offsets the per-record seed range)
        #[arg(long, default_value_t = 0)]
        first_id: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sinogram denoiser (resumes from an existing checkpoint)
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset manifest from gen-data
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for checkpoint.ckpt and loss_trace.csv
        #[arg(long)]
        out: PathBuf,
        /// Total epochs to reach (a resumed run continues up to this)
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-4)]
        learning_rate: f64,
        #[arg(long, default_value_t = 100.0)]
        lambda_l1: f64,
        /// Width multiplier applied to every layer's channel count
        #[arg(long, default_value_t = 0.25)]
        channel_scale: f64,
        /// Noise levels whose pairs enter training
        #[arg(long, default_value = "all")]
        levels: String,
    },
    /// Run the denoiser on one sinogram file
    Denoise {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write a windowed 8-bit PNG preview next to the output
        #[arg(long)]
        png: bool,
    },
    /// OSEM-reconstruct an image from a sinogram
    Reconstruct {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Reconstructed image side length in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        subsets: usize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        /// Also write a windowed 8-bit PNG preview next to the output
        #[arg(long)]
        png: bool,
    },
    /// Compute MAPE/MSE/SSIM/PSNR for a test file against a reference
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Report file; .json appends to a JSON array, otherwise CSV rows
        #[arg(long)]
        report: PathBuf,
        /// Intensity range for SSIM/PSNR (default: reference maximum)
        #[arg(long)]
        data_range: Option<f64>,
        /// Row label (default: test file stem)
        #[arg(long)]
        label: Option<String>,
    },
    /// Full desk-scale experiment: data, training, evaluation, panels
    Reproduce {
        #[command(flatten)]
        common: CommonArgs,
        /// Experiment config file (key = value); defaults apply if omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for all run artifacts
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, count, size, views, bins, levels, first_id, out } => {
            commands::cmd_gen_data(&GenDataArgs {
                count,
                size,
                views,
                bins,
                seed: common.seed,
                out,
                levels: commands::parse_levels(&levels)?,
                first_id,
                overwrite: common.overwrite,
                quiet: common.quiet,
            })?;
        }
        Command::Train {
            common,
            manifest,
            out,
            epochs,
            batch_size,
            learning_rate,
            lambda_l1,
            channel_scale,
            levels,
        } => {
            let config = TrainConfig {
                epochs,
                batch_size,
                learning_rate,
                lambda_l1,
                channel_scale,
                seed: common.seed,
                ..Default::default()
            };
            commands::cmd_train(&TrainArgs {
                manifest,
                out,
                config,
                levels: commands::parse_levels(&levels)?,
                quiet: common.quiet,
            })?;
        }
        Command::Denoise { common, checkpoint, input, output, png } => {
            commands::cmd_denoise(&checkpoint, &input, &output, png, common.quiet)?;
        }
        Command::Reconstruct { common, input, output, size, subsets, iterations, png } => {
            commands::cmd_reconstruct(
                &input,
                &output,
                size,
                subsets,
                iterations,
                png,
                common.quiet,
            )?;
        }
        Command::Evaluate { common, test, reference, report, data_range, label } => {
            commands::cmd_evaluate(
                &test,
                &reference,
                &report,
                data_range,
                label.as_deref(),
                common.overwrite,
                common.quiet,
            )?;
        }
        Command::Reproduce { common, config, out } => {
            let mut cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::default(),
            };
            // --seed overrides the config when given explicitly
            if common.seed != 0 {
                cfg.seed = common.seed;
            }
            commands::cmd_reproduce(&cfg, &out, common.overwrite, common.quiet)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
