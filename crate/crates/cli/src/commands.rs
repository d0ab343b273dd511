//! Pipeline commands behind the `sino` binary: dataset generation, GAN
//! training, sinogram denoising, OSEM reconstruction, metric evaluation,
//! and the one-shot experiment reproduction run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sino_core::gan::{self, TrainConfig, TrainState};
use sino_core::metrics::{self, MetricsReport};
use sino_core::osem::{osem_reconstruct, OsemConfig};
use sino_core::phantom::{generate_random_phantom, shepp_logan, PhantomConfig, SheppLoganVariant};
use sino_core::projector::{add_poisson_noise, forward_project, Geometry, NoiseLevel, Sinogram};
use sino_core::rng::Rng;

use crate::formats::{
    self, append_loss_trace, append_report, read_checkpoint, read_image, read_payload,
    read_sinogram, write_checkpoint, write_image, write_png_panel, write_png_windowed,
    write_sinogram, DatasetManifest, ExperimentConfig, ManifestRecord, NoisyEntry, Payload,
};

/// Noise presets selectable on the command line.
pub fn parse_levels(spec: &str) -> Result<Vec<NoiseLevel>> {
    if spec == "all" {
        return Ok(NoiseLevel::ALL.to_vec());
    }
    spec.split(',')
        .map(|name| {
            NoiseLevel::ALL
                .into_iter()
                .find(|l| l.name() == name.trim())
                .with_context(|| format!("unknown noise level {name:?} (low/medium/high/all)"))
        })
        .collect()
}

fn log(quiet: bool, msg: &str) {
    if !quiet {
        println!("{msg}");
    }
}

// ---------------------------------------------------------------------------
// gen-data

pub struct GenDataArgs {
    pub count: usize,
    pub size: usize,
    pub views: usize,
    pub bins: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub levels: Vec<NoiseLevel>,
    /// Record ids start here; disjoint offsets give disjoint seed ranges,
    /// which is how held-out test sets are kept out of training data.
    pub first_id: u64,
    pub overwrite: bool,
    pub quiet: bool,
}

impl GenDataArgs {
    pub fn new(count: usize, seed: u64, out: PathBuf) -> Self {
        GenDataArgs {
            count,
            size: 64,
            views: 32,
            bins: 128,
            seed,
            out,
            levels: NoiseLevel::ALL.to_vec(),
            first_id: 0,
            overwrite: false,
            quiet: true,
        }
    }
}

/// Generates `count` random phantoms with clean and noisy sinograms, then
/// writes the manifest last so a complete manifest implies a complete
/// dataset.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<PathBuf> {
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output dir {}", args.out.display()))?;
    let manifest_path = args.out.join("manifest.txt");
    if manifest_path.exists() && !args.overwrite {
        bail!(
            "{} already exists; pass --overwrite to regenerate",
            manifest_path.display()
        );
    }
    let geometry = Geometry::new(args.views, args.bins).context("invalid geometry")?;

    let mut manifest = DatasetManifest::default();
    for i in 0..args.count {
        let id = args.first_id + i as u64;
        let record_seed = Rng::derive(args.seed, id).next_u64();
        let phantom = generate_random_phantom(&PhantomConfig {
            seed: record_seed,
            size: args.size,
            ..Default::default()
        })?;
        let clean = forward_project(&phantom, geometry);

        let image_name = format!("phantom_{id:06}.img");
        let clean_name = format!("clean_{id:06}.sng");
        write_image(&args.out.join(&image_name), &phantom)
            .with_context(|| format!("writing {image_name}"))?;
        write_sinogram(&args.out.join(&clean_name), &clean)
            .with_context(|| format!("writing {clean_name}"))?;

        let mut noisy_entries = Vec::new();
        for (li, level) in args.levels.iter().enumerate() {
            let noise_seed = Rng::derive(record_seed, 1 + li as u64).next_u64();
            let noisy = add_poisson_noise(&clean, level.counts_scale(), noise_seed)?;
            let name = format!("noisy_{}_{id:06}.sng", level.name());
            write_sinogram(&args.out.join(&name), &noisy)
                .with_context(|| format!("writing {name}"))?;
            noisy_entries.push(NoisyEntry {
                level: level.name().to_string(),
                path: name,
                counts_scale: level.counts_scale(),
            });
        }
        manifest.records.push(ManifestRecord {
            id,
            seed: record_seed,
            image: image_name,
            clean_sinogram: clean_name,
            noisy: noisy_entries,
        });
        if (i + 1) % 100 == 0 {
            log(args.quiet, &format!("generated {}/{} phantoms", i + 1, args.count));
        }
    }
    manifest.save(&manifest_path)?;
    log(
        args.quiet,
        &format!("wrote {} records to {}", manifest.records.len(), manifest_path.display()),
    );
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// train

pub struct TrainArgs {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub config: TrainConfig,
    /// Noise levels whose pairs enter the training set.
    pub levels: Vec<NoiseLevel>,
    pub quiet: bool,
}

/// Loads (noisy, clean) pairs referenced by a manifest. Fails fast with the
/// offending file path or record index.
pub fn load_training_pairs(
    manifest_path: &Path,
    levels: &[NoiseLevel],
) -> Result<Vec<(Sinogram, Sinogram)>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (index, rec) in manifest.records.iter().enumerate() {
        let clean = read_sinogram(&base.join(&rec.clean_sinogram))
            .with_context(|| format!("manifest record {index} (id {})", rec.id))?;
        for level in levels {
            let entry = rec
                .noisy
                .iter()
                .find(|n| n.level == level.name())
                .with_context(|| {
                    format!("manifest record {index} has no {} noise entry", level.name())
                })?;
            let noisy = read_sinogram(&base.join(&entry.path))
                .with_context(|| format!("manifest record {index} (id {})", rec.id))?;
            pairs.push((noisy, clean.clone()));
        }
    }
    Ok(pairs)
}

/// Trains (or resumes) the denoiser; writes `checkpoint.ckpt` and appends
/// `loss_trace.csv` under the output directory.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output dir {}", args.out.display()))?;
    let ckpt_path = args.out.join("checkpoint.ckpt");
    let trace_path = args.out.join("loss_trace.csv");

    let pairs = load_training_pairs(&args.manifest, &args.levels)?;
    log(args.quiet, &format!("loaded {} training pairs", pairs.len()));

    let (resume, fresh_trace) = if ckpt_path.exists() {
        let ckpt = read_checkpoint(&ckpt_path)?;
        let state = TrainState::from_checkpoint(&ckpt, &args.config)
            .with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        log(
            args.quiet,
            &format!("resuming from {} ({} epochs done)", ckpt_path.display(), state.epochs_done),
        );
        (Some(state), false)
    } else {
        (None, true)
    };

    let views = pairs.first().map(|(n, _)| n.num_views()).unwrap_or(0);
    let bins = pairs.first().map(|(n, _)| n.num_bins()).unwrap_or(0);
    let (state, trace) = gan::train(&args.config, &pairs, resume)?;
    write_checkpoint(&ckpt_path, &state.to_checkpoint(&args.config, views, bins))?;
    append_loss_trace(&trace_path, &trace, fresh_trace)?;
    log(
        args.quiet,
        &format!("trained to epoch {}; checkpoint at {}", state.epochs_done, ckpt_path.display()),
    );
    Ok(ckpt_path)
}

// ---------------------------------------------------------------------------
// denoise

pub fn cmd_denoise(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    png: bool,
    quiet: bool,
) -> Result<()> {
    let ckpt = read_checkpoint(checkpoint)?;
    let noisy = read_sinogram(input)?;
    let denoised = gan::denoise_from_checkpoint(&ckpt, &noisy)?;
    write_sinogram(output, &denoised)?;
    if png {
        export_png_sibling(output, denoised.data(), denoised.num_views(), denoised.num_bins())?;
    }
    log(quiet, &format!("denoised {} -> {}", input.display(), output.display()));
    Ok(())
}

// ---------------------------------------------------------------------------
// reconstruct

pub fn cmd_reconstruct(
    input: &Path,
    output: &Path,
    size: usize,
    subsets: usize,
    iterations: usize,
    png: bool,
    quiet: bool,
) -> Result<()> {
    let sino = read_sinogram(input)?;
    let config = OsemConfig { num_subsets: subsets, num_iterations: iterations, ..Default::default() };
    let image = osem_reconstruct(&sino, sino.geometry(), size, &config)?;
    write_image(output, &image)?;
    if png {
        export_png_sibling(output, image.data(), image.size(), image.size())?;
    }
    log(quiet, &format!("reconstructed {} -> {}", input.display(), output.display()));
    Ok(())
}

fn export_png_sibling(binary_path: &Path, data: &[f64], height: usize, width: usize) -> Result<()> {
    let dir = binary_path.parent().unwrap_or(Path::new("."));
    let stem = binary_path
        .file_stem()
        .and_then(|s| s.to_str())
        .context("output path has no file stem")?;
    write_png_windowed(dir, stem, data, height, width)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub fn cmd_evaluate(
    test: &Path,
    reference: &Path,
    report: &Path,
    data_range: Option<f64>,
    label: Option<&str>,
    overwrite: bool,
    quiet: bool,
) -> Result<MetricsReport> {
    let test_payload = read_payload(test)?;
    let ref_payload = read_payload(reference)?;
    let (test_data, th, tw) = test_payload.grid();
    let (ref_data, rh, rw) = ref_payload.grid();
    if (th, tw) != (rh, rw) {
        bail!(
            "{} is {}x{} but {} is {}x{}",
            test.display(),
            th,
            tw,
            reference.display(),
            rh,
            rw
        );
    }
    if matches!(test_payload, Payload::Image(_)) != matches!(ref_payload, Payload::Image(_)) {
        bail!("cannot compare an image against a sinogram");
    }
    let label = label
        .map(str::to_string)
        .or_else(|| test.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .unwrap_or_else(|| "pair".to_string());
    let result = match data_range {
        Some(r) => metrics::evaluate_pair(test_data, ref_data, th, tw, r, &label)?,
        None => metrics::evaluate_pair_auto(test_data, ref_data, th, tw, &label)?,
    };
    append_report(report, &result, overwrite)?;
    log(
        quiet,
        &format!(
            "{label}: mape {:.4}% mse {:.6} ssim {:.4} psnr {:.2} dB",
            result.mape_pct, result.mse, result.ssim, result.psnr_db
        ),
    );
    Ok(result)
}

// ---------------------------------------------------------------------------
// reproduce

/// Mean over reports of (mape_pct, mse, ssim, psnr_db).
fn mean_metrics(reports: &[MetricsReport]) -> (f64, f64, f64, f64) {
    let n = reports.len().max(1) as f64;
    let sum = reports.iter().fold((0.0, 0.0, 0.0, 0.0), |acc, r| {
        (acc.0 + r.mape_pct, acc.1 + r.mse, acc.2 + r.ssim, acc.3 + r.psnr_db)
    });
    (sum.0 / n, sum.1 / n, sum.2 / n, sum.3 / n)
}

fn table_row(level: NoiseLevel, method: &str, reports: &[MetricsReport]) -> String {
    let (mape, mse, ssim, psnr) = mean_metrics(reports);
    format!("{},{},{},{},{},{}", level.name(), method, mape, mse, ssim, psnr)
}

/// Per-record metric accumulators for one noise level.
#[derive(Default)]
struct LevelStats {
    sino_noisy: Vec<MetricsReport>,
    sino_denoised: Vec<MetricsReport>,
    recon_standard: Vec<MetricsReport>,
    recon_proposed: Vec<MetricsReport>,
}

pub struct ReproduceSummary {
    pub tables_dir: PathBuf,
    pub panels_dir: PathBuf,
    /// Mean SSIM per (level, method = standard|proposed) for quick checks.
    pub recon_ssim: Vec<(String, String, f64)>,
}

/// One-shot desk-scale reproduction: generate data, train, denoise the
/// held-out set, reconstruct with OSEM, and emit metric tables plus
/// side-by-side PNG panels.
pub fn cmd_reproduce(
    config: &ExperimentConfig,
    out: &Path,
    overwrite: bool,
    quiet: bool,
) -> Result<ReproduceSummary> {
    if out.join("config.txt").exists() && !overwrite {
        bail!("{} already holds a run; pass --overwrite to redo it", out.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    formats::write_file_atomic(&out.join("config.txt"), config.to_string().as_bytes())?;

    let stage = |name: &str| {
        format!("stage {name} failed; partial results remain in {}", out.display())
    };
    let geometry = Geometry::new(config.views, config.bins)?;
    let levels = NoiseLevel::ALL;

    // stage: dataset generation (training ids 0.., held-out test ids start
    // at 1_000_000_000 so the seed ranges never overlap)
    let train_dir = out.join("data_train");
    let test_dir = out.join("data_test");
    let train_manifest = cmd_gen_data(&GenDataArgs {
        count: config.train_count,
        size: config.image_size,
        views: config.views,
        bins: config.bins,
        seed: config.seed,
        out: train_dir,
        levels: levels.to_vec(),
        first_id: 0,
        overwrite,
        quiet,
    })
    .with_context(|| stage("gen-data(train)"))?;
    let test_manifest = cmd_gen_data(&GenDataArgs {
        count: config.test_count,
        size: config.image_size,
        views: config.views,
        bins: config.bins,
        seed: config.seed,
        out: test_dir.clone(),
        levels: levels.to_vec(),
        first_id: 1_000_000_000,
        overwrite,
        quiet,
    })
    .with_context(|| stage("gen-data(test)"))?;

    // stage: training
    let train_config = TrainConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        beta1: config.beta1,
        beta2: config.beta2,
        lambda_l1: config.lambda_l1,
        channel_scale: config.channel_scale,
        seed: config.seed,
    };
    let model_dir = out.join("model");
    if overwrite {
        // a leftover checkpoint would silently resume instead of retraining
        let _ = fs::remove_file(model_dir.join("checkpoint.ckpt"));
        let _ = fs::remove_file(model_dir.join("loss_trace.csv"));
    }
    let ckpt_path = cmd_train(&TrainArgs {
        manifest: train_manifest,
        out: model_dir,
        config: train_config,
        levels: levels.to_vec(),
        quiet,
    })
    .with_context(|| stage("train"))?;
    let ckpt = read_checkpoint(&ckpt_path)?;

    // stage: held-out evaluation
    let osem = OsemConfig {
        num_subsets: config.osem_subsets,
        num_iterations: config.osem_iterations,
        ..Default::default()
    };
    let manifest = DatasetManifest::load(&test_manifest)?;
    let mut stats: Vec<LevelStats> = levels.iter().map(|_| LevelStats::default()).collect();
    for rec in &manifest.records {
        let phantom = read_image(&test_dir.join(&rec.image))?;
        let clean = read_sinogram(&test_dir.join(&rec.clean_sinogram))?;
        for (li, level) in levels.iter().enumerate() {
            let entry = rec
                .noisy
                .iter()
                .find(|n| n.level == level.name())
                .with_context(|| format!("record {} lacks {} noise", rec.id, level.name()))?;
            let noisy = read_sinogram(&test_dir.join(&entry.path))?;
            let denoised = gan::denoise_from_checkpoint(&ckpt, &noisy)
                .with_context(|| stage("denoise"))?;

            let grid = (clean.num_views(), clean.num_bins());
            stats[li].sino_noisy.push(metrics::evaluate_pair_auto(
                noisy.data(),
                clean.data(),
                grid.0,
                grid.1,
                "noisy",
            )?);
            stats[li].sino_denoised.push(metrics::evaluate_pair_auto(
                denoised.data(),
                clean.data(),
                grid.0,
                grid.1,
                "denoised",
            )?);

            let recon_std = osem_reconstruct(&noisy, geometry, config.image_size, &osem)
                .with_context(|| stage("reconstruct"))?;
            let recon_prop = osem_reconstruct(&denoised, geometry, config.image_size, &osem)
                .with_context(|| stage("reconstruct"))?;
            let n = phantom.size();
            stats[li].recon_standard.push(metrics::evaluate_pair_auto(
                recon_std.data(),
                phantom.data(),
                n,
                n,
                "standard",
            )?);
            stats[li].recon_proposed.push(metrics::evaluate_pair_auto(
                recon_prop.data(),
                phantom.data(),
                n,
                n,
                "proposed",
            )?);
        }
        log(quiet, &format!("evaluated held-out record {}", rec.id));
    }

    // stage: tables
    let tables_dir = out.join("tables");
    fs::create_dir_all(&tables_dir)?;
    let header = "noise_level,method,mape_pct,mse,ssim,psnr_db\n";
    let mut sino_table = String::from(header);
    let mut recon_table = String::from(header);
    let mut recon_ssim = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        sino_table.push_str(&table_row(*level, "noisy", &stats[li].sino_noisy));
        sino_table.push('\n');
        sino_table.push_str(&table_row(*level, "denoised", &stats[li].sino_denoised));
        sino_table.push('\n');
        recon_table.push_str(&table_row(*level, "standard", &stats[li].recon_standard));
        recon_table.push('\n');
        recon_table.push_str(&table_row(*level, "proposed", &stats[li].recon_proposed));
        recon_table.push('\n');
        for (method, reports) in [
            ("standard", &stats[li].recon_standard),
            ("proposed", &stats[li].recon_proposed),
        ] {
            let (_, _, ssim, _) = mean_metrics(reports);
            recon_ssim.push((level.name().to_string(), method.to_string(), ssim));
        }
    }
    formats::write_file_atomic(&tables_dir.join("sinogram_denoise.csv"), sino_table.as_bytes())
        .with_context(|| stage("tables"))?;
    formats::write_file_atomic(&tables_dir.join("reconstruction.csv"), recon_table.as_bytes())
        .with_context(|| stage("tables"))?;

    // stage: showcase panels on the standard head phantom
    // (phantom | OSEM of noisy | OSEM of denoised, one panel per level)
    let panels_dir = out.join("panels");
    fs::create_dir_all(&panels_dir)?;
    let head = shepp_logan(config.image_size, SheppLoganVariant::Modified)?;
    let head_clean = forward_project(&head, geometry);
    for (li, level) in levels.iter().enumerate() {
        let noise_seed = Rng::derive(config.seed, 0x5151_0000 + li as u64).next_u64();
        let noisy = add_poisson_noise(&head_clean, level.counts_scale(), noise_seed)?;
        let denoised =
            gan::denoise_from_checkpoint(&ckpt, &noisy).with_context(|| stage("panels"))?;
        let recon_std = osem_reconstruct(&noisy, geometry, config.image_size, &osem)?;
        let recon_prop = osem_reconstruct(&denoised, geometry, config.image_size, &osem)?;
        let n = config.image_size;
        write_png_panel(
            &panels_dir,
            &format!("head_{}_phantom_standard_proposed", level.name()),
            &[
                (head.data(), n, n),
                (recon_std.data(), n, n),
                (recon_prop.data(), n, n),
            ],
        )
        .with_context(|| stage("panels"))?;
        write_png_panel(
            &panels_dir,
            &format!("head_{}_sinogram_noisy_denoised", level.name()),
            &[
                (head_clean.data(), config.views, config.bins),
                (noisy.data(), config.views, config.bins),
                (denoised.data(), config.views, config.bins),
            ],
        )
        .with_context(|| stage("panels"))?;
    }

    log(quiet, &format!("reproduction artifacts in {}", out.display()));
    Ok(ReproduceSummary { tables_dir, panels_dir, recon_ssim })
}
