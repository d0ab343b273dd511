//! Integration tests for the file formats and pipeline commands.

use std::fs;
use std::path::Path;

use sino_cli::commands::{self, GenDataArgs, TrainArgs};
use sino_cli::formats::{
    self, DatasetManifest, ExperimentConfig, REPORT_CSV_HEADER,
};
use sino_core::gan::TrainConfig;
use sino_core::phantom::Image;
use sino_core::projector::{NoiseLevel, Sinogram};
use sino_core::rng::Rng;
use sino_core::Tensor;
use tempfile::TempDir;

fn rand_image(seed: u64, n: usize) -> Image {
    let mut rng = Rng::new(seed);
    Image::new(n, (0..n * n).map(|_| rng.uniform()).collect()).unwrap()
}

fn rand_sinogram(seed: u64, views: usize, bins: usize) -> Sinogram {
    let mut rng = Rng::new(seed);
    Sinogram::new(views, bins, 50.0, (0..views * bins).map(|_| rng.uniform()).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// format round trips

#[test]
fn image_round_trip_bit_exact() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("x.img");
    let img = rand_image(1, 48);
    formats::write_image(&path, &img).unwrap();
    let back = formats::read_image(&path).unwrap();
    assert_eq!(img, back);
    // writing the parsed value again reproduces the bytes
    let bytes1 = fs::read(&path).unwrap();
    formats::write_image(&path, &back).unwrap();
    assert_eq!(bytes1, fs::read(&path).unwrap());
}

#[test]
fn sinogram_round_trip_bit_exact() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("x.sng");
    let sino = rand_sinogram(2, 32, 128);
    formats::write_sinogram(&path, &sino).unwrap();
    assert_eq!(formats::read_sinogram(&path).unwrap(), sino);
}

#[test]
fn checkpoint_round_trip_bit_exact() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("x.ckpt");
    let mut rng = Rng::new(3);
    let t1 = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|_| rng.normal()).collect()).unwrap();
    let t2 = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
    let ckpt = sino_core::gan::ModelCheckpoint {
        version: 1,
        meta: vec![("channel_scale".into(), "0.25".into()), ("note".into(), "desk".into())],
        tensors: vec![("a.weight".into(), t1), ("a.bias".into(), t2)],
    };
    formats::write_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(formats::read_checkpoint(&path).unwrap(), ckpt);
}

#[test]
fn truncated_files_are_rejected_with_path() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("short.img");
    let img = rand_image(4, 16);
    formats::write_image(&path, &img).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    let err = formats::read_image(&path).unwrap_err().to_string();
    assert!(err.contains("short.img"), "error should name the file: {err}");
}

#[test]
fn wrong_magic_is_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("x.sng");
    formats::write_image(&path, &rand_image(5, 16)).unwrap();
    assert!(formats::read_sinogram(&path).is_err());
}

#[test]
fn manifest_round_trip() {
    let manifest = DatasetManifest {
        records: vec![formats::ManifestRecord {
            id: 7,
            seed: 123456789,
            image: "phantom_000007.img".into(),
            clean_sinogram: "clean_000007.sng".into(),
            noisy: vec![formats::NoisyEntry {
                level: "medium".into(),
                path: "noisy_medium_000007.sng".into(),
                counts_scale: 50.0,
            }],
        }],
    };
    let text = manifest.to_string();
    assert_eq!(DatasetManifest::parse(&text).unwrap(), manifest);
}

#[test]
fn corrupt_manifest_record_names_index() {
    let text = "#dataset-manifest v1\nid=0 seed=1 image=a clean=b\nid=oops seed=2 image=c clean=d\n";
    let err = format!("{:#}", DatasetManifest::parse(text).unwrap_err());
    assert!(err.contains("record 1"), "error should name the record index: {err}");
}

#[test]
fn manifest_rejects_duplicate_ids() {
    let text = "#dataset-manifest v1\nid=3 seed=1 image=a clean=b\nid=3 seed=2 image=c clean=d\n";
    assert!(DatasetManifest::parse(text).is_err());
}

#[test]
fn experiment_config_round_trips_losslessly() {
    let cfg = ExperimentConfig {
        seed: 42,
        learning_rate: 0.000137,
        channel_scale: 0.333333333333,
        lambda_l1: 77.7,
        ..Default::default()
    };
    let text = cfg.to_string();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    // defaults fill omitted keys; unknown keys fail
    assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    assert!(ExperimentConfig::parse("bogus_key = 3").is_err());
}

#[test]
fn csv_report_appends_and_overwrites() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("report.csv");
    let report = sino_core::metrics::MetricsReport {
        label: "r1".into(),
        mape_pct: 1.0,
        mape_bins: 10,
        mse: 0.5,
        ssim: 0.9,
        psnr_db: 20.0,
        data_range: 1.0,
    };
    formats::append_report(&path, &report, false).unwrap();
    formats::append_report(&path, &report, false).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3, "header + two rows: {text}");
    assert!(text.starts_with(REPORT_CSV_HEADER));
    formats::append_report(&path, &report, true).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2);
}

#[test]
fn json_report_appends_array_objects() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("report.json");
    let mut report = sino_core::metrics::MetricsReport {
        label: "r1".into(),
        mape_pct: 1.0,
        mape_bins: 10,
        mse: 0.0,
        ssim: 1.0,
        psnr_db: f64::INFINITY,
        data_range: 1.0,
    };
    formats::append_report(&path, &report, false).unwrap();
    report.label = "r2".into();
    formats::append_report(&path, &report, false).unwrap();
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["label"], "r1");
    assert_eq!(rows[0]["psnr_db"], "inf");
    assert_eq!(rows[1]["ssim"], 1.0);
}

// ---------------------------------------------------------------------------
// gen-data

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = GenDataArgs::new(2, 7, out.clone());
        args.size = 32;
        commands::cmd_gen_data(&args).unwrap();
    }
    assert_eq!(dir_snapshot(&a), dir_snapshot(&b));
}

#[test]
fn gen_data_zero_count_writes_empty_manifest() {
    let dir = TempDir::new().unwrap();
    let manifest = commands::cmd_gen_data(&GenDataArgs::new(0, 1, dir.path().into())).unwrap();
    assert!(DatasetManifest::load(&manifest).unwrap().records.is_empty());
}

#[test]
fn gen_data_file_arithmetic() {
    // n phantoms, 3 noise levels -> n images + n clean + 3n noisy + manifest
    let dir = TempDir::new().unwrap();
    let n = 4;
    let mut args = GenDataArgs::new(n, 2, dir.path().into());
    args.size = 32;
    commands::cmd_gen_data(&args).unwrap();
    let files = dir_snapshot(dir.path());
    assert_eq!(files.len(), n + n + 3 * n + 1);
    let images = files.iter().filter(|(name, _)| name.starts_with("phantom_")).count();
    let noisy = files.iter().filter(|(name, _)| name.starts_with("noisy_")).count();
    assert_eq!((images, noisy), (n, 3 * n));
}

#[test]
fn gen_data_refuses_to_clobber_without_overwrite() {
    let dir = TempDir::new().unwrap();
    let mut args = GenDataArgs::new(1, 3, dir.path().into());
    args.size = 32;
    commands::cmd_gen_data(&args).unwrap();
    assert!(commands::cmd_gen_data(&args).is_err());
    args.overwrite = true;
    commands::cmd_gen_data(&args).unwrap();
}

// ---------------------------------------------------------------------------
// train / denoise / reconstruct / evaluate

fn tiny_dataset(dir: &Path, count: usize, seed: u64) -> std::path::PathBuf {
    let mut args = GenDataArgs::new(count, seed, dir.into());
    args.size = 32;
    args.views = 16;
    args.bins = 32;
    commands::cmd_gen_data(&args).unwrap()
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        channel_scale: 0.02,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn train_zero_epochs_emits_initialization_checkpoint() {
    let dir = TempDir::new().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 2, 1);
    let ckpt_path = commands::cmd_train(&TrainArgs {
        manifest,
        out: dir.path().join("model"),
        config: tiny_train_config(0),
        levels: vec![NoiseLevel::Medium],
        quiet: true,
    })
    .unwrap();
    let ckpt = formats::read_checkpoint(&ckpt_path).unwrap();
    assert_eq!(ckpt.meta_get("epochs_done"), Some("0"));
}

#[test]
fn train_missing_file_error_names_it() {
    let dir = TempDir::new().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 2, 1);
    fs::remove_file(dir.path().join("data/noisy_medium_000001.sng")).unwrap();
    let err = format!(
        "{:#}",
        commands::cmd_train(&TrainArgs {
            manifest,
            out: dir.path().join("model"),
            config: tiny_train_config(1),
            levels: vec![NoiseLevel::Medium],
            quiet: true,
        })
        .unwrap_err()
    );
    assert!(err.contains("noisy_medium_000001.sng"), "error should name the file: {err}");
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 3, 2);

    // uninterrupted: 3 epochs in one call
    let straight = commands::cmd_train(&TrainArgs {
        manifest: manifest.clone(),
        out: dir.path().join("straight"),
        config: tiny_train_config(3),
        levels: vec![NoiseLevel::Medium],
        quiet: true,
    })
    .unwrap();

    // interrupted: 2 epochs, then resume to 3
    for epochs in [2, 3] {
        commands::cmd_train(&TrainArgs {
            manifest: manifest.clone(),
            out: dir.path().join("resumed"),
            config: tiny_train_config(epochs),
            levels: vec![NoiseLevel::Medium],
            quiet: true,
        })
        .unwrap();
    }
    let a = fs::read(straight).unwrap();
    let b = fs::read(dir.path().join("resumed/checkpoint.ckpt")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from uninterrupted run");
    // loss traces match too
    assert_eq!(
        fs::read(dir.path().join("straight/loss_trace.csv")).unwrap(),
        fs::read(dir.path().join("resumed/loss_trace.csv")).unwrap()
    );
}

#[test]
fn denoise_output_parses_with_input_dims_and_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 1, 3);
    let ckpt = commands::cmd_train(&TrainArgs {
        manifest,
        out: dir.path().join("model"),
        config: tiny_train_config(1),
        levels: vec![NoiseLevel::Medium],
        quiet: true,
    })
    .unwrap();
    let input = dir.path().join("data/noisy_medium_000000.sng");
    let once = dir.path().join("denoised.sng");
    commands::cmd_denoise(&ckpt, &input, &once, false, true).unwrap();
    let out = formats::read_sinogram(&once).unwrap();
    let orig = formats::read_sinogram(&input).unwrap();
    assert_eq!((out.num_views(), out.num_bins()), (orig.num_views(), orig.num_bins()));
    assert_eq!(out.counts_scale(), orig.counts_scale());
    // denoising the denoised output succeeds with the same shape
    let twice = dir.path().join("denoised2.sng");
    commands::cmd_denoise(&ckpt, &once, &twice, false, true).unwrap();
    let out2 = formats::read_sinogram(&twice).unwrap();
    assert_eq!((out2.num_views(), out2.num_bins()), (orig.num_views(), orig.num_bins()));
}

#[test]
fn reconstruct_is_deterministic_and_zero_input_gives_near_zero() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data, 1, 4);
    let input = data.join("clean_000000.sng");
    let (o1, o2) = (dir.path().join("r1.img"), dir.path().join("r2.img"));
    commands::cmd_reconstruct(&input, &o1, 32, 4, 2, false, true).unwrap();
    commands::cmd_reconstruct(&input, &o2, 32, 4, 2, false, true).unwrap();
    assert_eq!(fs::read(&o1).unwrap(), fs::read(&o2).unwrap());

    let zero = dir.path().join("zero.sng");
    formats::write_sinogram(
        &zero,
        &Sinogram::new(16, 32, 0.0, vec![0.0; 16 * 32]).unwrap(),
    )
    .unwrap();
    let zout = dir.path().join("zero.img");
    commands::cmd_reconstruct(&zero, &zout, 32, 4, 10, false, true).unwrap();
    assert!(formats::read_image(&zout).unwrap().max_value() <= 1e-6);
}

#[test]
fn reconstruct_rejects_bad_subset_divisibility() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data, 1, 4);
    let err = commands::cmd_reconstruct(
        &data.join("clean_000000.sng"),
        &dir.path().join("r.img"),
        32,
        5, // 16 views not divisible by 5
        2,
        false,
        true,
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("subset"), "error should name the constraint: {err}");
}

#[test]
fn evaluate_identical_files_reports_perfect_scores() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("x.img");
    formats::write_image(&path, &rand_image(6, 32)).unwrap();
    let report = dir.path().join("report.csv");
    let result =
        commands::cmd_evaluate(&path, &path, &report, None, Some("self"), false, true).unwrap();
    assert_eq!(result.mse, 0.0);
    assert_eq!(result.ssim, 1.0);
    assert_eq!(result.psnr_db, f64::INFINITY);
    assert!(fs::read_to_string(&report).unwrap().contains("self"));
}

#[test]
fn evaluate_rejects_mismatched_kinds_and_shapes() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("x.img");
    let sng = dir.path().join("x.sng");
    formats::write_image(&img, &rand_image(7, 32)).unwrap();
    formats::write_sinogram(&sng, &rand_sinogram(8, 32, 32)).unwrap();
    let report = dir.path().join("report.csv");
    assert!(commands::cmd_evaluate(&img, &sng, &report, None, None, false, true).is_err());

    let small = dir.path().join("small.img");
    formats::write_image(&small, &rand_image(9, 16)).unwrap();
    assert!(commands::cmd_evaluate(&img, &small, &report, None, None, false, true).is_err());
}
