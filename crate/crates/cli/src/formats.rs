//! On-disk formats: image and sinogram binaries, model checkpoints, dataset
//! manifests, experiment configs, metric reports, and PNG previews.
//!
//! Binary layouts (all little-endian):
//! - image:      magic "IMG1", rows u32, cols u32, then f64 row-major data
//! - sinogram:   magic "SNG1", views u32, bins u32, counts_scale f64, data
//! - checkpoint: magic "CKPT", version u32, metadata count u32 followed by
//!   length-prefixed key/value strings, tensor count u32 followed by
//!   length-prefixed name + ndims u32 + dims u32 + f64 data per tensor

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sino_core::gan::ModelCheckpoint;
use sino_core::metrics::MetricsReport;
use sino_core::phantom::Image;
use sino_core::projector::Sinogram;
use sino_core::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"IMG1";
pub const SINOGRAM_MAGIC: &[u8; 4] = b"SNG1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

// ---------------------------------------------------------------------------
// little-endian primitives

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!(
                "{}: truncated file (needed {} bytes at offset {}, have {})",
                self.path.display(),
                n,
                self.pos,
                self.buf.len() - self.pos
            );
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .with_context(|| format!("{}: invalid UTF-8 string field", self.path.display()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            bail!(
                "{}: {} trailing bytes after payload",
                self.path.display(),
                self.buf.len() - self.pos
            );
        }
        Ok(())
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes atomically: temp file in the same directory, then rename. Partial
/// writes never leave a file at the final path.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// images

pub fn image_to_bytes(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + image.data().len() * 8);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(image.size() as u32).to_le_bytes());
    out.extend_from_slice(&(image.size() as u32).to_le_bytes());
    put_f64s(&mut out, image.data());
    out
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_file_atomic(path, &image_to_bytes(image))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let buf = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader::new(&buf, path);
    if r.take(4)? != IMAGE_MAGIC {
        bail!("{}: not an image file (bad magic)", path.display());
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows != cols {
        bail!("{}: non-square image {}x{} not supported", path.display(), rows, cols);
    }
    let data = r.f64_vec(rows * cols)?;
    r.done()?;
    Image::new(rows, data).with_context(|| format!("validating {}", path.display()))
}

// ---------------------------------------------------------------------------
// sinograms

pub fn sinogram_to_bytes(sino: &Sinogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + sino.data().len() * 8);
    out.extend_from_slice(SINOGRAM_MAGIC);
    out.extend_from_slice(&(sino.num_views() as u32).to_le_bytes());
    out.extend_from_slice(&(sino.num_bins() as u32).to_le_bytes());
    out.extend_from_slice(&sino.counts_scale().to_le_bytes());
    put_f64s(&mut out, sino.data());
    out
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    write_file_atomic(path, &sinogram_to_bytes(sino))
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let buf = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader::new(&buf, path);
    if r.take(4)? != SINOGRAM_MAGIC {
        bail!("{}: not a sinogram file (bad magic)", path.display());
    }
    let views = r.u32()? as usize;
    let bins = r.u32()? as usize;
    let counts_scale = r.f64()?;
    let data = r.f64_vec(views * bins)?;
    r.done()?;
    Sinogram::new(views, bins, counts_scale, data)
        .with_context(|| format!("validating {}", path.display()))
}

/// Magic-sniffed payload for commands that accept either format.
pub enum Payload {
    Image(Image),
    Sinogram(Sinogram),
}

impl Payload {
    /// (data, height, width) view for metric computation.
    pub fn grid(&self) -> (&[f64], usize, usize) {
        match self {
            Payload::Image(img) => (img.data(), img.size(), img.size()),
            Payload::Sinogram(s) => (s.data(), s.num_views(), s.num_bins()),
        }
    }
}

pub fn read_payload(path: &Path) -> Result<Payload> {
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .with_context(|| format!("reading {}", path.display()))?;
    match &magic {
        m if m == IMAGE_MAGIC => Ok(Payload::Image(read_image(path)?)),
        m if m == SINOGRAM_MAGIC => Ok(Payload::Sinogram(read_sinogram(path)?)),
        m => bail!("{}: unrecognized magic {:?}", path.display(), m),
    }
}

// ---------------------------------------------------------------------------
// checkpoints

pub fn checkpoint_to_bytes(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (k, v) in &ckpt.meta {
        put_string(&mut out, k);
        put_string(&mut out, v);
    }
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        put_string(&mut out, name);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f64s(&mut out, tensor.data());
    }
    out
}

pub fn write_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    write_file_atomic(path, &checkpoint_to_bytes(ckpt))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let buf = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader::new(&buf, path);
    if r.take(4)? != CHECKPOINT_MAGIC {
        bail!("{}: not a checkpoint file (bad magic)", path.display());
    }
    let version = r.u32()?;
    let meta_count = r.u32()? as usize;
    let mut meta = Vec::with_capacity(meta_count);
    for _ in 0..meta_count {
        let k = r.string()?;
        let v = r.string()?;
        meta.push((k, v));
    }
    let tensor_count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.string()?;
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64_vec(numel)?;
        let tensor = Tensor::new(shape, data)
            .with_context(|| format!("{}: tensor {name} invalid", path.display()))?;
        tensors.push((name, tensor));
    }
    r.done()?;
    Ok(ModelCheckpoint { version, meta, tensors })
}

// ---------------------------------------------------------------------------
// PNG previews

/// 8-bit grayscale PNG, min-max windowed; the window is part of the file
/// name so the scaling is never hidden. Returns the path written.
pub fn write_png_windowed(
    dir: &Path,
    stem: &str,
    data: &[f64],
    height: usize,
    width: usize,
) -> Result<PathBuf> {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = data
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    let path = dir.join(format!("{stem}_w{lo:.6}_{hi:.6}.png"));
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .context("building PNG buffer")?;
    img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Horizontal side-by-side panel of equally sized grids, each min-max
/// windowed independently, separated by a one-pixel white divider.
pub fn write_png_panel(
    dir: &Path,
    stem: &str,
    panels: &[(&[f64], usize, usize)],
) -> Result<PathBuf> {
    let height = panels.first().map(|&(_, h, _)| h).unwrap_or(0);
    anyhow::ensure!(
        panels.iter().all(|&(_, h, _)| h == height),
        "panel heights differ"
    );
    let total_width: usize =
        panels.iter().map(|&(_, _, w)| w).sum::<usize>() + panels.len().saturating_sub(1);
    let mut pixels = vec![255u8; height * total_width];
    let mut x0 = 0usize;
    for &(data, h, w) in panels {
        let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for row in 0..h {
            for col in 0..w {
                let v = data[row * w + col];
                pixels[row * total_width + x0 + col] =
                    if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
            }
        }
        x0 += w + 1;
    }
    let path = dir.join(format!("{stem}.png"));
    let img = image::GrayImage::from_raw(total_width as u32, height as u32, pixels)
        .context("building PNG buffer")?;
    img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// dataset manifest

/// One noisy sinogram file plus the preset that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyEntry {
    pub level: String,
    pub path: String,
    pub counts_scale: f64,
}

/// One phantom: id, generation seed, and relative paths to its files.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: u64,
    pub seed: u64,
    pub image: String,
    pub clean_sinogram: String,
    pub noisy: Vec<NoisyEntry>,
}

/// Line-delimited dataset manifest; paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

const MANIFEST_HEADER: &str = "#dataset-manifest v1";

impl core::fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        writeln!(f, "{MANIFEST_HEADER}")?;
        for rec in &self.records {
            write!(
                f,
                "id={} seed={} image={} clean={}",
                rec.id, rec.seed, rec.image, rec.clean_sinogram
            )?;
            for n in &rec.noisy {
                write!(f, " noisy.{}={}@{}", n.level, n.path, n.counts_scale)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            other => bail!("manifest header missing or unrecognized: {:?}", other),
        }
        let mut records = Vec::new();
        for (index, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = parse_record(line)
                .with_context(|| format!("manifest record {index} is corrupt"))?;
            records.push(rec);
        }
        let mut ids: Vec<u64> = records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != records.len() {
            bail!("manifest contains duplicate record ids");
        }
        Ok(DatasetManifest { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    /// Written atomically and therefore safe to use as the "dataset is
    /// complete" marker: data files are written first, the manifest last.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file_atomic(path, self.to_string().as_bytes())
    }
}

fn parse_record(line: &str) -> Result<ManifestRecord> {
    let mut id = None;
    let mut seed = None;
    let mut image = None;
    let mut clean = None;
    let mut noisy = Vec::new();
    for field in line.split_whitespace() {
        let (key, value) =
            field.split_once('=').with_context(|| format!("field {field:?} is not key=value"))?;
        match key {
            "id" => id = Some(value.parse::<u64>().context("id is not an integer")?),
            "seed" => seed = Some(value.parse::<u64>().context("seed is not an integer")?),
            "image" => image = Some(value.to_string()),
            "clean" => clean = Some(value.to_string()),
            _ => {
                let level = key
                    .strip_prefix("noisy.")
                    .with_context(|| format!("unknown field key {key:?}"))?;
                let (path, scale) = value
                    .rsplit_once('@')
                    .with_context(|| format!("noisy field {value:?} is not path@scale"))?;
                noisy.push(NoisyEntry {
                    level: level.to_string(),
                    path: path.to_string(),
                    counts_scale: scale
                        .parse::<f64>()
                        .context("counts_scale is not a number")?,
                });
            }
        }
    }
    Ok(ManifestRecord {
        id: id.context("missing id")?,
        seed: seed.context("missing seed")?,
        image: image.context("missing image path")?,
        clean_sinogram: clean.context("missing clean sinogram path")?,
        noisy,
    })
}

// ---------------------------------------------------------------------------
// experiment config

/// Declarative description of a full reproduction run, stored as a flat
/// key = value text file. Unknown keys are rejected; omitted keys keep
/// their defaults; serialization round-trips losslessly (f64 values use
/// Rust's shortest round-trip formatting).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    pub views: usize,
    pub bins: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub osem_subsets: usize,
    pub osem_iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_l1: f64,
    pub channel_scale: f64,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: sized for a workstation CPU, not the full
    /// published experiment.
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            image_size: 64,
            views: 32,
            bins: 128,
            train_count: 5000,
            test_count: 100,
            osem_subsets: 4,
            osem_iterations: 10,
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_l1: 100.0,
            channel_scale: 0.25,
        }
    }
}

impl core::fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "seed = {}\n\
             image_size = {}\n\
             views = {}\n\
             bins = {}\n\
             train_count = {}\n\
             test_count = {}\n\
             osem_subsets = {}\n\
             osem_iterations = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             learning_rate = {}\n\
             beta1 = {}\n\
             beta2 = {}\n\
             lambda_l1 = {}\n\
             channel_scale = {}\n",
            self.seed,
            self.image_size,
            self.views,
            self.bins,
            self.train_count,
            self.test_count,
            self.osem_subsets,
            self.osem_iterations,
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.lambda_l1,
            self.channel_scale,
        )
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected key = value", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = || format!("config line {}: invalid value for {key}", lineno + 1);
            match key {
                "seed" => cfg.seed = value.parse().with_context(ctx)?,
                "image_size" => cfg.image_size = value.parse().with_context(ctx)?,
                "views" => cfg.views = value.parse().with_context(ctx)?,
                "bins" => cfg.bins = value.parse().with_context(ctx)?,
                "train_count" => cfg.train_count = value.parse().with_context(ctx)?,
                "test_count" => cfg.test_count = value.parse().with_context(ctx)?,
                "osem_subsets" => cfg.osem_subsets = value.parse().with_context(ctx)?,
                "osem_iterations" => cfg.osem_iterations = value.parse().with_context(ctx)?,
                "epochs" => cfg.epochs = value.parse().with_context(ctx)?,
                "batch_size" => cfg.batch_size = value.parse().with_context(ctx)?,
                "learning_rate" => cfg.learning_rate = value.parse().with_context(ctx)?,
                "beta1" => cfg.beta1 = value.parse().with_context(ctx)?,
                "beta2" => cfg.beta2 = value.parse().with_context(ctx)?,
                "lambda_l1" => cfg.lambda_l1 = value.parse().with_context(ctx)?,
                "channel_scale" => cfg.channel_scale = value.parse().with_context(ctx)?,
                _ => bail!("config line {}: unknown key {key:?}", lineno + 1),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

// ---------------------------------------------------------------------------
// metric reports

pub const REPORT_CSV_HEADER: &str = "mape_pct,mse,ssim,psnr_db,data_range,label";

fn csv_row(report: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        report.mape_pct, report.mse, report.ssim, report.psnr_db, report.data_range, report.label
    )
}

/// Appends one CSV row, creating the file (with header) if needed; with
/// `overwrite` the file is truncated first.
pub fn append_report_csv(path: &Path, report: &MetricsReport, overwrite: bool) -> Result<()> {
    let fresh = overwrite || !path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut text = String::new();
    if fresh {
        text.push_str(REPORT_CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&csv_row(report));
    text.push('\n');
    file.write_all(text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn report_to_json(report: &MetricsReport) -> serde_json::Value {
    // Non-finite PSNR (identical inputs) has no JSON number representation;
    // serialize it as the string "inf" so the value survives a round trip.
    let psnr: serde_json::Value = if report.psnr_db.is_finite() {
        report.psnr_db.into()
    } else {
        "inf".into()
    };
    serde_json::json!({
        "mape_pct": report.mape_pct,
        "mse": report.mse,
        "ssim": report.ssim,
        "psnr_db": psnr,
        "data_range": report.data_range,
        "label": report.label,
    })
}

/// Appends one object to a JSON array report (created if needed); with
/// `overwrite` the array is reset first.
pub fn append_report_json(path: &Path, report: &MetricsReport, overwrite: bool) -> Result<()> {
    let mut rows: Vec<serde_json::Value> = if !overwrite && path.exists() {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        Vec::new()
    };
    rows.push(report_to_json(report));
    let text = serde_json::to_string_pretty(&rows)?;
    write_file_atomic(path, text.as_bytes())
}

/// Routes on the report extension: ".json" appends a JSON object, anything
/// else appends a CSV row.
pub fn append_report(path: &Path, report: &MetricsReport, overwrite: bool) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        append_report_json(path, report, overwrite)
    } else {
        append_report_csv(path, report, overwrite)
    }
}

/// Appends loss-trace rows (columns step, loss_d, loss_g_adv, loss_g_l1).
pub fn append_loss_trace(
    path: &Path,
    records: &[sino_core::gan::LossRecord],
    fresh: bool,
) -> Result<()> {
    let fresh = fresh || !path.exists();
    let mut text = String::new();
    if fresh {
        text.push_str("step,loss_d,loss_g_adv,loss_g_l1\n");
    }
    for r in records {
        text.push_str(&format!("{},{},{},{}\n", r.step, r.loss_d, r.loss_g_adv, r.loss_g_l1));
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    file.write_all(text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
