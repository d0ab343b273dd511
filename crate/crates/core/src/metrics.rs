//! Image/sinogram quality metrics: MAPE, MSE, SSIM, PSNR.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};

/// Reference bins with |value| below this are excluded from MAPE.
pub const MAPE_ZERO_THRESHOLD: f64 = 1e-8;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "metric inputs disagree: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Mean absolute percentage error against reference `b`, in percent.
/// Near-zero reference bins are excluded; returns the value and the number
/// of bins included.
pub fn mape(a: &[f64], b: &[f64]) -> Result<(f64, usize)> {
    check_shapes(a, b)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&x, &r) in a.iter().zip(b) {
        if r.abs() >= MAPE_ZERO_THRESHOLD {
            sum += (x - r).abs() / r.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("MAPE: reference is all (near-)zero".into()));
    }
    Ok((100.0 * sum / count as f64, count))
}

/// 10 log10(data_range^2 / mse); +infinity when mse is zero.
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(data_range * data_range / m))
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let v = libm::exp(-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, over every position where the full window fits.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, data_range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if a.len() != height * width {
        return Err(Error::Dimension(format!(
            "ssim: {height}x{width} does not match {} values",
            a.len()
        )));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}"
        )));
    }
    let w = gaussian_window();
    let c1 = (SSIM_K1 * data_range) * (SSIM_K1 * data_range);
    let c2 = (SSIM_K2 * data_range) * (SSIM_K2 * data_range);
    let mut total = 0.0;
    let mut windows = 0usize;
    for oy in 0..=height - SSIM_WINDOW {
        for ox in 0..=width - SSIM_WINDOW {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let idx = (oy + wy) * width + ox + wx;
                    let wt = w[wy * SSIM_WINDOW + wx];
                    mu_a += wt * a[idx];
                    mu_b += wt * b[idx];
                }
            }
            let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let idx = (oy + wy) * width + ox + wx;
                    let wt = w[wy * SSIM_WINDOW + wx];
                    let (da, db) = (a[idx] - mu_a, b[idx] - mu_b);
                    var_a += wt * da * da;
                    var_b += wt * db * db;
                    cov += wt * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// All four metrics for one test/reference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub mape_pct: f64,
    /// Number of reference bins included in the MAPE mean.
    pub mape_bins: usize,
    pub mse: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub data_range: f64,
}

/// Assembles MAPE/MSE/SSIM/PSNR. `data_range` of 0 or None-like callers
/// should pass the reference maximum; see [`evaluate_pair_auto`].
pub fn evaluate_pair(
    test: &[f64],
    reference: &[f64],
    height: usize,
    width: usize,
    data_range: f64,
    label: &str,
) -> Result<MetricsReport> {
    let (mape_pct, mape_bins) = mape(test, reference)?;
    let m = mse(test, reference)?;
    let s = ssim(test, reference, height, width, data_range)?;
    let p = psnr(test, reference, data_range)?;
    Ok(MetricsReport {
        label: String::from(label),
        mape_pct,
        mape_bins,
        mse: m,
        ssim: s,
        psnr_db: p,
        data_range,
    })
}

/// (reported MSE, reported PSNR) rows of the published denoising and
/// reconstruction tables, both rounded (MSE to 4 decimals, PSNR to 2).
pub const PUBLISHED_TABLE_ROWS: [(f64, f64); 9] = [
    // sinogram denoising: low / medium / high
    (0.0009, 30.48),
    (0.0010, 29.91),
    (0.0054, 22.65),
    // reconstruction, standard method: low / medium / high
    (0.0082, 20.89),
    (0.0087, 20.58),
    (0.0099, 20.05),
    // reconstruction, proposed method: low / medium / high
    (0.0040, 23.94),
    (0.0045, 23.48),
    (0.0061, 22.17),
];

/// Checks that a (rounded MSE, rounded PSNR) pair is consistent with
/// psnr = 10 log10(1 / mse): the two rounding intervals must overlap, i.e.
/// some exact MSE inside the reported MSE's 4-decimal interval produces a
/// PSNR that rounds to the reported 2-decimal value.
pub fn psnr_mse_rounding_consistent(mse_reported: f64, psnr_reported: f64) -> bool {
    let mse_lo = mse_reported - 0.00005;
    let mse_hi = mse_reported + 0.00005;
    // PSNR in [p - 0.005, p + 0.005) maps to MSE (10^-(p+0.005)/10, 10^-(p-0.005)/10]
    let m_lo = libm::pow(10.0, -(psnr_reported + 0.005) / 10.0);
    let m_hi = libm::pow(10.0, -(psnr_reported - 0.005) / 10.0);
    m_lo < mse_hi && m_hi >= mse_lo
}

/// As [`evaluate_pair`], with data_range defaulting to the reference max.
pub fn evaluate_pair_auto(
    test: &[f64],
    reference: &[f64],
    height: usize,
    width: usize,
    label: &str,
) -> Result<MetricsReport> {
    let data_range = reference.iter().cloned().fold(0.0, f64::max);
    if data_range <= 0.0 {
        return Err(Error::UndefinedMetric("reference maximum is not positive".into()));
    }
    evaluate_pair(test, reference, height, width, data_range, label)
}
