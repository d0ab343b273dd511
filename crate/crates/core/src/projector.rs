//! Parallel-beam forward projector, its exact adjoint, and Poisson noise.
//!
//! Rays are sampled at unit-pixel steps with bilinear interpolation; the
//! backprojector scatters through the same interpolation weights, so the
//! adjoint identity <Ax, y> == <x, A^T y> holds to rounding error. OSEM
//! depends on that matched pair.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::phantom::Image;
use crate::rng::Rng;

/// Parallel-beam acquisition: `num_views` angles evenly spaced over 360
/// degrees, `num_bins` detector bins of one pixel width centered on the
/// grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub num_views: usize,
    pub num_bins: usize,
}

impl Geometry {
    pub fn new(num_views: usize, num_bins: usize) -> Result<Self> {
        if num_views == 0 || num_bins == 0 {
            return Err(Error::Config("geometry needs at least 1 view and 1 bin".into()));
        }
        Ok(Geometry { num_views, num_bins })
    }

    /// View angle in radians; angle_k = k * (360 / num_views) degrees.
    pub fn angle(&self, view: usize) -> f64 {
        2.0 * core::f64::consts::PI * view as f64 / self.num_views as f64
    }
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry { num_views: 32, num_bins: 128 }
    }
}

/// views x bins non-negative projection data. `counts_scale` records the
/// expected counts at the sinogram maximum (0 for noise-free data).
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    num_views: usize,
    num_bins: usize,
    counts_scale: f64,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(num_views: usize, num_bins: usize, counts_scale: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_views * num_bins {
            return Err(Error::Dimension(format!(
                "sinogram {num_views}x{num_bins} needs {} values, got {}",
                num_views * num_bins,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("sinogram values must be finite and >= 0".into()));
        }
        if !counts_scale.is_finite() || counts_scale < 0.0 {
            return Err(Error::Config("counts_scale must be finite and >= 0".into()));
        }
        Ok(Sinogram { num_views, num_bins, counts_scale, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Sinogram {
            num_views: geometry.num_views,
            num_bins: geometry.num_bins,
            counts_scale: 0.0,
            data: vec![0.0; geometry.num_views * geometry.num_bins],
        }
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn counts_scale(&self) -> f64 {
        self.counts_scale
    }

    pub fn set_counts_scale(&mut self, counts_scale: f64) {
        self.counts_scale = counts_scale;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn geometry(&self) -> Geometry {
        Geometry { num_views: self.num_views, num_bins: self.num_bins }
    }

    pub fn view(&self, v: usize) -> &[f64] {
        &self.data[v * self.num_bins..(v + 1) * self.num_bins]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    pub fn matches(&self, geometry: Geometry) -> bool {
        self.num_views == geometry.num_views && self.num_bins == geometry.num_bins
    }
}

/// Noise presets: expected counts at the sinogram maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLevel {
    Low,
    Medium,
    High,
}

impl NoiseLevel {
    pub fn counts_scale(self) -> f64 {
        match self {
            NoiseLevel::Low => 200.0,
            NoiseLevel::Medium => 50.0,
            NoiseLevel::High => 10.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseLevel::Low => "low",
            NoiseLevel::Medium => "medium",
            NoiseLevel::High => "high",
        }
    }

    pub const ALL: [NoiseLevel; 3] = [NoiseLevel::Low, NoiseLevel::Medium, NoiseLevel::High];
}

/// Enumerates bilinear taps along the ray (view, bin) over an n x n grid,
/// step = 1 pixel. Shared by forward and adjoint so the pair stays matched.
fn for_each_tap(n: usize, theta: f64, s: f64, mut visit: impl FnMut(usize, f64)) {
    let (cos_t, sin_t) = (libm::cos(theta), libm::sin(theta));
    let center = (n as f64 - 1.0) / 2.0;
    let t_max = libm::ceil(n as f64 * core::f64::consts::SQRT_2 / 2.0) as i64;
    for k in -t_max..=t_max {
        let t = k as f64;
        let px = center + s * cos_t - t * sin_t;
        let py = center + s * sin_t + t * cos_t;
        let i0 = libm::floor(px) as i64;
        let j0 = libm::floor(py) as i64;
        let fx = px - i0 as f64;
        let fy = py - j0 as f64;
        let taps = [
            (i0, j0, (1.0 - fx) * (1.0 - fy)),
            (i0 + 1, j0, fx * (1.0 - fy)),
            (i0, j0 + 1, (1.0 - fx) * fy),
            (i0 + 1, j0 + 1, fx * fy),
        ];
        for (i, j, w) in taps {
            if w > 0.0 && i >= 0 && j >= 0 && (i as usize) < n && (j as usize) < n {
                visit(j as usize * n + i as usize, w);
            }
        }
    }
}

#[inline]
fn bin_offset(geometry: Geometry, bin: usize) -> f64 {
    bin as f64 - (geometry.num_bins as f64 - 1.0) / 2.0
}

/// Line integrals of an image over a subset of views, rows in `views` order.
pub fn forward_project_views(image: &Image, geometry: Geometry, views: &[usize]) -> Vec<f64> {
    let n = image.size();
    let data = image.data();
    let mut out = vec![0.0; views.len() * geometry.num_bins];
    for (row, &v) in views.iter().enumerate() {
        let theta = geometry.angle(v);
        for b in 0..geometry.num_bins {
            let mut acc = 0.0;
            for_each_tap(n, theta, bin_offset(geometry, b), |idx, w| {
                acc += w * data[idx];
            });
            out[row * geometry.num_bins + b] = acc;
        }
    }
    out
}

/// Discrete Radon transform of the image (all views).
pub fn forward_project(image: &Image, geometry: Geometry) -> Sinogram {
    let views: Vec<usize> = (0..geometry.num_views).collect();
    let data = forward_project_views(image, geometry, &views);
    // line integrals of a non-negative image can only dip below zero by
    // rounding; snap those to zero
    let data = data.into_iter().map(|v| v.max(0.0)).collect();
    Sinogram::new(geometry.num_views, geometry.num_bins, 0.0, data).expect("projection shape")
}

/// Adjoint accumulation over a subset of views; `values` rows follow
/// `views` order.
pub fn back_project_views(
    values: &[f64],
    geometry: Geometry,
    views: &[usize],
    image_size: usize,
) -> Vec<f64> {
    debug_assert_eq!(values.len(), views.len() * geometry.num_bins);
    let mut img = vec![0.0; image_size * image_size];
    for (row, &v) in views.iter().enumerate() {
        let theta = geometry.angle(v);
        for b in 0..geometry.num_bins {
            let y = values[row * geometry.num_bins + b];
            if y == 0.0 {
                continue;
            }
            for_each_tap(image_size, theta, bin_offset(geometry, b), |idx, w| {
                img[idx] += w * y;
            });
        }
    }
    img
}

/// Exact adjoint of [`forward_project`].
pub fn back_project(sinogram: &Sinogram, geometry: Geometry, image_size: usize) -> Result<Image> {
    if !sinogram.matches(geometry) {
        return Err(Error::Dimension(format!(
            "sinogram {}x{} does not match geometry {}x{}",
            sinogram.num_views, sinogram.num_bins, geometry.num_views, geometry.num_bins
        )));
    }
    let views: Vec<usize> = (0..geometry.num_views).collect();
    let data = back_project_views(sinogram.data(), geometry, &views, image_size);
    Image::new(image_size, data)
}

/// Scales the sinogram so its maximum equals `counts_scale`, draws each bin
/// from Poisson(lambda = scaled value), and rescales back. Deterministic per
/// seed.
pub fn add_poisson_noise(sinogram: &Sinogram, counts_scale: f64, seed: u64) -> Result<Sinogram> {
    if counts_scale <= 0.0 || !counts_scale.is_finite() {
        return Err(Error::Config(format!("counts_scale must be positive, got {counts_scale}")));
    }
    let max = sinogram.max_value();
    if max == 0.0 {
        let mut out = sinogram.clone();
        out.set_counts_scale(counts_scale);
        return Ok(out);
    }
    let scale = counts_scale / max;
    let mut rng = Rng::new(seed);
    let data: Vec<f64> =
        sinogram.data().iter().map(|&v| rng.poisson(v * scale) / scale).collect();
    Sinogram::new(sinogram.num_views(), sinogram.num_bins(), counts_scale, data)
}
