//! Ordered Subset Expectation Maximization reconstruction.
//!
//! Views are partitioned by stride interleaving (view v belongs to subset
//! v mod num_subsets) so every subset keeps balanced angular coverage. With
//! num_subsets = 1 this is classical MLEM with its monotone Poisson
//! log-likelihood.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::phantom::Image;
use crate::projector::{back_project_views, forward_project, forward_project_views, Geometry, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OsemConfig {
    pub num_subsets: usize,
    /// Full passes over all subsets.
    pub num_iterations: usize,
    pub init_value: f64,
    /// Division guard for empty bins and zero sensitivity.
    pub epsilon: f64,
}

impl Default for OsemConfig {
    fn default() -> Self {
        OsemConfig { num_subsets: 4, num_iterations: 10, init_value: 1.0, epsilon: 1e-12 }
    }
}

impl OsemConfig {
    fn validate(&self, geometry: Geometry) -> Result<()> {
        if self.num_subsets == 0 || !geometry.num_views.is_multiple_of(self.num_subsets) {
            return Err(Error::Config(format!(
                "num_views ({}) must be divisible by num_subsets ({})",
                geometry.num_views, self.num_subsets
            )));
        }
        if self.init_value <= 0.0 || self.init_value.is_nan() {
            return Err(Error::Config("init_value must be positive".into()));
        }
        if self.epsilon <= 0.0 || self.epsilon.is_nan() {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

fn subset_views(geometry: Geometry, num_subsets: usize, subset: usize) -> Vec<usize> {
    (0..geometry.num_views).filter(|v| v % num_subsets == subset).collect()
}

/// Multiplicative OSEM update per subset s:
/// x <- x * A_s^T(y_s / (A_s x + eps)) / (A_s^T 1 + eps).
pub fn osem_reconstruct(
    sinogram: &Sinogram,
    geometry: Geometry,
    image_size: usize,
    config: &OsemConfig,
) -> Result<Image> {
    if !sinogram.matches(geometry) {
        return Err(Error::Dimension(format!(
            "sinogram {}x{} does not match geometry {}x{}",
            sinogram.num_views(),
            sinogram.num_bins(),
            geometry.num_views,
            geometry.num_bins
        )));
    }
    config.validate(geometry)?;
    let eps = config.epsilon;

    // sensitivity images A_s^T 1, one per subset
    let subsets: Vec<Vec<usize>> =
        (0..config.num_subsets).map(|s| subset_views(geometry, config.num_subsets, s)).collect();
    let sensitivities: Vec<Vec<f64>> = subsets
        .iter()
        .map(|views| {
            let ones = alloc::vec![1.0; views.len() * geometry.num_bins];
            back_project_views(&ones, geometry, views, image_size)
        })
        .collect();

    let mut x = alloc::vec![config.init_value; image_size * image_size];
    for _ in 0..config.num_iterations {
        for (views, sens) in subsets.iter().zip(&sensitivities) {
            let current = {
                let img = Image::new(image_size, x.clone())?;
                forward_project_views(&img, geometry, views)
            };
            let mut ratio = alloc::vec![0.0; views.len() * geometry.num_bins];
            for (row, &v) in views.iter().enumerate() {
                let y = sinogram.view(v);
                for (b, &yb) in y.iter().enumerate() {
                    let idx = row * geometry.num_bins + b;
                    // max() guard instead of an additive one: for consistent
                    // data (y == Ax) the ratio is then exactly one, making
                    // the maximum-likelihood image an exact fixed point.
                    ratio[idx] = yb / current[idx].max(eps);
                }
            }
            let correction = back_project_views(&ratio, geometry, views, image_size);
            for (xi, corr) in x.iter_mut().zip(correction.iter().zip(sens)) {
                let (c, s) = corr;
                // Pixels outside a subset's detector coverage have zero
                // sensitivity; leave them unchanged rather than zeroing them.
                if *s > 0.0 {
                    *xi *= c / s;
                }
            }
        }
    }
    Image::new(image_size, x)
}

/// Poisson log-likelihood sum(y log(Ax + eps) - Ax), constant log y! term
/// omitted. Test oracle for EM monotonicity.
pub fn poisson_log_likelihood(sinogram: &Sinogram, image: &Image, geometry: Geometry) -> f64 {
    let eps = 1e-12;
    let projected = forward_project(image, geometry);
    sinogram
        .data()
        .iter()
        .zip(projected.data())
        .map(|(&y, &ax)| y * libm::log(ax + eps) - ax)
        .sum()
}
