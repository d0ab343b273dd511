//! Activity phantoms: random training phantoms and the Shepp-Logan
//! evaluation phantom.
//!
//! Pixel centers map to the unit square: pixel (row, col) sits at
//! x = -1 + 2(col+0.5)/n, y = 1 - 2(row+0.5)/n (y up, row 0 at top).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Square non-negative activity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::Dimension(format!(
                "image {size}x{size} needs {} values, got {}",
                size * size,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("image values must be finite and >= 0".into()));
        }
        Ok(Image { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Image { size, data: alloc::vec![0.0; size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    /// Unit-square coordinate of a pixel center.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let n = self.size as f64;
        (-1.0 + 2.0 * (col as f64 + 0.5) / n, 1.0 - 2.0 * (row as f64 + 0.5) / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

/// Distribution parameters for random training phantoms.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub seed: u64,
    pub size: usize,
    /// Inclusive range for the number of overlapping shapes.
    pub num_shapes_range: (u64, u64),
    pub intensity_range: (f64, f64),
    /// Semi-axis / half-extent range as a fraction of the half field width.
    pub size_range: (f64, f64),
    pub kinds: Vec<ShapeKind>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            size: 128,
            num_shapes_range: (1, 8),
            intensity_range: (0.2, 1.0),
            size_range: (0.05, 0.40),
            kinds: alloc::vec![ShapeKind::Ellipse, ShapeKind::Rectangle],
        }
    }
}

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config("phantom size must be >= 2".into()));
        }
        if self.num_shapes_range.0 > self.num_shapes_range.1 {
            return Err(Error::Config("empty num_shapes_range".into()));
        }
        if self.intensity_range.0 > self.intensity_range.1 || self.intensity_range.0 < 0.0 {
            return Err(Error::Config("intensity_range must be non-empty and >= 0".into()));
        }
        if self.size_range.0 > self.size_range.1 || self.size_range.0 <= 0.0 {
            return Err(Error::Config("size_range must be non-empty and positive".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("at least one shape kind required".into()));
        }
        Ok(())
    }
}

/// Random overlapping ellipses/rectangles, additive intensities, normalized
/// to max 1 when nonzero. Pure function of the config (including its seed).
pub fn generate_random_phantom(config: &PhantomConfig) -> Result<Image> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let n_shapes = rng.uniform_int(config.num_shapes_range.0, config.num_shapes_range.1);
    let mut img = Image::zeros(config.size);
    for _ in 0..n_shapes {
        let kind = config.kinds[(rng.next_u64() % config.kinds.len() as u64) as usize];
        // center uniform in the inscribed disc
        let r = libm::sqrt(rng.uniform());
        let theta = rng.uniform_range(0.0, 2.0 * core::f64::consts::PI);
        let (cx, cy) = (r * libm::cos(theta), r * libm::sin(theta));
        let ax = rng.uniform_range(config.size_range.0, config.size_range.1);
        let ay = rng.uniform_range(config.size_range.0, config.size_range.1);
        let phi = rng.uniform_range(0.0, core::f64::consts::PI);
        let intensity = rng.uniform_range(config.intensity_range.0, config.intensity_range.1);
        let (cphi, sphi) = (libm::cos(phi), libm::sin(phi));
        for row in 0..config.size {
            for col in 0..config.size {
                let (x, y) = img.pixel_center(row, col);
                let (dx, dy) = (x - cx, y - cy);
                let xr = dx * cphi + dy * sphi;
                let yr = -dx * sphi + dy * cphi;
                let inside = match kind {
                    ShapeKind::Ellipse => (xr / ax) * (xr / ax) + (yr / ay) * (yr / ay) <= 1.0,
                    ShapeKind::Rectangle => xr.abs() <= ax && yr.abs() <= ay,
                };
                if inside {
                    img.data[row * config.size + col] += intensity;
                }
            }
        }
    }
    let max = img.max_value();
    if max > 0.0 {
        for v in img.data.iter_mut() {
            *v /= max;
        }
    }
    Ok(img)
}

/// One Shepp-Logan ellipse: semi-axes, center, rotation (degrees,
/// counter-clockwise), additive intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    pub phi_deg: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let phi = self.phi_deg * core::f64::consts::PI / 180.0;
        let (c, s) = (libm::cos(phi), libm::sin(phi));
        let (dx, dy) = (x - self.x0, y - self.y0);
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.a) * (xr / self.a) + (yr / self.b) * (yr / self.b) <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SheppLoganVariant {
    /// Contrast-improved intensities; image values lie in [0, 1].
    Modified,
    /// The 1974 intensities (skull 2.0, low-contrast interior).
    Original,
}

/// The 10 standard ellipses with intensities per variant.
pub fn shepp_logan_ellipses(variant: SheppLoganVariant) -> [Ellipse; 10] {
    const GEOM: [(f64, f64, f64, f64, f64); 10] = [
        (0.69, 0.92, 0.0, 0.0, 0.0),
        (0.6624, 0.874, 0.0, -0.0184, 0.0),
        (0.11, 0.31, 0.22, 0.0, -18.0),
        (0.16, 0.41, -0.22, 0.0, 18.0),
        (0.21, 0.25, 0.0, 0.35, 0.0),
        (0.046, 0.046, 0.0, 0.1, 0.0),
        (0.046, 0.046, 0.0, -0.1, 0.0),
        (0.046, 0.023, -0.08, -0.605, 0.0),
        (0.023, 0.023, 0.0, -0.606, 0.0),
        (0.023, 0.046, 0.06, -0.605, 0.0),
    ];
    let intensities: [f64; 10] = match variant {
        SheppLoganVariant::Modified => [1.0, -0.8, -0.2, -0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
        SheppLoganVariant::Original => {
            [2.0, -0.98, -0.02, -0.02, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01]
        }
    };
    let mut out = [Ellipse { a: 0.0, b: 0.0, x0: 0.0, y0: 0.0, phi_deg: 0.0, intensity: 0.0 }; 10];
    for (i, &(a, b, x0, y0, phi)) in GEOM.iter().enumerate() {
        out[i] = Ellipse { a, b, x0, y0, phi_deg: phi, intensity: intensities[i] };
    }
    out
}

/// Phantom value at a unit-square point: sum of intensities of the ellipses
/// containing it.
pub fn shepp_logan_value(x: f64, y: f64, variant: SheppLoganVariant) -> f64 {
    shepp_logan_ellipses(variant)
        .iter()
        .filter(|e| e.contains(x, y))
        .map(|e| e.intensity)
        .sum()
}

/// Shepp-Logan phantom sampled at pixel centers.
pub fn shepp_logan(size: usize, variant: SheppLoganVariant) -> Result<Image> {
    if size < 16 {
        return Err(Error::Config(format!("shepp_logan size must be >= 16, got {size}")));
    }
    let mut img = Image::zeros(size);
    let ellipses = shepp_logan_ellipses(variant);
    for row in 0..size {
        for col in 0..size {
            let (x, y) = img.pixel_center(row, col);
            let v: f64 =
                ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
            // intensities are chosen so sums stay non-negative; clamp guards
            // float edge cases only
            img.data[row * size + col] = v.max(0.0);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn deterministic_per_seed() {
        let cfg = PhantomConfig { seed: 1234, ..Default::default() };
        let a = generate_random_phantom(&cfg).unwrap();
        let b = generate_random_phantom(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_random_phantom(&PhantomConfig { seed: 1235, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_shapes_gives_zero_image() {
        let cfg = PhantomConfig { num_shapes_range: (0, 0), ..Default::default() };
        let img = generate_random_phantom(&cfg).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_shape_normalizes_to_one() {
        // one large centered-ish ellipse with intensity 0.7 -> max becomes 1
        let cfg = PhantomConfig {
            seed: 7,
            num_shapes_range: (1, 1),
            intensity_range: (0.7, 0.7),
            size_range: (0.3, 0.4),
            kinds: vec![ShapeKind::Ellipse],
            ..Default::default()
        };
        let img = generate_random_phantom(&cfg).unwrap();
        assert!((img.max_value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn phantoms_non_negative_and_normalized() {
        for seed in 0..20 {
            let img =
                generate_random_phantom(&PhantomConfig { seed, ..Default::default() }).unwrap();
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = PhantomConfig { num_shapes_range: (3, 1), ..Default::default() };
        assert!(matches!(generate_random_phantom(&cfg), Err(Error::Config(_))));
        let cfg = PhantomConfig { intensity_range: (-0.1, 1.0), ..Default::default() };
        assert!(generate_random_phantom(&cfg).is_err());
    }

    #[test]
    fn shepp_logan_outside_skull_is_zero() {
        let img = shepp_logan(128, SheppLoganVariant::Modified).unwrap();
        // corner pixel is well outside the outer ellipse
        assert_eq!(img.data()[0], 0.0);
        let (x, y) = img.pixel_center(0, 0);
        assert!(!shepp_logan_ellipses(SheppLoganVariant::Modified)[0].contains(x, y));
    }

    #[test]
    fn shepp_logan_max_is_one_on_skull_rim() {
        // independent oracle: point-in-ellipse membership sum per pixel
        let img = shepp_logan(128, SheppLoganVariant::Modified).unwrap();
        let mut oracle_max = 0.0f64;
        for row in 0..128 {
            for col in 0..128 {
                let (x, y) = img.pixel_center(row, col);
                let v = shepp_logan_value(x, y, SheppLoganVariant::Modified);
                assert!((img.data()[row * 128 + col] - v.max(0.0)).abs() < 1e-15);
                oracle_max = oracle_max.max(v);
            }
        }
        assert_eq!(oracle_max, 1.0);
        assert_eq!(img.max_value(), 1.0);
    }

    #[test]
    fn shepp_logan_center_value_from_membership_oracle() {
        // ellipses containing the origin: skull (+1.0) and brain (-0.8)
        let v = shepp_logan_value(0.0, 0.0, SheppLoganVariant::Modified);
        assert!((v - 0.2).abs() < 1e-12);
        let v = shepp_logan_value(0.0, 0.0, SheppLoganVariant::Original);
        assert!((v - 1.02).abs() < 1e-12);
    }

    #[test]
    fn shepp_logan_symmetric_partial_sum() {
        // Only the centered axis-aligned ellipses are exactly left-right
        // symmetric; their partial sum must satisfy value(x,y) == value(-x,y).
        let ellipses = shepp_logan_ellipses(SheppLoganVariant::Modified);
        let symmetric: Vec<&Ellipse> =
            ellipses.iter().filter(|e| e.x0 == 0.0 && e.phi_deg == 0.0).collect();
        assert!(symmetric.len() >= 6);
        let n = 64;
        let img = Image::zeros(n);
        for row in 0..n {
            for col in 0..n {
                let (x, y) = img.pixel_center(row, col);
                let v: f64 =
                    symmetric.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
                let m: f64 =
                    symmetric.iter().filter(|e| e.contains(-x, y)).map(|e| e.intensity).sum();
                assert_eq!(v, m);
            }
        }
    }

    #[test]
    fn shepp_logan_values_in_unit_interval() {
        let img = shepp_logan(96, SheppLoganVariant::Modified).unwrap();
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn shepp_logan_rejects_tiny_size() {
        assert!(shepp_logan(8, SheppLoganVariant::Modified).is_err());
    }
}
