//! Randomized invariants over the numeric core.

use proptest::prelude::*;
use sino_core::metrics::{mse, psnr, ssim};
use sino_core::phantom::Image;
use sino_core::projector::{back_project, forward_project, Geometry, Sinogram};
use sino_core::rng::Rng;

const N: usize = 16;
const GEOM: Geometry = Geometry { num_views: 8, num_bins: 16 };

fn image_strategy() -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f64..10.0, N * N).prop_map(|v| Image::new(N, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Forward projection is linear: A(ax + by) = a·Ax + b·Ay.
    #[test]
    fn forward_projection_is_linear(
        x in image_strategy(),
        y in image_strategy(),
        a in 0.0f64..5.0,
        b in 0.0f64..5.0,
    ) {
        let combo = Image::new(
            N,
            x.data().iter().zip(y.data()).map(|(xi, yi)| a * xi + b * yi).collect(),
        ).unwrap();
        let lhs = forward_project(&combo, GEOM);
        let ax = forward_project(&x, GEOM);
        let ay = forward_project(&y, GEOM);
        for ((l, xi), yi) in lhs.data().iter().zip(ax.data()).zip(ay.data()) {
            let rhs = a * xi + b * yi;
            prop_assert!((l - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
        }
    }

    /// <Ax, y> = <x, A'y> for arbitrary non-negative operands.
    #[test]
    fn projector_pair_is_adjoint(
        x in image_strategy(),
        y in proptest::collection::vec(0.0f64..10.0, GEOM.num_views * GEOM.num_bins),
    ) {
        let sino = Sinogram::new(GEOM.num_views, GEOM.num_bins, 0.0, y).unwrap();
        let ax = forward_project(&x, GEOM);
        let aty = back_project(&sino, GEOM, N).unwrap();
        let lhs: f64 = ax.data().iter().zip(sino.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()).max(1e-300));
    }

    /// MSE is symmetric and zero only for identical inputs; PSNR matches
    /// -10 log10(mse) at unit range.
    #[test]
    fn mse_psnr_relation(
        a in proptest::collection::vec(0.0f64..1.0, 64),
        b in proptest::collection::vec(0.0f64..1.0, 64),
    ) {
        let m_ab = mse(&a, &b).unwrap();
        let m_ba = mse(&b, &a).unwrap();
        prop_assert_eq!(m_ab.to_bits(), m_ba.to_bits());
        let p = psnr(&a, &b, 1.0).unwrap();
        if m_ab > 0.0 {
            prop_assert!((p - 10.0 * (1.0 / m_ab).log10()).abs() < 1e-12);
        } else {
            prop_assert_eq!(p, f64::INFINITY);
        }
    }

    /// SSIM is symmetric and bounded by 1 in magnitude on unit-range data.
    #[test]
    fn ssim_symmetric_and_bounded(
        a in proptest::collection::vec(0.0f64..1.0, N * N),
        b in proptest::collection::vec(0.0f64..1.0, N * N),
    ) {
        let s_ab = ssim(&a, &b, N, N, 1.0).unwrap();
        let s_ba = ssim(&b, &a, N, N, 1.0).unwrap();
        prop_assert!((s_ab - s_ba).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s_ab));
    }

    /// Poisson sampling is deterministic per seed and preserves zero bins.
    #[test]
    fn poisson_sampling_seed_stable(seed in any::<u64>(), lambda in 0.0f64..100.0) {
        let mut r1 = Rng::new(seed);
        let mut r2 = Rng::new(seed);
        let a: Vec<f64> = (0..8).map(|_| r1.poisson(lambda)).collect();
        let b: Vec<f64> = (0..8).map(|_| r2.poisson(lambda)).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(Rng::new(seed).poisson(0.0), 0.0);
    }
}
