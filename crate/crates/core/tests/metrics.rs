use hkd_core::metrics::{mse, psnr, psnr_from_mse, ssim, PSNR_SENTINEL_DB, SSIM_K1, SSIM_K2};
use hkd_core::ImageRGB;
use proptest::prelude::*;

fn noise(w: usize, h: usize, seed: u64) -> ImageRGB {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ImageRGB::from_fn(w, h, |_, _| {
        [0; 3].map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f32 / (1u64 << 24) as f32
        })
    })
    .unwrap()
}

#[test]
fn psnr_of_a_hundredth() {
    assert_eq!(psnr_from_mse(0.01), 20.0);
    let a = ImageRGB::filled(16, 12, [0.0; 3]).unwrap();
    let b = ImageRGB::filled(16, 12, [0.1; 3]).unwrap();
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
}

#[test]
fn identical_images_hit_the_sentinel() {
    let a = noise(20, 20, 1);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_SENTINEL_DB);
    assert_eq!(psnr_from_mse(0.0), PSNR_SENTINEL_DB);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

#[test]
fn constant_images_match_closed_form() {
    for (p, q) in [(0.2f32, 0.7f32), (0.5, 0.5), (0.0, 1.0), (0.9, 0.35)] {
        let a = ImageRGB::filled(16, 16, [p; 3]).unwrap();
        let b = ImageRGB::filled(16, 16, [q; 3]).unwrap();
        let (p, q) = (p as f64, q as f64);
        let m = (p - q).powi(2);
        assert!((mse(&a, &b).unwrap() - m).abs() < 1e-12);
        let want_psnr = if m == 0.0 { PSNR_SENTINEL_DB } else { -10.0 * m.log10() };
        assert!((psnr(&a, &b).unwrap() - want_psnr).abs() < 1e-6);
        // Flat windows have no variance or covariance; only luminance is left.
        let c1 = SSIM_K1 * SSIM_K1;
        let want_ssim = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((ssim(&a, &b).unwrap() - want_ssim).abs() < 1e-6, "{p} {q}");
    }
}

#[test]
fn contrast_only_difference_closed_form() {
    // Checkerboard of ±d about the same mean m against a flat m: the
    // luminance term is one and the structure term vanishes.
    let (m, d) = (0.5f64, 0.25f64);
    let a = ImageRGB::from_fn(23, 23, |y, x| [if (x + y) % 2 == 0 { (m + d) as f32 } else { (m - d) as f32 }; 3]).unwrap();
    let b = ImageRGB::filled(23, 23, [m as f32; 3]).unwrap();
    let got = ssim(&a, &b).unwrap();
    let c2 = SSIM_K2 * SSIM_K2;
    // Under a Gaussian window the local mean drifts slightly off m.
    let want = c2 / (d * d + c2);
    assert!(got > 0.0 && got < 1.0);
    assert!((got - want).abs() < 0.02, "{got} vs {want}");
}

#[test]
fn size_checks() {
    let a = ImageRGB::filled(10, 10, [0.5; 3]).unwrap();
    assert!(ssim(&a, &a).is_err());
    let b = ImageRGB::filled(12, 10, [0.5; 3]).unwrap();
    assert!(psnr(&a, &b).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>(), w in 11usize..24, h in 11usize..24) {
        let a = noise(w, h, s1);
        let b = noise(w, h, s2);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_error(s in any::<u64>(), e in 0.01f32..0.2) {
        let a = noise(12, 12, s).quantize8();
        let near = ImageRGB::from_fn(12, 12, |y, x| [0, 1, 2].map(|c| (a.get(y, x, c) + e / 2.0).min(1.0))).unwrap();
        let far = ImageRGB::from_fn(12, 12, |y, x| [0, 1, 2].map(|c| (a.get(y, x, c) + e).min(1.0))).unwrap();
        prop_assert!((psnr(&a, &near).unwrap() - psnr(&near, &a).unwrap()).abs() < 1e-12);
        prop_assert!(psnr(&a, &near).unwrap() > psnr(&a, &far).unwrap());
    }
}
