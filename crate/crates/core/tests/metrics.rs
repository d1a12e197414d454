mod common;

use common::random_tensor;
use evfi::metrics::{aggregate, mse, psnr, ssim, MetricRecord, PSNR_CAP};
use evfi::tensor::Tensor;
use proptest::prelude::*;

/// SSIM with an explicit 2-D window per pixel, truncated at the border and
/// renormalized.
fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (c, h, w) = a.chw();
    let plane = h * w;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * plane..(ch + 1) * plane];
        let y = &b.data()[ch * plane..(ch + 1) * plane];
        for py in 0..h as isize {
            for px in 0..w as isize {
                let (mut ws, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5isize..=5 {
                    for dx in -5isize..=5 {
                        let (qx, qy) = (px + dx, py + dy);
                        if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                            continue;
                        }
                        let k = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
                        let i = qy as usize * w + qx as usize;
                        ws += k;
                        mx += k * x[i];
                        my += k * y[i];
                        sxx += k * x[i] * x[i];
                        syy += k * y[i] * y[i];
                        sxy += k * x[i] * y[i];
                    }
                }
                let (mx, my) = (mx / ws, my / ws);
                let vx = sxx / ws - mx * mx;
                let vy = syy / ws - my * my;
                let cxy = sxy / ws - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (c * plane) as f64
}

#[test]
fn identical_images_hit_the_caps() {
    let a = random_tensor(&[3, 12, 12], 0.0, 1.0, 1);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn constant_offset_of_a_tenth_is_twenty_db() {
    let a = random_tensor(&[3, 9, 7], 0.2, 0.8, 2);
    let b = a.map(|v| v + 0.1);
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn ssim_matches_the_windowed_definition() {
    for (shape, seed) in [([3, 16, 16], 3u64), ([1, 7, 13], 4), ([3, 24, 9], 5)] {
        let a = random_tensor(&shape, 0.0, 1.0, seed);
        let noise = random_tensor(&shape, -0.2, 0.2, seed + 10);
        let b = Tensor::from_fn(&shape, |i| (a.data()[i] + noise.data()[i]).clamp(0.0, 1.0));
        let got = ssim(&a, &b).unwrap();
        let want = naive_ssim(&a, &b);
        assert!((got - want).abs() < 1e-10, "{shape:?}: {got} vs {want}");
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = random_tensor(&[3, 4, 4], 0.0, 1.0, 6);
    let b = random_tensor(&[3, 4, 5], 0.0, 1.0, 7);
    assert!(psnr(&a, &b).is_err());
    assert!(ssim(&a, &b).is_err());
}

#[test]
fn aggregate_means() {
    assert_eq!(aggregate(&[]), None);
    let r = |p, s| MetricRecord {
        sample_id: "x".into(),
        psnr: p,
        ssim: s,
    };
    assert_eq!(aggregate(&[r(30.0, 0.9), r(40.0, 0.7)]), Some((35.0, 0.8)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in 0u64..100_000) {
        let a = random_tensor(&[3, 8, 8], 0.0, 1.0, seed);
        let b = random_tensor(&[3, 8, 8], 0.0, 1.0, seed + 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 && s1 >= -1.0);
        prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
    }
}
