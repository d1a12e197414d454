mod common;

use common::{perturb_heads, random_tensor, small_sample, tiny_config};
use evfi::blend::blend_images;
use evfi::model::Model;
use evfi::nn::GtFlowEstimator;
use evfi::interpolate;
use proptest::prelude::*;

#[test]
fn zero_head_blends_evenly() {
    let m = Model::<f64>::new(tiny_config(1)).unwrap();
    let a = random_tensor(&[3, 8, 8], 0.0, 1.0, 2);
    let b = random_tensor(&[3, 8, 8], 0.0, 1.0, 3);
    let out = blend_images(&m, &a, &b).unwrap();
    assert_eq!(out.weights.shape(), &[1, 8, 8]);
    assert!(out.weights.data().iter().all(|&w| w == 0.5));
    let avg = a.zip_map(&b, |x, y| 0.5 * (x + y)).unwrap();
    assert!(out.final_image.sub(&avg).unwrap().max_abs() < 1e-15);
}

#[test]
fn identical_inputs_pass_through() {
    let mut m = Model::<f64>::new(tiny_config(4)).unwrap();
    perturb_heads(&mut m, 0.5, 5);
    let a = random_tensor(&[3, 8, 8], 0.0, 1.0, 6);
    let out = blend_images(&m, &a, &a).unwrap();
    assert!(out.final_image.sub(&a).unwrap().max_abs() < 1e-12);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let m = Model::<f64>::new(tiny_config(7)).unwrap();
    let a = random_tensor(&[3, 8, 8], 0.0, 1.0, 8);
    let b = random_tensor(&[3, 8, 4], 0.0, 1.0, 9);
    assert!(blend_images(&m, &a, &b).is_err());
}

#[test]
fn full_pass_blends_the_two_branch_outputs() {
    let s = small_sample(10);
    let mut m = Model::<f64>::new(tiny_config(11)).unwrap();
    perturb_heads(&mut m, 0.3, 12);
    let out = interpolate(&m, &s.input(0), &GtFlowEstimator::exact()).unwrap();
    let again = blend_images(&m, &out.synthesis.fused, &out.warping.fused).unwrap();
    assert!(again.final_image.sub(&out.blend.final_image).unwrap().max_abs() < 1e-12);
    assert!(again.weights.sub(&out.blend.weights).unwrap().max_abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_is_a_pixelwise_convex_combination(seed in 0u64..1000, scale in 0.0f64..2.0) {
        let mut m = Model::<f64>::new(tiny_config(seed)).unwrap();
        perturb_heads(&mut m, scale, seed + 1);
        let a = random_tensor(&[3, 8, 8], 0.0, 1.0, seed + 2);
        let b = random_tensor(&[3, 8, 8], 0.0, 1.0, seed + 3);
        let out = blend_images(&m, &a, &b).unwrap();
        prop_assert!(out.weights.data().iter().all(|w| (0.0..=1.0).contains(w)));
        let plane = 64;
        for c in 0..3 {
            for p in 0..plane {
                let i = c * plane + p;
                let w = out.weights.data()[p];
                let expect = w * a.data()[i] + (1.0 - w) * b.data()[i];
                prop_assert!((out.final_image.data()[i] - expect).abs() < 1e-12);
                let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
                prop_assert!(out.final_image.data()[i] >= lo - 1e-12 && out.final_image.data()[i] <= hi + 1e-12);
            }
        }
    }
}
