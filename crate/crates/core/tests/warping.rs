mod common;

use common::{flat_scene, linear_scene, perturb_heads, samples, samples_of, small_sample, tiny_config};
use evfi::flow::FlowField;
use evfi::events::voxelize;
use evfi::graph::Graph;
use evfi::losses::warping_terms;
use evfi::model::{prefix, FlowSource, Model, ModelConfig, NetSize};
use evfi::nn::GtFlowEstimator;
use evfi::params::{ParamGrads, ParamMask};
use evfi::simulator::{generate_scene, MotionKind, RandomSceneSpec, SceneConfig};
use evfi::train::{train_stage, Stage, StageConfig, TrainOptions};
use evfi::tensor::Tensor;
use evfi::warping::{event_update, warping_forward, warping_graph};

fn model(seed: u64, perturbed: bool) -> Model<f64> {
    let mut m = Model::new(tiny_config(seed)).unwrap();
    if perturbed {
        perturb_heads(&mut m, 0.05, seed + 100);
    }
    m
}

fn masked_mean_abs(a: &Tensor<f64>, b: &Tensor<f64>, mask: &Tensor<f64>) -> (f64, usize) {
    let (c, h, w) = a.chw();
    let plane = h * w;
    let (mut sum, mut n) = (0.0, 0usize);
    for p in 0..plane {
        if mask.data()[p] > 0.5 {
            for ch in 0..c {
                sum += (a.data()[ch * plane + p] - b.data()[ch * plane + p]).abs();
                n += 1;
            }
        }
    }
    (sum / n.max(1) as f64, n)
}

#[test]
fn zero_heads_pass_the_initial_flows_through() {
    let s = small_sample(1);
    let m = model(2, false);
    let out = warping_forward(&m, &s.input(0), &GtFlowEstimator::exact()).unwrap();
    assert_eq!(out.ft0_update.data, out.ft0_init.data);
    assert_eq!(out.ft1_update.data, out.ft1_init.data);
    assert_eq!(out.ft0_refine.data, out.ft0_init.data);
    assert_eq!(out.ft1_refine.data, out.ft1_init.data);
    // the fusion reduces to a validity-weighted mean of the two warps
    let (c, h, w) = s.i0.chw();
    let plane = h * w;
    for p in 0..plane {
        let (m0, m1) = (out.warped_fwd.validity.data()[p], out.warped_bwd.validity.data()[p]);
        for ch in 0..c {
            let i = ch * plane + p;
            let (a, b) = (out.warped_fwd.image.data()[i], out.warped_bwd.image.data()[i]);
            let expect = match (m0 > 0.5, m1 > 0.5) {
                (true, false) => a,
                (false, true) => b,
                _ => 0.5 * (a + b),
            };
            assert!((out.fused.data()[i] - expect).abs() < 1e-9, "pixel {p} channel {ch}");
        }
    }
}

#[test]
fn event_update_adds_its_residual_exactly() {
    let s = small_sample(3);
    let m = model(4, true);
    let out = warping_forward(&m, &s.input(0), &GtFlowEstimator::exact()).unwrap();
    let e = voxelize::<f64>(&s.targets[0].events_t1, m.config.bins).unwrap();
    let mut g = Graph::new(&m.store, None);
    let f = g.input(out.ft1_init.data.clone());
    let (delta, updated) = event_update(&mut g, &m.g1, f, &e).unwrap();
    assert!(g.value(delta).max_abs() > 0.0);
    let sum = out.ft1_init.data.add(g.value(delta)).unwrap();
    assert_eq!(g.value(updated), &sum);
    assert_eq!(&out.ft1_update.data, &sum);
}

#[test]
fn disabling_the_event_update_skips_g1() {
    let s = small_sample(5);
    let mut cfg = tiny_config(6);
    cfg.event_update = false;
    let mut m = Model::<f64>::new(cfg).unwrap();
    perturb_heads(&mut m, 0.05, 7);
    let out = warping_forward(&m, &s.input(0), &GtFlowEstimator::exact()).unwrap();
    assert_eq!(out.ft0_update.data, out.ft0_init.data);
    assert_ne!(out.ft0_refine.data, out.ft0_init.data);
}

#[test]
fn static_scene_warps_to_the_boundary_frames() {
    let s = samples(&flat_scene([16, 16], 3), 1).remove(0);
    let out = warping_forward(&model(8, false), &s.input(0), &GtFlowEstimator::exact()).unwrap();
    assert_eq!(out.ft0_init.data.max_abs(), 0.0);
    assert!(out.warped_fwd.image.sub(&s.i0).unwrap().max_abs() < 1e-12);
    assert!(out.warped_bwd.image.sub(&s.i1).unwrap().max_abs() < 1e-12);
    assert!(out.warped_fwd.validity.data().iter().all(|&v| v == 1.0));
}

#[test]
fn exact_flows_on_linear_motion_land_on_the_target() {
    for (seed, v) in [(1u64, [1.5, 0.5]), (2, [-2.0, 1.0]), (3, [0.75, -1.25])] {
        let scene = linear_scene([32, 32], 3, [10.0, 9.0], v, seed);
        let (_, truth) = generate_scene::<f64>(&scene).unwrap();
        let mut s = samples(&scene, 1).remove(0);
        s.i0 = truth.render(0.0);
        s.i1 = truth.render(2.0);
        let mask = truth.interior_mask::<f64>(&[0.0, 1.0, 2.0], 1);
        let gt = truth.render::<f64>(1.0);
        let out = warping_forward(&model(seed, false), &s.input(0), &GtFlowEstimator::exact()).unwrap();
        for img in [&out.warped_fwd.image, &out.warped_bwd.image, &out.fused] {
            let (mae, n) = masked_mean_abs(img, &gt, &mask);
            assert!(n > 100, "mask too small: {n}");
            assert!(mae <= 2.0 / 255.0, "velocity {v:?}: mae {mae}");
        }
    }
}

#[test]
fn gradients_reach_every_warping_network() {
    let s = small_sample(9);
    let m = model(10, true);
    let mask = m.store.mask_for(&[prefix::WARPING]);
    let mut g = Graph::new(&m.store, Some(&mask));
    let vars = warping_graph(&mut g, &m, &s.input(0), &GtFlowEstimator::exact()).unwrap();
    let gt = g.input(s.targets[0].image.clone());
    let total = warping_terms(&mut g, &vars, gt).unwrap().total(&mut g).unwrap();
    let mut grads = ParamGrads::new(m.store.len());
    g.backward(total).accumulate_into(&mut grads);
    for p in [prefix::G1, prefix::G2, prefix::WARP_FUSION] {
        let norm: f64 = m
            .store
            .ids_with_prefix(p)
            .filter_map(|id| grads.get(id))
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(norm > 0.0, "{p} got no gradient");
    }
    for id in m.store.ids_with_prefix(prefix::SYNTHESIS) {
        assert!(grads.get(id).is_none_or(|t| t.max_abs() == 0.0));
    }
}

#[test]
fn frozen_mask_keeps_gradients_out() {
    let s = small_sample(11);
    let m = model(12, true);
    let mask = ParamMask::none(m.store.len());
    let mut g = Graph::new(&m.store, Some(&mask));
    let vars = warping_graph(&mut g, &m, &s.input(0), &GtFlowEstimator::exact()).unwrap();
    let gt = g.input(s.targets[0].image.clone());
    let total = warping_terms(&mut g, &vars, gt).unwrap().total(&mut g).unwrap();
    let mut grads = ParamGrads::new(m.store.len());
    g.backward(total).accumulate_into(&mut grads);
    assert_eq!(grads.global_norm(), 0.0);
}

#[test]
fn deterministic_and_bounded() {
    let s = small_sample(13);
    let a = warping_forward(&model(14, true), &s.input(0), &GtFlowEstimator::exact()).unwrap();
    let b = warping_forward(&model(14, true), &s.input(0), &GtFlowEstimator::exact()).unwrap();
    assert_eq!(a, b);
    assert!(a.fused.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.ft0_refine.data.data().iter().all(|v| v.is_finite()));
}

fn mean_epe(a: &FlowField<f32>, b: &FlowField<f32>) -> f64 {
    let (_, h, w) = a.data.chw();
    let plane = h * w;
    let (da, db) = (a.data.data(), b.data.data());
    let sum: f64 = (0..plane)
        .map(|p| {
            let dx = (da[p] - db[p]) as f64;
            let dy = (da[plane + p] - db[plane + p]) as f64;
            dx.hypot(dy)
        })
        .sum();
    sum / plane as f64
}

#[test]
fn trained_event_update_reduces_endpoint_error() {
    let spec = RandomSceneSpec {
        canvas: [32, 32],
        n_frames: 3,
        motion: MotionKind::Nonlinear,
        ..Default::default()
    };
    let scene = |seed| SceneConfig::random(&spec, seed).unwrap();
    let train: Vec<_> = (0..16).flat_map(|s| samples_of::<f32>(&scene(s), 1)).collect();
    let cfg = ModelConfig {
        flow_net: NetSize {
            levels: 2,
            base_width: 8,
        },
        flow_source: FlowSource::GroundTruth { sigma: 1.0 },
        ..tiny_config(3)
    };
    let mut m = Model::<f32>::new(cfg).unwrap();
    let stage = StageConfig {
        epochs: 30,
        seed: 3,
        ..StageConfig::desk(Stage::Warping)
    };
    train_stage(&mut m, &stage, &train, TrainOptions::default()).unwrap();

    let est = m.estimator();
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 100..108 {
        let sc = scene(seed);
        let (_, truth) = generate_scene::<f32>(&sc).unwrap();
        let s = samples_of::<f32>(&sc, 1).remove(0);
        let out = warping_forward(&m, &s.input(0), est.as_ref()).unwrap();
        // the target sits on frame 1 of 0..2
        let gt0 = truth.flow::<f32>(1.0, 0.0, 0.5, 0.0);
        let gt1 = truth.flow::<f32>(1.0, 2.0, 0.5, 1.0);
        before += mean_epe(&out.ft0_init, &gt0) + mean_epe(&out.ft1_init, &gt1);
        after += mean_epe(&out.ft0_update, &gt0) + mean_epe(&out.ft1_update, &gt1);
    }
    assert!(after < before, "EPE {after:.4} vs initial {before:.4}");
}
