mod common;

use common::{fd_rel_error, perturb_heads, random_tensor, small_sample, tiny_config};
use evfi::graph::{Graph, Var};
use evfi::losses::{
    averaging_loss, averaging_terms, perceptual_graph, perceptual_loss, reconstruction_loss, synthesis_loss, warping_loss,
};
use evfi::model::Model;
use evfi::nn::GtFlowEstimator;
use evfi::synthesis::synthesis_forward;
use evfi::tensor::Tensor;
use evfi::warping::warping_forward;
use proptest::prelude::*;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn model() -> Model<f64> {
    Model::new(tiny_config(1)).unwrap()
}

/// `pred` and a target that differs from it by at least 0.05 per element, so
/// central differences never straddle the L1 kink.
fn pair(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let pred = random_tensor(&[3, 8, 8], 0.2, 0.8, seed);
    let off = random_tensor(&[3, 8, 8], 0.05, 0.15, seed + 1);
    let sign = random_tensor(&[3, 8, 8], -1.0, 1.0, seed + 2);
    let gt = Tensor::from_fn(&[3, 8, 8], |i| pred.data()[i] + off.data()[i] * sign.data()[i].signum());
    (pred, gt)
}

fn grad_of(m: &Model<f64>, x: &Tensor<f64>, f: impl Fn(&mut Graph<'_, f64>, Var) -> Var) -> (f64, Tensor<f64>) {
    let mut g = Graph::new(&m.store, None);
    let v = g.input_with_grad(x.clone());
    let out = f(&mut g, v);
    let val = g.value(out).item();
    let grads = g.backward(out);
    (val, grads.wrt(v).unwrap().clone())
}

fn value_of(m: &Model<f64>, x: &Tensor<f64>, f: impl Fn(&mut Graph<'_, f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new(&m.store, None);
    let v = g.input(x.clone());
    let out = f(&mut g, v);
    g.value(out).item()
}

#[test]
fn l1_gradient_matches_finite_differences() {
    let m = model();
    let (pred, gt) = pair(10);
    let f = |g: &mut Graph<'_, f64>, v: Var| {
        let q = g.input(gt.clone());
        g.l1(v, q).unwrap()
    };
    let (_, an) = grad_of(&m, &pred, f);
    let err = fd_rel_error(|x| value_of(&m, x, f), &pred, &an, EPS, 1e-12);
    assert!(err < TOL, "rel error {err}");
}

#[test]
fn perceptual_gradient_matches_finite_differences() {
    let m = model();
    let (pred, gt) = pair(20);
    let f = |g: &mut Graph<'_, f64>, v: Var| {
        let q = g.input(gt.clone());
        perceptual_graph(g, &m.features, v, q).unwrap()
    };
    let (_, an) = grad_of(&m, &pred, f);
    let err = fd_rel_error(|x| value_of(&m, x, f), &pred, &an, EPS, 1e-9);
    assert!(err < TOL, "rel error {err}");
}

#[test]
fn averaging_total_gradient_matches_finite_differences() {
    let m = model();
    let (pred, gt) = pair(30);
    let f = |g: &mut Graph<'_, f64>, v: Var| {
        let q = g.input(gt.clone());
        averaging_terms(g, &m.features, v, q, 0.1).unwrap().total(g).unwrap()
    };
    let (_, an) = grad_of(&m, &pred, f);
    let err = fd_rel_error(|x| value_of(&m, x, f), &pred, &an, EPS, 1e-9);
    assert!(err < TOL, "rel error {err}");
}

#[test]
fn perfect_predictions_cost_nothing() {
    let s = small_sample(1);
    let mut cfg = tiny_config(1);
    cfg.proxies = vec![1, 2];
    let m = Model::<f64>::new(cfg).unwrap();
    let gt = &s.targets[0].image;
    let mut out = synthesis_forward(&m, &s.input(0)).unwrap();
    out.direct_fwd = gt.clone();
    out.direct_bwd = gt.clone();
    for c in out.proxies_fwd.iter_mut().chain(out.proxies_bwd.iter_mut()) {
        for p in c.iter_mut() {
            *p = gt.clone();
        }
    }
    out.fused = gt.clone();
    let r = synthesis_loss(&m.store, &m.features, &out, gt, 0.1).unwrap();
    assert_eq!(r.total, 0.0);
    assert!(r.components.values().all(|&v| v == 0.0));
    assert_eq!(averaging_loss(&m.store, &m.features, gt, gt, 0.1).unwrap().total, 0.0);
}

#[test]
fn constant_offset_gives_that_offset_per_term() {
    let s = small_sample(2);
    let m = model();
    let gt = random_tensor(&[3, 16, 16], 0.2, 0.8, 3);
    let shifted = gt.map(|v| v + 0.1);
    let mut w = warping_forward(&m, &s.input(0), &GtFlowEstimator::exact()).unwrap();
    w.fused = shifted.clone();
    w.warped_fwd.image = shifted.clone();
    w.warped_bwd.image = gt.map(|v| v - 0.1);
    let r = warping_loss(&w, &gt).unwrap();
    assert_eq!(r.components.len(), 3);
    for v in r.components.values() {
        assert!((v - 0.1).abs() < 1e-12);
    }
    assert!((r.total - 0.3).abs() < 1e-12);
}

#[test]
fn term_counts_follow_the_proxy_list() {
    let s = small_sample(4);
    for (proxies, n) in [(vec![1], 4), (vec![1, 2], 6), (vec![1, 2, 4], 8)] {
        let mut cfg = tiny_config(5);
        cfg.proxies = proxies.clone();
        let m = Model::<f64>::new(cfg).unwrap();
        let out = synthesis_forward(&m, &s.input(0)).unwrap();
        let gt = &s.targets[0].image;
        let recon = reconstruction_loss(&out, gt).unwrap();
        // every candidate plus the fused output
        assert_eq!(recon.components.len(), n + 1, "{proxies:?}");
        let full = synthesis_loss(&m.store, &m.features, &out, gt, 0.1).unwrap();
        assert_eq!(full.components.len(), n + 2);
        assert_eq!(full.weights["perceptual"], 0.1);
    }
}

#[test]
fn zero_lambda_drops_the_perceptual_term() {
    let s = small_sample(6);
    let mut m = Model::<f64>::new(tiny_config(7)).unwrap();
    perturb_heads(&mut m, 0.05, 8);
    let out = synthesis_forward(&m, &s.input(0)).unwrap();
    let gt = &s.targets[0].image;
    let recon = reconstruction_loss(&out, gt).unwrap();
    let full = synthesis_loss(&m.store, &m.features, &out, gt, 0.0).unwrap();
    assert!(full.components["perceptual"] > 0.0);
    assert!((full.total - recon.total).abs() < 1e-15);
}

#[test]
fn total_is_the_weighted_sum_of_components() {
    let s = small_sample(9);
    let mut m = Model::<f64>::new(tiny_config(10)).unwrap();
    perturb_heads(&mut m, 0.05, 11);
    let out = synthesis_forward(&m, &s.input(0)).unwrap();
    let gt = &s.targets[0].image;
    let r = synthesis_loss(&m.store, &m.features, &out, gt, 0.25).unwrap();
    let manual: f64 = r.components.iter().map(|(k, v)| if k == "perceptual" { 0.25 * v } else { *v }).sum();
    assert!((r.total - manual).abs() < 1e-12);
    assert!((r.total - r.recompose()).abs() < 1e-15);
}

#[test]
fn perceptual_rejects_mismatched_shapes() {
    let m = model();
    let a = random_tensor(&[3, 8, 8], 0.0, 1.0, 1);
    let b = random_tensor(&[3, 8, 16], 0.0, 1.0, 2);
    assert!(perceptual_loss(&m.store, &m.features, &a, &b).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn perceptual_is_a_symmetric_nonnegative_discrepancy(seed in 0u64..10_000) {
        let m = model();
        let a = random_tensor(&[3, 8, 8], 0.0, 1.0, seed);
        let b = random_tensor(&[3, 8, 8], 0.0, 1.0, seed + 1);
        let ab = perceptual_loss(&m.store, &m.features, &a, &b).unwrap();
        let ba = perceptual_loss(&m.store, &m.features, &b, &a).unwrap();
        prop_assert!(ab > 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(perceptual_loss(&m.store, &m.features, &a, &a).unwrap(), 0.0);
    }
}
