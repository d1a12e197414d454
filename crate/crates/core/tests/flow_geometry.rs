mod common;

use common::{fd_rel_error, random_tensor, rng};
use evfi::flow::{backward_warp, compose_residual, fuse_initial_flow, FlowField};
use evfi::graph::{Graph, Var};
use evfi::params::ParamStore;
use evfi::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn field(data: Tensor<f64>) -> FlowField<f64> {
    FlowField::new(data, 0.0, 1.0).unwrap()
}

#[test]
fn linear_motion_closed_form_for_random_v_and_t() {
    let mut r = rng(5);
    for _ in 0..10 {
        let (vx, vy) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        let t: f64 = r.random_range(0.01..0.99);
        let f01 = FlowField::constant(4, 5, vx, vy, 0.0, 1.0);
        let f10 = FlowField::constant(4, 5, -vx, -vy, 1.0, 0.0);
        let (ft0, ft1) = fuse_initial_flow(&f01, &f10, t).unwrap();
        for p in 0..20 {
            assert!((ft0.data.data()[p] + t * vx).abs() < 1e-12);
            assert!((ft0.data.data()[20 + p] + t * vy).abs() < 1e-12);
            assert!((ft1.data.data()[p] - (1.0 - t) * vx).abs() < 1e-12);
            assert!((ft1.data.data()[20 + p] - (1.0 - t) * vy).abs() < 1e-12);
        }
    }
}

#[test]
fn endpoint_identities_on_random_fields() {
    let f01 = field(random_tensor(&[2, 6, 7], -3.0, 3.0, 1));
    let f10 = field(random_tensor(&[2, 6, 7], -3.0, 3.0, 2));
    let (a0, a1) = fuse_initial_flow(&f01, &f10, 0.0).unwrap();
    assert!(a0.data.max_abs() <= 1e-7);
    assert!(a1.data.sub(&f01.data).unwrap().max_abs() <= 1e-7);
    let (b0, b1) = fuse_initial_flow(&f01, &f10, 1.0).unwrap();
    assert!(b0.data.sub(&f10.data).unwrap().max_abs() <= 1e-7);
    assert!(b1.data.max_abs() <= 1e-7);
}

#[test]
fn residual_sum_matches_elementwise_oracle() {
    let base = field(random_tensor(&[2, 5, 5], -2.0, 2.0, 3));
    let delta = field(random_tensor(&[2, 5, 5], -2.0, 2.0, 4));
    let s = compose_residual(&base, &delta).unwrap();
    for i in 0..50 {
        assert_eq!(s.data.data()[i], base.data.data()[i] + delta.data.data()[i]);
    }
    let back = s.data.sub(&base.data).unwrap();
    assert!(back.sub(&delta.data).unwrap().max_abs() <= 1e-7);
}

#[test]
fn integer_shift_matches_index_oracle() {
    let src = random_tensor(&[3, 6, 8], 0.0, 1.0, 9);
    for (dx, dy) in [(1i64, 0i64), (-2, 1), (0, -3), (3, 2)] {
        let w = backward_warp(&src, &FlowField::constant(6, 8, dx as f64, dy as f64, 0.0, 1.0)).unwrap();
        for y in 0..6i64 {
            for x in 0..8i64 {
                let (sx, sy) = (x + dx, y + dy);
                let inside = (0..8).contains(&sx) && (0..6).contains(&sy);
                assert_eq!(w.validity.at(0, y as usize, x as usize), if inside { 1.0 } else { 0.0 });
                for c in 0..3 {
                    let expect = if inside { src.at(c, sy as usize, sx as usize) } else { 0.0 };
                    assert_eq!(w.image.at(c, y as usize, x as usize), expect);
                }
            }
        }
    }
}

fn smooth_image(c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        0.5 + 0.3 * (0.7 * x + 0.4 * y + ch as f64).sin() * (0.5 * y - 0.2 * x).cos()
    })
}

/// Flow with fractional parts kept away from the bilinear kinks.
fn fractional_flow(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(&[2, h, w], |_| {
        let whole = r.random_range(-1i32..=1) as f64;
        whole + r.random_range(0.2..0.8)
    })
}

/// `sum(x)` as a graph node, from `mean((x+1)^2) - mean((x-1)^2) = 4 mean(x)`.
fn sum_node(g: &mut Graph<'_, f64>, x: Var) -> Var {
    let n = g.value(x).len() as f64;
    let ones = g.input(Tensor::full(g.value(x).shape(), 1.0));
    let a = g.add(x, ones).unwrap();
    let b = g.sub(x, ones).unwrap();
    let qa = g.mean_sq(a);
    let qb = g.mean_sq(b);
    let d = g.sub(qa, qb).unwrap();
    g.scale(d, n / 4.0)
}

#[test]
fn warp_gradients_match_finite_differences() {
    let (h, w) = (8, 8);
    let src0 = smooth_image(3, h, w);
    let flow0 = fractional_flow(h, w, 17);
    let probe = random_tensor(&[3, h, w], -1.0, 1.0, 18);
    let loss = |src: &Tensor<f64>, flow: &Tensor<f64>| {
        let out = backward_warp(src, &field(flow.clone())).unwrap();
        out.image.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let store = ParamStore::new();
    let mut g = Graph::new(&store, None);
    let s = g.input_with_grad(src0.clone());
    let f = g.input_with_grad(flow0.clone());
    let (o, _) = g.warp(s, f).unwrap();
    let pv = g.input(probe.clone());
    let prod = g.mul(o, pv).unwrap();
    let l = sum_node(&mut g, prod);
    assert!((g.value(l).item() - loss(&src0, &flow0)).abs() < 1e-9);
    let grads = g.backward(l);
    let e_src = fd_rel_error(|x| loss(x, &flow0), &src0, grads.wrt(s).unwrap(), 1e-3, 1e-9);
    let e_flow = fd_rel_error(|x| loss(&src0, x), &flow0, grads.wrt(f).unwrap(), 1e-3, 1e-9);
    assert!(e_src < 1e-3, "image gradient rel error {e_src}");
    assert!(e_flow < 1e-3, "flow gradient rel error {e_flow}");
}

proptest! {
    #[test]
    fn warp_is_linear_in_the_source(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (h, w) = (6, 7);
        let flow = field(random_tensor(&[2, h, w], -1.5, 1.5, seed));
        let sa = random_tensor(&[3, h, w], 0.0, 1.0, seed + 1);
        let sb = random_tensor(&[3, h, w], 0.0, 1.0, seed + 2);
        let mix = sa.zip_map(&sb, |p, q| a * p + b * q).unwrap();
        let wm = backward_warp(&mix, &flow).unwrap().image;
        let wa = backward_warp(&sa, &flow).unwrap().image;
        let wb = backward_warp(&sb, &flow).unwrap().image;
        let lin = wa.zip_map(&wb, |p, q| a * p + b * q).unwrap();
        prop_assert!(wm.sub(&lin).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_flow_is_exact_identity(seed in 0u64..1000) {
        let src = random_tensor(&[3, 5, 9], 0.0, 1.0, seed);
        let w = backward_warp(&src, &FlowField::zeros(5, 9, 0.0, 1.0)).unwrap();
        prop_assert_eq!(&w.image, &src);
        prop_assert!(w.validity.data().iter().all(|&v| v == 1.0));
    }
}
