#![allow(dead_code)]

use evfi::dataset::{assemble, build_samples, simulate_scene, LoadedSample};
use evfi::model::{ModelConfig, NetSize};
use evfi::simulator::{ObjectSpec, SceneConfig, SimulatorConfig, Texture, Trajectory, Wave};
use evfi::tensor::Tensor;
use evfi::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Largest relative difference between `analytic` and central differences of
/// `f` around `x0`. Components where both are below `floor` count as exact.
pub fn fd_rel_error(f: impl Fn(&Tensor<f64>) -> f64, x0: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64, floor: f64) -> f64 {
    assert_eq!(x0.shape(), analytic.shape());
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let mut up = x0.clone();
        up.data_mut()[i] += eps;
        let mut dn = x0.clone();
        dn.data_mut()[i] -= eps;
        let num = (f(&up) - f(&dn)) / (2.0 * eps);
        let an = analytic.data()[i];
        let scale = num.abs().max(an.abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((num - an).abs() / scale);
    }
    worst
}

pub fn textured(seed: u64) -> Texture {
    Texture::random(&mut rng(seed), 3, 8.0)
}

/// One textured rectangle moving with constant velocity over a textured
/// background.
pub fn linear_scene(canvas: [usize; 2], n_frames: usize, start: [f64; 2], velocity: [f64; 2], seed: u64) -> SceneConfig {
    SceneConfig {
        canvas,
        background: textured(seed),
        objects: vec![ObjectSpec {
            texture: textured(seed + 1),
            size: [canvas[0] as f64 * 0.4, canvas[1] as f64 * 0.4],
            trajectory: Trajectory::Linear { start, velocity },
        }],
        n_frames,
        frame_rate: 30.0,
        seed,
    }
}

pub fn flat_scene(canvas: [usize; 2], n_frames: usize) -> SceneConfig {
    SceneConfig {
        canvas,
        background: Texture {
            base: [0.4, 0.5, 0.6],
            waves: vec![Wave {
                amplitude: [0.1, 0.1, 0.1],
                kx: 0.5,
                ky: 0.3,
                phase: 0.0,
            }],
        },
        objects: vec![ObjectSpec {
            texture: Texture::flat([0.8, 0.2, 0.3]),
            size: [canvas[0] as f64 * 0.3, canvas[1] as f64 * 0.3],
            trajectory: Trajectory::Linear {
                start: [2.0, 3.0],
                velocity: [0.0, 0.0],
            },
        }],
        n_frames,
        frame_rate: 30.0,
        seed: 0,
    }
}

/// Windows of a scene with skip `k`, ready for the model.
pub fn samples(scene: &SceneConfig, skip: usize) -> Vec<LoadedSample<f64>> {
    samples_of(scene, skip)
}

pub fn samples_of<T: Scalar>(scene: &SceneConfig, skip: usize) -> Vec<LoadedSample<T>> {
    let (keys, events, truth) = simulate_scene::<T>(scene, &SimulatorConfig::default(), 8).unwrap();
    build_samples("t", &keys, &events, skip, Some(&truth))
        .unwrap()
        .into_iter()
        .map(|s| assemble(s).unwrap())
        .collect()
}

/// A small model that runs quickly at 16x16.
pub fn tiny_config(seed: u64) -> ModelConfig {
    let n = NetSize {
        levels: 2,
        base_width: 4,
    };
    ModelConfig {
        synthesis_net: n,
        fusion_net: n,
        flow_net: n,
        seed,
        ..Default::default()
    }
}

/// Adds `N(0, scale^2)`-ish uniform noise to every output head so residual
/// networks stop being the identity.
pub fn perturb_heads(model: &mut evfi::model::Model<f64>, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.store.ids().filter(|&id| model.store.name(id).contains(".head.")).collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += r.random_range(-scale..scale);
        }
    }
}

/// A moving-square sample on a 16x16 canvas.
pub fn small_sample(seed: u64) -> LoadedSample<f64> {
    let scene = linear_scene([16, 16], 3, [3.0, 4.0], [1.5, 0.5], seed);
    samples(&scene, 1).remove(0)
}
