//! Boundary-flow estimators.
//!
//! The interpolation model treats the flow estimator as a frozen black box
//! returning `(F_01, F_10)` for a pair of boundary frames. Two sources are
//! provided: analytic ground truth (optionally corrupted by Gaussian noise)
//! and a parameter-free block matcher that only looks at the images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_check, Error, Result};
use crate::flow::FlowField;
use crate::scalar::Scalar;
use crate::simulator::luminance;
use crate::tensor::Tensor;

/// Everything an estimator may look at for one sample.
#[derive(Clone, Copy, Debug)]
pub struct FlowQuery<'a, T> {
    pub i0: &'a Tensor<T>,
    pub i1: &'a Tensor<T>,
    /// Analytic `(F_01, F_10)` when the sample comes from a synthetic scene.
    pub ground_truth: Option<(&'a FlowField<T>, &'a FlowField<T>)>,
    /// Stable per-sample key used to derive deterministic noise.
    pub key: u64,
}

pub trait FlowEstimator<T: Scalar>: Send + Sync {
    fn estimate(&self, query: &FlowQuery<'_, T>) -> Result<(FlowField<T>, FlowField<T>)>;

    fn trainable(&self) -> bool {
        false
    }
}

/// Returns the scene's analytic flows plus i.i.d. `N(0, sigma^2)` noise.
#[derive(Clone, Debug, Default)]
pub struct GtFlowEstimator {
    pub sigma: f64,
    pub seed: u64,
}

impl GtFlowEstimator {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn noisy(sigma: f64, seed: u64) -> Self {
        Self { sigma, seed }
    }
}

impl<T: Scalar> FlowEstimator<T> for GtFlowEstimator {
    fn estimate(&self, q: &FlowQuery<'_, T>) -> Result<(FlowField<T>, FlowField<T>)> {
        let (f01, f10) = q
            .ground_truth
            .ok_or_else(|| Error::MissingGroundTruth(format!("sample key {}", q.key)))?;
        shape_check("ground-truth flow", &[2, q.i0.shape()[1], q.i0.shape()[2]], f01.data.shape())?;
        shape_check("ground-truth flow", f01.data.shape(), f10.data.shape())?;
        if self.sigma <= 0.0 {
            return Ok((f01.clone(), f10.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ q.key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, self.sigma)
            .map_err(|e| Error::InvalidConfig(format!("flow noise sigma {}: {e}", self.sigma)))?;
        let mut noisy = |f: &FlowField<T>| {
            let mut out = f.clone();
            for v in out.data.data_mut() {
                *v += T::of(normal.sample(&mut rng));
            }
            out
        };
        Ok((noisy(f01), noisy(f10)))
    }
}

/// Exhaustive SSD block matching on luminance with parabolic sub-pixel
/// refinement. Out-of-frame samples are clamped to the border.
#[derive(Clone, Debug)]
pub struct BlockMatchingEstimator {
    /// Largest integer displacement searched along each axis.
    pub radius: usize,
    /// Patch half-size; patches are `(2 half + 1)^2`.
    pub patch_half: usize,
}

impl Default for BlockMatchingEstimator {
    fn default() -> Self {
        Self {
            radius: 4,
            patch_half: 2,
        }
    }
}

impl BlockMatchingEstimator {
    /// Flow from `a` to `b`: pixel `p` of `a` matches `p + flow(p)` in `b`.
    fn one_way(&self, a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<[f64; 2]> {
        let r = self.radius as isize;
        let ph = self.patch_half as isize;
        let side = (2 * r + 1) as usize;
        let at = |img: &[f64], x: isize, y: isize| -> f64 {
            let xc = x.clamp(0, w as isize - 1) as usize;
            let yc = y.clamp(0, h as isize - 1) as usize;
            img[yc * w + xc]
        };
        let mut out = vec![[0.0; 2]; h * w];
        let mut cost = vec![0.0; side * side];
        for y in 0..h as isize {
            for x in 0..w as isize {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let mut s = 0.0;
                        for py in -ph..=ph {
                            for px in -ph..=ph {
                                let d = at(a, x + px, y + py) - at(b, x + dx + px, y + dy + py);
                                s += d * d;
                            }
                        }
                        // Prefer small displacements on textureless ties.
                        s += 1e-9 * (dx * dx + dy * dy) as f64;
                        cost[((dy + r) * (2 * r + 1) + dx + r) as usize] = s;
                    }
                }
                let best = (0..cost.len())
                    .min_by(|&i, &j| cost[i].total_cmp(&cost[j]))
                    .expect("non-empty search window");
                let (by, bx) = (best / side, best % side);
                let refine = |lo: Option<f64>, mid: f64, hi: Option<f64>| match (lo, hi) {
                    (Some(l), Some(h)) => {
                        let den = l - 2.0 * mid + h;
                        if den > 1e-12 {
                            (0.5 * (l - h) / den).clamp(-0.5, 0.5)
                        } else {
                            0.0
                        }
                    }
                    _ => 0.0,
                };
                let c = |yy: usize, xx: usize| cost[yy * side + xx];
                let sx = refine(
                    (bx > 0).then(|| c(by, bx - 1)),
                    c(by, bx),
                    (bx + 1 < side).then(|| c(by, bx + 1)),
                );
                let sy = refine(
                    (by > 0).then(|| c(by - 1, bx)),
                    c(by, bx),
                    (by + 1 < side).then(|| c(by + 1, bx)),
                );
                out[(y as usize) * w + x as usize] = [bx as f64 - r as f64 + sx, by as f64 - r as f64 + sy];
            }
        }
        out
    }
}

impl<T: Scalar> FlowEstimator<T> for BlockMatchingEstimator {
    fn estimate(&self, q: &FlowQuery<'_, T>) -> Result<(FlowField<T>, FlowField<T>)> {
        shape_check("block matching frames", q.i0.shape(), q.i1.shape())?;
        let (_, h, w) = q.i0.chw();
        let l0: Vec<f64> = luminance(q.i0).data().iter().map(|v| v.as_f64()).collect();
        let l1: Vec<f64> = luminance(q.i1).data().iter().map(|v| v.as_f64()).collect();
        let pack = |v: Vec<[f64; 2]>, src: f64, dst: f64| {
            let plane = h * w;
            let data = Tensor::from_fn(&[2, h, w], |i| T::of(v[i % plane][i / plane]));
            FlowField {
                data,
                src_time: src,
                dst_time: dst,
            }
        };
        Ok((pack(self.one_way(&l0, &l1, h, w), 0.0, 1.0), pack(self.one_way(&l1, &l0, h, w), 1.0, 0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_scene, ObjectSpec, SceneConfig, Texture, Trajectory};

    fn linear_scene(v: [f64; 2]) -> (Tensor<f64>, Tensor<f64>, FlowField<f64>, FlowField<f64>, Tensor<f64>) {
        let mut bg = Texture::flat([0.2, 0.2, 0.2]);
        bg.waves.clear();
        let obj = ObjectSpec {
            texture: Texture::random(&mut ChaCha8Rng::seed_from_u64(3), 3, 6.0),
            size: [14.0, 12.0],
            trajectory: Trajectory::Linear {
                start: [8.0, 10.0],
                velocity: v,
            },
        };
        let cfg = SceneConfig {
            canvas: [32, 32],
            background: bg,
            objects: vec![obj],
            n_frames: 2,
            frame_rate: 1.0,
            seed: 0,
        };
        let (seq, truth) = generate_scene::<f64>(&cfg).unwrap();
        let f01 = truth.flow::<f64>(0.0, 1.0, 0.0, 1.0);
        let f10 = truth.flow::<f64>(1.0, 0.0, 1.0, 0.0);
        let mask = truth.interior_mask::<f64>(&[0.0], 3);
        (seq.frames[0].clone(), seq.frames[1].clone(), f01, f10, mask)
    }

    #[test]
    fn gt_estimator_returns_exact_flows_and_needs_truth() {
        let (i0, i1, f01, f10, _) = linear_scene([2.0, 0.0]);
        let est = GtFlowEstimator::exact();
        let q = FlowQuery {
            i0: &i0,
            i1: &i1,
            ground_truth: Some((&f01, &f10)),
            key: 0,
        };
        let (a, b) = est.estimate(&q).unwrap();
        assert_eq!((&a, &b), (&f01, &f10));
        assert!(!FlowEstimator::<f64>::trainable(&est));
        assert!(f01.data.channels(0, 1).data().iter().any(|&v| v == 2.0));
        let missing = FlowQuery {
            ground_truth: None,
            ..q
        };
        assert!(matches!(est.estimate(&missing), Err(Error::MissingGroundTruth(_))));
    }

    #[test]
    fn gt_estimator_on_static_scene_is_zero() {
        let (i0, i1, f01, f10, _) = linear_scene([0.0, 0.0]);
        let q = FlowQuery {
            i0: &i0,
            i1: &i1,
            ground_truth: Some((&f01, &f10)),
            key: 0,
        };
        let (a, b) = GtFlowEstimator::exact().estimate(&q).unwrap();
        assert!(a.data.data().iter().chain(b.data.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn gt_noise_matches_requested_sigma() {
        let z = FlowField::<f64>::zeros(64, 64, 0.0, 1.0);
        let img = Tensor::zeros(&[3, 64, 64]);
        let est = GtFlowEstimator::noisy(1.5, 7);
        let q = FlowQuery {
            i0: &img,
            i1: &img,
            ground_truth: Some((&z, &z)),
            key: 11,
        };
        let (a, b) = est.estimate(&q).unwrap();
        let all: Vec<f64> = a.data.data().iter().chain(b.data.data()).copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 4.0 * 1.5 / n.sqrt(), "mean {mean}");
        assert!((std - 1.5).abs() < 0.05, "std {std}");
        assert_eq!(est.estimate(&q).unwrap().0, a);
        let other = FlowQuery { key: 12, ..q };
        assert_ne!(est.estimate(&other).unwrap().0, a);
    }

    #[test]
    fn block_matching_recovers_integer_translation_inside_object() {
        let (i0, i1, f01, _, mask) = linear_scene([3.0, -1.0]);
        let est = BlockMatchingEstimator::default();
        let q = FlowQuery {
            i0: &i0,
            i1: &i1,
            ground_truth: None,
            key: 0,
        };
        let (a, b) = est.estimate(&q).unwrap();
        assert!(a.endpoint_error(&f01, Some(&mask)).unwrap() < 0.25);
        assert_eq!((b.src_time, b.dst_time), (1.0, 0.0));
        assert!(b.is_finite());
    }
}
