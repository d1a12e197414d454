//! Parametric moving-texture scenes with analytic ground-truth motion.
//!
//! Time is measured in frames (`tau`, possibly fractional); frame `i` is shown
//! at `i / frame_rate` seconds. Pixel `(x, y)` covers `[x, x+1) x [y, y+1)`.
//! Objects are axis-aligned textured rectangles whose top-left corner follows
//! a trajectory; edges are anti-aliased by exact area coverage and textures
//! are smooth analytic functions of object-local coordinates.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrameSequence;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    pub amplitude: [f64; 3],
    /// Angular frequencies along local x and y (radians per pixel).
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
}

/// `base + sum(amplitude * sin(kx u + ky v + phase))`, clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub base: [f64; 3],
    #[serde(default)]
    pub waves: Vec<Wave>,
}

impl Texture {
    pub fn flat(rgb: [f64; 3]) -> Self {
        Self {
            base: rgb,
            waves: Vec::new(),
        }
    }

    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (w.kx * u + w.ky * v + w.phase).sin();
            for (ch, a) in c.iter_mut().zip(w.amplitude) {
                *ch += a * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// Random smooth texture with wavelengths in `[min_period, 3 min_period]`.
    pub fn random(rng: &mut impl Rng, n_waves: usize, min_period: f64) -> Self {
        let base = [0.0; 3].map(|_: f64| rng.random_range(0.3..0.7));
        let waves = (0..n_waves)
            .map(|_| {
                let period = rng.random_range(min_period..3.0 * min_period);
                let angle = rng.random_range(0.0..PI);
                let k = 2.0 * PI / period;
                let a = rng.random_range(0.06..0.16);
                Wave {
                    amplitude: [0.0; 3].map(|_: f64| a * rng.random_range(0.5..1.0)),
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            })
            .collect();
        Self { base, waves }
    }
}

/// Path of an object's top-left corner, in pixels, as a function of frame time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// `start + velocity * tau`
    Linear { start: [f64; 2], velocity: [f64; 2] },
    /// `start + velocity * tau + accel * tau^2`
    Quadratic {
        start: [f64; 2],
        velocity: [f64; 2],
        accel: [f64; 2],
    },
    /// `center + amplitude * sin(2 pi tau / period + phase)`
    Sinusoidal {
        center: [f64; 2],
        amplitude: [f64; 2],
        period: f64,
        phase: f64,
    },
}

impl Trajectory {
    pub fn position(&self, tau: f64) -> [f64; 2] {
        match self {
            Trajectory::Linear { start, velocity } => [start[0] + velocity[0] * tau, start[1] + velocity[1] * tau],
            Trajectory::Quadratic { start, velocity, accel } => [
                start[0] + velocity[0] * tau + accel[0] * tau * tau,
                start[1] + velocity[1] * tau + accel[1] * tau * tau,
            ],
            Trajectory::Sinusoidal {
                center,
                amplitude,
                period,
                phase,
            } => {
                let s = (2.0 * PI * tau / period + phase).sin();
                [center[0] + amplitude[0] * s, center[1] + amplitude[1] * s]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let Trajectory::Sinusoidal { period, .. } = self {
            if !(period.is_finite() && *period > 0.0) {
                return Err(Error::InvalidScene("sinusoidal period must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub texture: Texture,
    /// `(width, height)` in pixels.
    pub size: [f64; 2],
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// `(W, H)`.
    pub canvas: [usize; 2],
    pub background: Texture,
    /// Drawn in order; later objects occlude earlier ones.
    pub objects: Vec<ObjectSpec>,
    pub n_frames: usize,
    pub frame_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Static,
    Linear,
    Nonlinear,
    Mixed,
}

/// Parameters for sampling random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomSceneSpec {
    pub canvas: [usize; 2],
    pub n_frames: usize,
    pub frame_rate: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub motion: MotionKind,
    /// Largest per-axis speed, pixels per frame.
    pub max_speed: f64,
    /// Largest per-axis quadratic coefficient, pixels per frame^2.
    pub max_accel: f64,
    /// Shortest texture wavelength in pixels.
    pub min_period: f64,
}

impl Default for RandomSceneSpec {
    fn default() -> Self {
        Self {
            canvas: [64, 64],
            n_frames: 5,
            frame_rate: 30.0,
            min_objects: 1,
            max_objects: 2,
            motion: MotionKind::Linear,
            max_speed: 2.0,
            max_accel: 0.5,
            min_period: 10.0,
        }
    }
}

impl SceneConfig {
    /// Samples a scene whose objects stay at least partially visible.
    pub fn random(spec: &RandomSceneSpec, seed: u64) -> Result<Self> {
        if spec.max_objects == 0 || spec.min_objects > spec.max_objects {
            return Err(Error::EmptyScene);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last_err = Error::EmptyScene;
        for _ in 0..64 {
            match Self::sample(spec, seed, &mut rng) {
                Ok(cfg) => return Ok(cfg),
                Err(e) => last_err = e,
            }
        }
        Err(last_err)
    }

    fn sample(spec: &RandomSceneSpec, seed: u64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let [w, h] = spec.canvas;
        let (wf, hf) = (w as f64, h as f64);
        let n = rng.random_range(spec.min_objects.max(1)..=spec.max_objects);
        let background = Texture::random(rng, 3, spec.min_period);
        let mut objects = Vec::with_capacity(n);
        let last = (spec.n_frames.max(2) - 1) as f64;
        for i in 0..n {
            let size = [rng.random_range(wf * 0.25..wf * 0.45), rng.random_range(hf * 0.25..hf * 0.45)];
            let nonlinear = match spec.motion {
                MotionKind::Nonlinear => true,
                MotionKind::Mixed => i % 2 == 1 || rng.random_bool(0.5),
                _ => false,
            };
            let mut speed = || {
                if spec.motion == MotionKind::Static {
                    0.0
                } else {
                    rng.random_range(-spec.max_speed..=spec.max_speed)
                }
            };
            let velocity = [speed(), speed()];
            // keep the mid-sequence centre near the canvas centre region
            let mid = last / 2.0;
            let centre = [rng.random_range(wf * 0.3..wf * 0.7), rng.random_range(hf * 0.3..hf * 0.7)];
            let trajectory = if nonlinear && rng.random_bool(0.5) {
                let period = rng.random_range(last * 1.2..last * 3.0).max(2.0);
                let amplitude = [0.0; 2].map(|_: f64| {
                    let a = rng.random_range(0.5..1.0) * spec.max_speed * period / (2.0 * PI);
                    if rng.random_bool(0.5) { a } else { -a }
                });
                let phase = rng.random_range(0.0..2.0 * PI);
                Trajectory::Sinusoidal {
                    center: [centre[0] - size[0] / 2.0, centre[1] - size[1] / 2.0],
                    amplitude,
                    period,
                    phase,
                }
            } else if nonlinear {
                let accel = [0.0; 2].map(|_: f64| {
                    let a = rng.random_range(0.4..1.0) * spec.max_accel;
                    if rng.random_bool(0.5) { a } else { -a }
                });
                let start = [
                    centre[0] - size[0] / 2.0 - velocity[0] * mid - accel[0] * mid * mid,
                    centre[1] - size[1] / 2.0 - velocity[1] * mid - accel[1] * mid * mid,
                ];
                Trajectory::Quadratic { start, velocity, accel }
            } else {
                let start = [
                    centre[0] - size[0] / 2.0 - velocity[0] * mid,
                    centre[1] - size[1] / 2.0 - velocity[1] * mid,
                ];
                Trajectory::Linear { start, velocity }
            };
            objects.push(ObjectSpec {
                texture: Texture::random(rng, 2, spec.min_period),
                size,
                trajectory,
            });
        }
        let cfg = SceneConfig {
            canvas: spec.canvas,
            background,
            objects,
            n_frames: spec.n_frames,
            frame_rate: spec.frame_rate,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::EmptyScene);
        }
        let [w, h] = self.canvas;
        if w == 0 || h == 0 || w > u16::MAX as usize || h > u16::MAX as usize {
            return Err(Error::InvalidScene(format!("bad canvas {w}x{h}")));
        }
        if self.n_frames < 2 {
            return Err(Error::InvalidScene("a scene needs at least two frames".into()));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::InvalidScene("frame_rate must be positive".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            o.trajectory.validate()?;
            if !(o.size[0] > 0.0 && o.size[1] > 0.0) {
                return Err(Error::InvalidScene(format!("object {i} has non-positive size")));
            }
            for f in 0..self.n_frames {
                let [px, py] = o.trajectory.position(f as f64);
                let visible = px < w as f64 && py < h as f64 && px + o.size[0] > 0.0 && py + o.size[1] > 0.0;
                if !visible {
                    return Err(Error::InvalidScene(format!("object {i} leaves the canvas at frame {f}")));
                }
            }
        }
        Ok(())
    }
}

/// Analytic description of a generated scene: renders any frame time and
/// reports exact displacements between any two times.
#[derive(Clone, Debug)]
pub struct SceneTruth {
    pub config: SceneConfig,
}

/// Overlap length of `[a, a+len)` with the unit cell `[cell, cell+1)`.
#[inline]
fn overlap(a: f64, len: f64, cell: f64) -> f64 {
    ((a + len).min(cell + 1.0) - a.max(cell)).max(0.0)
}

impl SceneTruth {
    pub fn frame_time(&self, tau: f64) -> f64 {
        tau / self.config.frame_rate
    }

    /// Coverage of pixel `(x, y)` by object `i` at frame time `tau`.
    fn coverage(&self, i: usize, tau: f64, x: usize, y: usize) -> f64 {
        let o = &self.config.objects[i];
        let [px, py] = o.trajectory.position(tau);
        overlap(px, o.size[0], x as f64) * overlap(py, o.size[1], y as f64)
    }

    pub fn render<T: Scalar>(&self, tau: f64) -> Tensor<T> {
        let [w, h] = self.config.canvas;
        let plane = w * h;
        let positions: Vec<[f64; 2]> = self.config.objects.iter().map(|o| o.trajectory.position(tau)).collect();
        let mut img = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut c = self.config.background.sample(cx, cy);
                for (o, &[px, py]) in self.config.objects.iter().zip(&positions) {
                    let a = overlap(px, o.size[0], x as f64) * overlap(py, o.size[1], y as f64);
                    if a <= 0.0 {
                        continue;
                    }
                    let u = (cx - px).clamp(0.0, o.size[0]);
                    let v = (cy - py).clamp(0.0, o.size[1]);
                    let t = o.texture.sample(u, v);
                    for ch in 0..3 {
                        c[ch] = a * t[ch] + (1.0 - a) * c[ch];
                    }
                }
                for (ch, v) in c.iter().enumerate() {
                    img.data_mut()[ch * plane + y * w + x] = T::of(*v);
                }
            }
        }
        img
    }

    /// Index of the topmost object covering more than half of the pixel.
    fn owner(&self, tau: f64, x: usize, y: usize) -> Option<usize> {
        (0..self.config.objects.len()).rev().find(|&i| self.coverage(i, tau, x, y) > 0.5)
    }

    /// Displacement from time `tau_a` to `tau_b` for pixels of frame `tau_a`:
    /// the owning object's motion, zero on background.
    pub fn flow<T: Scalar>(&self, tau_a: f64, tau_b: f64, src_time: f64, dst_time: f64) -> FlowField<T> {
        let [w, h] = self.config.canvas;
        let plane = w * h;
        let disp: Vec<[f64; 2]> = self
            .config
            .objects
            .iter()
            .map(|o| {
                let (a, b) = (o.trajectory.position(tau_a), o.trajectory.position(tau_b));
                [b[0] - a[0], b[1] - a[1]]
            })
            .collect();
        let mut data = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                if let Some(i) = self.owner(tau_a, x, y) {
                    data.data_mut()[y * w + x] = T::of(disp[i][0]);
                    data.data_mut()[plane + y * w + x] = T::of(disp[i][1]);
                }
            }
        }
        FlowField {
            data,
            src_time,
            dst_time,
        }
    }

    /// `(1, H, W)` mask of pixels that, at every time in `taus`, are fully
    /// covered by one and the same object with nothing drawn over it, eroded
    /// by `erosion` pixels.
    pub fn interior_mask<T: Scalar>(&self, taus: &[f64], erosion: usize) -> Tensor<T> {
        let [w, h] = self.config.canvas;
        let n = self.config.objects.len();
        let solid = |x: usize, y: usize| -> bool {
            let mut owner = None;
            for &tau in taus {
                let full: Vec<usize> = (0..n).filter(|&i| self.coverage(i, tau, x, y) >= 1.0).collect();
                let Some(&top) = full.last() else { return false };
                if (top + 1..n).any(|j| self.coverage(j, tau, x, y) > 0.0) {
                    return false;
                }
                if owner.is_some_and(|o| o != top) {
                    return false;
                }
                owner = Some(top);
            }
            true
        };
        let base: Vec<bool> = (0..h * w).map(|p| solid(p % w, p / w)).collect();
        let e = erosion as isize;
        Tensor::from_fn(&[1, h, w], |p| {
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            let keep = (-e..=e).all(|dy| {
                (-e..=e).all(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize && base[ny as usize * w + nx as usize]
                })
            });
            if keep {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Renders the configured frames; the returned truth answers flow queries.
pub fn generate_scene<T: Scalar>(cfg: &SceneConfig) -> Result<(FrameSequence<T>, SceneTruth)> {
    cfg.validate()?;
    let truth = SceneTruth { config: cfg.clone() };
    let frames = (0..cfg.n_frames).map(|i| truth.render(i as f64)).collect();
    let timestamps = (0..cfg.n_frames).map(|i| truth.frame_time(i as f64)).collect();
    Ok((FrameSequence::new(frames, timestamps)?, truth))
}
