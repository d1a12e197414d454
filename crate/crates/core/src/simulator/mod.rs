//! Video-to-event simulation and synthetic moving-texture scenes.
//!
//! Per pixel, log-luminance is interpolated linearly between consecutive
//! frames. Every time it reaches the next contrast level above or below the
//! pixel's reference level an event is emitted at the exact crossing time and
//! the reference jumps to the crossed level.

mod scene;

pub use scene::{
    generate_scene, MotionKind, ObjectSpec, RandomSceneSpec, SceneConfig, SceneTruth, Texture, Trajectory, Wave,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{validate_stream, BoundsPolicy, Event, EventStream, Polarity, SensorSize, TimeWindow, TIME_QUANTUM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative slack when comparing a log change against a threshold; absorbs
/// the round-off of `exp`/`ln` round trips so that exact multiples of the
/// threshold fire.
const LEVEL_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub c_pos: f64,
    pub c_neg: f64,
    pub log_eps: f64,
    /// Spurious events per pixel per second.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            c_pos: 0.15,
            c_neg: 0.15,
            log_eps: 1e-3,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.c_pos) || !ok(self.c_neg) || !ok(self.log_eps) {
            return Err(Error::InvalidConfig(
                "contrast thresholds and log_eps must be positive".into(),
            ));
        }
        if !(self.noise_rate.is_finite() && self.noise_rate >= 0.0) {
            return Err(Error::InvalidConfig("noise_rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Frames `(3, H, W)` in `[0, 1]` with strictly increasing timestamps (s).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T> {
    pub frames: Vec<Tensor<T>>,
    pub timestamps: Vec<f64>,
}

impl<T: Scalar> FrameSequence<T> {
    pub fn new(frames: Vec<Tensor<T>>, timestamps: Vec<f64>) -> Result<Self> {
        let seq = Self { frames, timestamps };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.timestamps.len() || self.frames.len() < 2 {
            return Err(Error::DegenerateTimestamps);
        }
        if self.timestamps.iter().any(|t| !t.is_finite()) || self.timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DegenerateTimestamps);
        }
        let shape = self.frames[0].shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::ShapeMismatch {
                context: "frame sequence",
                expected: vec![3, 0, 0],
                found: shape.to_vec(),
            });
        }
        for f in &self.frames {
            crate::error::shape_check("frame sequence", shape, f.shape())?;
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `0.299 R + 0.587 G + 0.114 B`, as a `(1, H, W)` tensor.
pub fn luminance<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = img.chw();
    let plane = h * w;
    let (r, g, b) = (T::of(0.299), T::of(0.587), T::of(0.114));
    let d = img.data();
    Tensor::from_fn(&[1, h, w], |p| r * d[p] + g * d[plane + p] + b * d[2 * plane + p])
}

/// `ln(luma + eps)` per pixel, computed in `f64`.
pub fn log_luminance<T: Scalar>(img: &Tensor<T>, log_eps: f64) -> Vec<f64> {
    luminance(img).data().iter().map(|&v| (v.as_f64() + log_eps).ln()).collect()
}

/// Simulates the events a DVS pixel array would report while watching `seq`.
///
/// The returned window is `[t_first, t_last)`; a crossing that lands exactly
/// on the final frame time is reported one timestamp quantum earlier.
pub fn simulate<T: Scalar>(seq: &FrameSequence<T>, cfg: &SimulatorConfig) -> Result<EventStream> {
    seq.validate()?;
    cfg.validate()?;
    let (h, w) = (seq.height(), seq.width());
    if w > u16::MAX as usize + 1 || h > u16::MAX as usize + 1 {
        return Err(Error::InvalidConfig("frames exceed the 16-bit event coordinate range".into()));
    }
    let window = TimeWindow::new(seq.timestamps[0], *seq.timestamps.last().unwrap())?;
    let last_instant = window.end() - TIME_QUANTUM;
    let clamp_t = |t: f64| t.clamp(window.start(), last_instant);

    let logs: Vec<Vec<f64>> = seq.frames.iter().map(|f| log_luminance(f, cfg.log_eps)).collect();
    let mut reference = logs[0].clone();
    let mut events = Vec::new();
    for k in 0..seq.len() - 1 {
        let (t0, t1) = (seq.timestamps[k], seq.timestamps[k + 1]);
        let dt = t1 - t0;
        for (p, r) in reference.iter_mut().enumerate() {
            let (l0, l1) = (logs[k][p], logs[k + 1][p]);
            let dl = l1 - l0;
            let (x, y) = ((p % w) as u16, (p / w) as u16);
            let crossing = |level: f64| t0 + ((level - l0) / dl).clamp(0.0, 1.0) * dt;
            while l1 - *r >= cfg.c_pos * (1.0 - LEVEL_SLACK) {
                *r += cfg.c_pos;
                events.push(Event::new(x, y, clamp_t(crossing(*r)), Polarity::Positive));
            }
            while *r - l1 >= cfg.c_neg * (1.0 - LEVEL_SLACK) {
                *r -= cfg.c_neg;
                events.push(Event::new(x, y, clamp_t(crossing(*r)), Polarity::Negative));
            }
        }
    }

    if cfg.noise_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mean = cfg.noise_rate * window.duration();
        let poisson = Poisson::new(mean).map_err(|e| Error::InvalidConfig(format!("noise rate: {e}")))?;
        for p in 0..h * w {
            let n = poisson.sample(&mut rng) as usize;
            for _ in 0..n {
                let t = window.start() + rng.random::<f64>() * window.duration();
                let pol = if rng.random::<bool>() { Polarity::Positive } else { Polarity::Negative };
                events.push(Event::new((p % w) as u16, (p / w) as u16, clamp_t(t), pol));
            }
        }
    }

    let sensor = SensorSize::new(w as u32, h as u32);
    validate_stream(events, window, sensor, BoundsPolicy::Error)
}

/// Integrates events onto the log-luminance of `frame0`: `+c_pos` per
/// positive event and `-c_neg` per negative event. Returns `(1, H, W)`.
pub fn reconstruct_log<T: Scalar>(frame0: &Tensor<T>, stream: &EventStream, cfg: &SimulatorConfig) -> Result<Tensor<T>> {
    let (_, h, w) = frame0.chw();
    let sensor = stream.sensor();
    crate::error::shape_check("reconstruct_log", &[h, w], &[sensor.height as usize, sensor.width as usize])?;
    let mut log = log_luminance(frame0, cfg.log_eps);
    for e in stream.events() {
        let q = e.y as usize * w + e.x as usize;
        log[q] += match e.p {
            Polarity::Positive => cfg.c_pos,
            Polarity::Negative => -cfg.c_neg,
        };
    }
    Ok(Tensor::from_vec(&[1, h, w], log.into_iter().map(T::of).collect()))
}
