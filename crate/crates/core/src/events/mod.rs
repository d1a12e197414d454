//! Event streams and the transforms the model consumes: voxelization, time
//! reversal and temporal slicing.
//!
//! Timestamps live on a dyadic grid of [`TIME_QUANTUM`] seconds. On that grid
//! window arithmetic such as `a + b - t` is exact in `f64`, which keeps
//! reversal an exact involution and slicing an exact partition.

mod io;

pub use io::{read_csv, read_events, write_csv, write_events, EVENT_MAGIC};

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Timestamp resolution: 2^-32 s (about 0.23 ns).
pub const TIME_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

/// Largest admissible timestamp; keeps grid arithmetic exact in `f64`.
pub const MAX_TIMESTAMP: f64 = 1_048_576.0;

/// Snaps a time in seconds onto the timestamp grid.
pub fn quantize_time(t: f64) -> f64 {
    (t / TIME_QUANTUM).round() * TIME_QUANTUM
}

fn check_time(t: f64) -> Result<f64> {
    if !t.is_finite() || t.abs() >= MAX_TIMESTAMP {
        return Err(Error::NonFiniteTimestamp(t));
    }
    Ok(quantize_time(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(p: i64) -> Result<Self> {
        match p {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(Error::InvalidPolarity(other)),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Seconds.
    pub t: f64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: f64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// Deterministic total order `(t, y, x, p)`.
pub(crate) fn event_order(a: &Event, b: &Event) -> Ordering {
    a.t.total_cmp(&b.t)
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
        .then(a.p.cmp(&b.p))
}

/// Half-open interval `[start, end)` in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeWindow {
    start: f64,
    end: f64,
}

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        let (s, e) = (check_time(start)?, check_time(end)?);
        if s >= e {
            return Err(Error::DegenerateWindow { start, end });
        }
        Ok(Self { start: s, end: e })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }

    /// Maps a normalized time `s` in `[0, 1]` to seconds on the grid.
    pub fn at_fraction(&self, s: f64) -> f64 {
        quantize_time(self.start + s * self.duration())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SensorSize {
    pub width: u32,
    pub height: u32,
}

impl SensorSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

/// What `validate_stream` does with events outside the sensor or window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BoundsPolicy {
    #[default]
    Drop,
    Error,
}

/// Time-ordered events inside a window on a fixed sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    window: TimeWindow,
    sensor: SensorSize,
}

impl EventStream {
    pub fn empty(window: TimeWindow, sensor: SensorSize) -> Self {
        Self {
            events: Vec::new(),
            window,
            sensor,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn window(&self) -> TimeWindow {
        self.window
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Sum of polarities.
    pub fn signed_sum(&self) -> i64 {
        self.events.iter().map(|e| e.p.sign() as i64).sum()
    }

    /// Builds a stream from events already known to be valid and sorted.
    pub(crate) fn from_sorted_unchecked(events: Vec<Event>, window: TimeWindow, sensor: SensorSize) -> Self {
        debug_assert!(events.windows(2).all(|w| event_order(&w[0], &w[1]) != Ordering::Greater));
        Self {
            events,
            window,
            sensor,
        }
    }

    /// Events with `t` in `[start, end)`, re-windowed. Both bounds must lie in
    /// this stream's window.
    pub fn restrict(&self, window: TimeWindow) -> Result<Self> {
        if window.start < self.window.start || window.end > self.window.end {
            return Err(Error::InvalidBoundaries(format!(
                "window [{}, {}) is not inside [{}, {})",
                window.start, window.end, self.window.start, self.window.end
            )));
        }
        let lo = self.events.partition_point(|e| e.t < window.start);
        let hi = self.events.partition_point(|e| e.t < window.end);
        Ok(Self::from_sorted_unchecked(self.events[lo..hi].to_vec(), window, self.sensor))
    }
}

/// Validates, snaps and sorts raw events into a stream.
///
/// Non-finite timestamps are always an error. Events outside the sensor or
/// the window are dropped or rejected according to `policy`.
pub fn validate_stream(
    raw: Vec<Event>,
    window: TimeWindow,
    sensor: SensorSize,
    policy: BoundsPolicy,
) -> Result<EventStream> {
    let mut events = Vec::with_capacity(raw.len());
    for mut e in raw {
        if !e.t.is_finite() {
            return Err(Error::NonFiniteTimestamp(e.t));
        }
        e.t = check_time(e.t)?;
        let in_sensor = (e.x as u32) < sensor.width && (e.y as u32) < sensor.height;
        if !in_sensor {
            match policy {
                BoundsPolicy::Drop => continue,
                BoundsPolicy::Error => {
                    return Err(Error::OutOfBoundsEvent {
                        x: e.x as i64,
                        y: e.y as i64,
                        width: sensor.width,
                        height: sensor.height,
                    })
                }
            }
        }
        if !window.contains(e.t) {
            match policy {
                BoundsPolicy::Drop => continue,
                BoundsPolicy::Error => {
                    return Err(Error::OutOfWindowEvent {
                        t: e.t,
                        start: window.start,
                        end: window.end,
                    })
                }
            }
        }
        events.push(e);
    }
    events.sort_by(event_order);
    Ok(EventStream::from_sorted_unchecked(events, window, sensor))
}

/// Time-mirrors a stream inside its window and negates polarities.
///
/// Each event maps to `(x, y, a + b - t, -p)`. The one instant whose mirror
/// would be the excluded endpoint `b`, namely `t = a`, stays at `a`; this keeps
/// the map an exact involution on `[a, b)`.
pub fn reverse(stream: &EventStream) -> EventStream {
    let (a, b) = (stream.window.start, stream.window.end);
    let mut events: Vec<Event> = stream
        .events
        .iter()
        .map(|e| Event {
            t: if e.t == a { a } else { (a + b) - e.t },
            p: e.p.flipped(),
            ..*e
        })
        .collect();
    events.sort_by(event_order);
    EventStream::from_sorted_unchecked(events, stream.window, stream.sensor)
}

/// Partitions a stream at `boundaries` into half-open sub-windows.
///
/// Boundaries must be strictly increasing, start at the window start and end
/// at the window end.
pub fn slice(stream: &EventStream, boundaries: &[f64]) -> Result<Vec<EventStream>> {
    if boundaries.len() < 2 {
        return Err(Error::InvalidBoundaries("need at least two boundaries".into()));
    }
    let bs: Vec<f64> = boundaries.iter().map(|&b| check_time(b)).collect::<Result<_>>()?;
    if bs[0] != stream.window.start || *bs.last().unwrap() != stream.window.end {
        return Err(Error::InvalidBoundaries(format!(
            "boundaries must span [{}, {}), got {:?}",
            stream.window.start, stream.window.end, boundaries
        )));
    }
    if bs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidBoundaries(format!("not strictly increasing: {boundaries:?}")));
    }
    bs.windows(2)
        .map(|w| stream.restrict(TimeWindow { start: w[0], end: w[1] }))
        .collect()
}

/// Uniform boundaries `start + i/n * duration`, `i = 0..=n`.
pub fn uniform_boundaries(window: TimeWindow, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| {
            if i == n {
                window.end
            } else {
                window.at_fraction(i as f64 / n as f64)
            }
        })
        .collect()
}

/// Discretized event volume: `B` temporal bins over the stream window.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid<T> {
    /// `(B, H, W)`.
    pub data: Tensor<T>,
    pub window: TimeWindow,
}

impl<T: Scalar> VoxelGrid<T> {
    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn total(&self) -> T {
        self.data.sum()
    }
}

/// Accumulates each event's polarity into the two temporally adjacent bins.
///
/// With `t* = (B - 1)(t - start)/(end - start)`, bin `floor(t*)` receives
/// `p (1 - frac)` and the next bin `p frac`.
pub fn voxelize<T: Scalar>(stream: &EventStream, bins: usize) -> Result<VoxelGrid<T>> {
    if bins == 0 {
        return Err(Error::InvalidConfig("voxel grid needs at least one bin".into()));
    }
    let w = stream.window;
    if w.end <= w.start {
        return Err(Error::DegenerateWindow {
            start: w.start,
            end: w.end,
        });
    }
    let (sw, sh) = (stream.sensor.width as usize, stream.sensor.height as usize);
    let plane = sw * sh;
    let mut acc = vec![0.0f64; bins * plane];
    let scale = (bins - 1) as f64 / w.duration();
    for e in &stream.events {
        let ts = ((e.t - w.start) * scale).clamp(0.0, (bins - 1) as f64);
        let k = (ts.floor() as usize).min(bins - 1);
        let frac = ts - k as f64;
        let p = e.p.sign() as f64;
        let q = e.y as usize * sw + e.x as usize;
        acc[k * plane + q] += p * (1.0 - frac);
        if frac > 0.0 {
            acc[(k + 1) * plane + q] += p * frac;
        }
    }
    Ok(VoxelGrid {
        data: Tensor::from_vec(&[bins, sh, sw], acc.into_iter().map(T::of).collect()),
        window: w,
    })
}
