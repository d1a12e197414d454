//! Optical-flow fields, time-parametrized flow fusion and differentiable
//! bilinear backward warping.
//!
//! Flows are in pixels and point from the target image into the source image:
//! `out(q) = src(q + flow(q))`.

use std::io::{Read, Write};

use crate::error::{shape_check, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    /// `(2, H, W)`: channel 0 is dx, channel 1 is dy.
    pub data: Tensor<T>,
    pub src_time: f64,
    pub dst_time: f64,
}

impl<T: Scalar> FlowField<T> {
    pub fn new(data: Tensor<T>, src_time: f64, dst_time: f64) -> Result<Self> {
        let (c, _, _) = chw_of(&data)?;
        if c != 2 {
            return Err(Error::ShapeMismatch {
                context: "flow field channels",
                expected: vec![2],
                found: vec![c],
            });
        }
        Ok(Self {
            data,
            src_time,
            dst_time,
        })
    }

    pub fn zeros(h: usize, w: usize, src_time: f64, dst_time: f64) -> Self {
        Self {
            data: Tensor::zeros(&[2, h, w]),
            src_time,
            dst_time,
        }
    }

    pub fn constant(h: usize, w: usize, dx: T, dy: T, src_time: f64, dst_time: f64) -> Self {
        let plane = h * w;
        Self {
            data: Tensor::from_fn(&[2, h, w], |i| if i < plane { dx } else { dy }),
            src_time,
            dst_time,
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn is_finite(&self) -> bool {
        self.data.all_finite()
    }

    /// Mean Euclidean distance to `other`, optionally restricted to pixels
    /// where `mask` (`(1, H, W)`) is positive.
    pub fn endpoint_error(&self, other: &Self, mask: Option<&Tensor<T>>) -> Result<f64> {
        shape_check("endpoint_error", self.data.shape(), other.data.shape())?;
        let plane = self.height() * self.width();
        let (a, b) = (self.data.data(), other.data.data());
        let mut sum = 0.0;
        let mut n = 0usize;
        for p in 0..plane {
            if let Some(m) = mask {
                if m.data()[p] <= T::zero() {
                    continue;
                }
            }
            let dx = (a[p] - b[p]).as_f64();
            let dy = (a[plane + p] - b[plane + p]).as_f64();
            sum += (dx * dx + dy * dy).sqrt();
            n += 1;
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

fn chw_of<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "expected (C, H, W)",
            expected: vec![2, 0, 0],
            found: t.shape().to_vec(),
        });
    }
    Ok(t.chw())
}

/// Time-parametrized flows to both boundary frames from bidirectional
/// boundary flows, assuming locally linear motion:
///
/// `F_t0 = -(1-t) t F_01 + t^2 F_10`, `F_t1 = (1-t)^2 F_01 - t (1-t) F_10`.
pub fn fuse_initial_flow<T: Scalar>(
    f01: &FlowField<T>,
    f10: &FlowField<T>,
    t: f64,
) -> Result<(FlowField<T>, FlowField<T>)> {
    shape_check("fuse_initial_flow", f01.data.shape(), f10.data.shape())?;
    let s = 1.0 - t;
    let (a0, b0) = (T::of(-s * t), T::of(t * t));
    let (a1, b1) = (T::of(s * s), T::of(-t * s));
    let ft0 = f01.data.zip_map(&f10.data, |p, q| a0 * p + b0 * q)?;
    let ft1 = f01.data.zip_map(&f10.data, |p, q| a1 * p + b1 * q)?;
    Ok((
        FlowField {
            data: ft0,
            src_time: t,
            dst_time: 0.0,
        },
        FlowField {
            data: ft1,
            src_time: t,
            dst_time: 1.0,
        },
    ))
}

/// Element-wise `base + delta`; time metadata comes from `base`.
pub fn compose_residual<T: Scalar>(base: &FlowField<T>, delta: &FlowField<T>) -> Result<FlowField<T>> {
    Ok(FlowField {
        data: base.data.add(&delta.data)?,
        src_time: base.src_time,
        dst_time: base.dst_time,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult<T> {
    /// `(C, H, W)` warped image.
    pub image: Tensor<T>,
    /// `(1, H, W)` in {0, 1}.
    pub validity: Tensor<T>,
}

/// Bilinear backward warp of `src` (`(C, H, W)`) by `flow`.
pub fn backward_warp<T: Scalar>(src: &Tensor<T>, flow: &FlowField<T>) -> Result<WarpResult<T>> {
    let (image, validity) = warp_forward(src, &flow.data)?;
    Ok(WarpResult { image, validity })
}

struct Footprint<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

#[inline]
fn footprint<T: Scalar>(x: usize, y: usize, dx: T, dy: T, w: usize, h: usize) -> Option<Footprint<T>> {
    let sx = T::of(x as f64) + dx;
    let sy = T::of(y as f64) + dy;
    // also rejects NaN
    let lo = T::of(-1.0);
    if !(sx > lo && sy > lo && sx < T::of(w as f64) && sy < T::of(h as f64)) {
        return None;
    }
    let (flx, fly) = (sx.floor(), sy.floor());
    Some(Footprint {
        x0: flx.to_isize().unwrap_or(-2),
        y0: fly.to_isize().unwrap_or(-2),
        fx: sx - flx,
        fy: sy - fly,
    })
}

/// The four bilinear taps `(x, y, weight, d weight/d fx, d weight/d fy)`.
#[inline]
fn taps<T: Scalar>(f: &Footprint<T>) -> [(isize, isize, T, T, T); 4] {
    let one = T::one();
    let (fx, fy) = (f.fx, f.fy);
    [
        (f.x0, f.y0, (one - fx) * (one - fy), -(one - fy), -(one - fx)),
        (f.x0 + 1, f.y0, fx * (one - fy), one - fy, -fx),
        (f.x0, f.y0 + 1, (one - fx) * fy, -fy, one - fx),
        (f.x0 + 1, f.y0 + 1, fx * fy, fy, fx),
    ]
}

#[inline]
fn inside(x: isize, y: isize, w: usize, h: usize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h
}

pub(crate) fn warp_forward<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = chw_of(src)?;
    shape_check("backward_warp flow", &[2, h, w], flow.shape())?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut valid = Tensor::zeros(&[1, h, w]);
    let (fd, sd) = (flow.data(), src.data());
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let Some(f) = footprint(x, y, fd[p], fd[plane + p], w, h) else { continue };
            let mut covered = false;
            for (tx, ty, wt, _, _) in taps(&f) {
                if wt <= T::zero() || !inside(tx, ty, w, h) {
                    continue;
                }
                covered = true;
                let q = ty as usize * w + tx as usize;
                for ch in 0..c {
                    let v = out.data()[ch * plane + p] + wt * sd[ch * plane + q];
                    out.data_mut()[ch * plane + p] = v;
                }
            }
            if covered {
                valid.data_mut()[p] = T::one();
            }
        }
    }
    Ok((out, valid))
}

/// Vector-Jacobian product of [`warp_forward`] w.r.t. source and flow.
pub(crate) fn warp_backward<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = src.chw();
    let plane = h * w;
    let mut gs = Tensor::zeros(&[c, h, w]);
    let mut gf = Tensor::zeros(&[2, h, w]);
    let (fd, sd, gd) = (flow.data(), src.data(), g.data());
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let Some(f) = footprint(x, y, fd[p], fd[plane + p], w, h) else { continue };
            let (mut gdx, mut gdy) = (T::zero(), T::zero());
            for (tx, ty, wt, dwx, dwy) in taps(&f) {
                if !inside(tx, ty, w, h) {
                    continue;
                }
                let q = ty as usize * w + tx as usize;
                for ch in 0..c {
                    let go = gd[ch * plane + p];
                    let v = gs.data()[ch * plane + q] + wt * go;
                    gs.data_mut()[ch * plane + q] = v;
                    gdx += go * dwx * sd[ch * plane + q];
                    gdy += go * dwy * sd[ch * plane + q];
                }
            }
            gf.data_mut()[p] = gdx;
            gf.data_mut()[plane + p] = gdy;
        }
    }
    (gs, gf)
}

const FLOW_MAGIC: &[u8; 4] = b"FLO2";

/// Writes `FLO2` + u32 W + u32 H + row-major little-endian f32 `(dx, dy)` pairs.
pub fn write_flow<T: Scalar>(mut out: impl Write, flow: &FlowField<T>) -> Result<()> {
    let (h, w) = (flow.height(), flow.width());
    let plane = h * w;
    let mut buf = Vec::with_capacity(12 + plane * 8);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    let d = flow.data.data();
    for p in 0..plane {
        buf.extend_from_slice(&d[p].as_f32().to_le_bytes());
        buf.extend_from_slice(&d[plane + p].as_f32().to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a `FLO2` file; the time metadata is supplied by the caller.
pub fn read_flow<T: Scalar>(mut input: impl Read, src_time: f64, dst_time: f64) -> Result<FlowField<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(Error::CorruptFlowFile("bad magic".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let plane = w * h;
    if bytes.len() != 12 + plane * 8 {
        return Err(Error::CorruptFlowFile(format!(
            "expected {} payload bytes, found {}",
            plane * 8,
            bytes.len() - 12
        )));
    }
    let mut data = Tensor::zeros(&[2, h, w]);
    for (p, chunk) in bytes[12..].chunks_exact(8).enumerate() {
        let dx = f32::from_le_bytes(chunk[..4].try_into().unwrap());
        let dy = f32::from_le_bytes(chunk[4..].try_into().unwrap());
        data.data_mut()[p] = T::of(dx as f64);
        data.data_mut()[plane + p] = T::of(dy as f64);
    }
    FlowField::new(data, src_time, dst_time)
}
