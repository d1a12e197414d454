//! Image quality metrics for images in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    shape_check("mse", a.shape(), b.shape())?;
    let n = a.len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian filter. Near borders the window is truncated to the
/// image and its weights renormalized to sum to one.
fn gaussian_filter(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &t) in taps.iter().enumerate() {
                    let o = k as isize - r;
                    let (sx, sy) = if along_x { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    acc += t * src[sy as usize * w + sx as usize];
                    norm += t;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Mean SSIM over pixels and channels with an 11x11 Gaussian window
/// (sigma 1.5) and the standard constants for a dynamic range of 1.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    shape_check("ssim", a.shape(), b.shape())?;
    let (c, h, w) = a.chw();
    let plane = h * w;
    if plane == 0 {
        return Ok(1.0);
    }
    let taps = gaussian_taps();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = gaussian_filter(&x, h, w, &taps);
        let my = gaussian_filter(&y, h, w, &taps);
        let sxx = gaussian_filter(&prod(&x, &x), h, w, &taps);
        let syy = gaussian_filter(&prod(&y, &y), h, w, &taps);
        let sxy = gaussian_filter(&prod(&x, &y), h, w, &taps);
        for i in 0..plane {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (c * plane) as f64)
}

/// Per-sample metric record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean PSNR and SSIM over records; `None` for an empty list.
pub fn aggregate(records: &[MetricRecord]) -> Option<(f64, f64)> {
    if records.is_empty() {
        return None;
    }
    let n = records.len() as f64;
    Some((
        records.iter().map(|r| r.psnr).sum::<f64>() / n,
        records.iter().map(|r| r.ssim).sum::<f64>() / n,
    ))
}
