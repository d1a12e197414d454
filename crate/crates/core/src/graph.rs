//! Reverse-mode automatic differentiation on a per-forward tape.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! output value. [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of a scalar node with respect to every parameter selected by the
//! mask and every input created with [`Graph::input_with_grad`].

use crate::error::{shape_check, Result};
use crate::flow::{warp_backward, warp_forward};
use crate::params::{ParamGrads, ParamId, ParamMask, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Channels { x: Var, start: usize },
    LeakyRelu(Var, T),
    Sigmoid(Var),
    AvgPool2(Var),
    Upsample2(Var),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Pad(Var),
    Crop(Var),
    Clamp(Var, T, T),
    Warp { src: Var, flow: Var },
    SoftmaxBlend { cands: Vec<Var>, logits: Var, masks: Option<Vec<Tensor<T>>> },
    Blend2 { w: Var, a: Var, b: Var },
    MeanAbs(Var),
    MeanSq(Var),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    mask: Option<&'a ParamMask>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    per_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to an input or parameter node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.per_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient into `acc`.
    pub fn accumulate_into(&self, acc: &mut ParamGrads<T>) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.per_node[node] {
                acc.accumulate(id, g);
            }
        }
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A tape reading parameters from `store`. Only parameters selected by
    /// `mask` receive gradients; `None` treats all parameters as constants.
    pub fn new(store: &'a ParamStore<T>, mask: Option<&'a ParamMask>) -> Self {
        Self {
            store,
            mask,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(id), None) => self.store.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t, false)
    }

    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.mask.is_some_and(|m| m.contains(id));
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same-padded, stride-1 2-D convolution. `w` is `(C_out, C_in, K, K)`
    /// with odd `K`; `b` is `(C_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let (xv, wv) = (self.value(x), self.value(w));
            conv_forward(xv, wv, b.map(|b| self.value(b)))?
        };
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Op::Conv2d { x, w, b }, out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), out, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let out = {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_channels(&refs)?
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::Concat(parts.to_vec()), out, ng))
    }

    pub fn channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).channels(start, len);
        let ng = self.ng(x);
        self.push(Op::Channels { x, start }, out, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.ng(x);
        self.push(Op::LeakyRelu(x, slope), out, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(Op::Sigmoid(x), out, ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2(self.value(x));
        let ng = self.ng(x);
        self.push(Op::AvgPool2(x), out, ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = upsample2(self.value(x));
        let ng = self.ng(x);
        self.push(Op::Upsample2(x), out, ng)
    }

    /// Per-channel normalization to zero mean and unit variance, no affine.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let eps = T::of(1e-5);
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let plane = h * w;
        let n = T::of(plane as f64);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let s = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
            let mean = s.iter().copied().sum::<T>() / n;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in s.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(Op::InstanceNorm { x, inv_std }, out, ng)
    }

    /// Zero-pads bottom/right to `(h, w)`.
    pub fn pad_to(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (c, xh, xw) = xv.chw();
        assert!(h >= xh && w >= xw);
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..xh {
                let src = &xv.data()[(ch * xh + y) * xw..][..xw];
                out.data_mut()[(ch * h + y) * w..][..xw].copy_from_slice(src);
            }
        }
        let ng = self.ng(x);
        self.push(Op::Pad(x), out, ng)
    }

    /// Keeps the top-left `(h, w)` window.
    pub fn crop_to(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (c, xh, xw) = xv.chw();
        assert!(h <= xh && w <= xw);
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                let src = &xv.data()[(ch * xh + y) * xw..][..w];
                out.data_mut()[(ch * h + y) * w..][..w].copy_from_slice(src);
            }
        }
        let ng = self.ng(x);
        self.push(Op::Crop(x), out, ng)
    }

    /// Gradient passes where `lo <= x <= hi`, including the bounds themselves.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).clamp(lo, hi);
        let ng = self.ng(x);
        self.push(Op::Clamp(x, lo, hi), out, ng)
    }

    /// Bilinear backward warp of `src` by a target-to-source `flow`.
    /// Returns the warped image and its (non-differentiable) validity mask.
    pub fn warp(&mut self, src: Var, flow: Var) -> Result<(Var, Tensor<T>)> {
        let (out, mask) = warp_forward(self.value(src), self.value(flow))?;
        let ng = self.ng(src) || self.ng(flow);
        Ok((self.push(Op::Warp { src, flow }, out, ng), mask))
    }

    /// Per-pixel softmax-weighted average of same-shaped candidates.
    ///
    /// `logits` holds one channel per candidate. Candidates whose mask is 0 at
    /// a pixel are excluded there; pixels with no admissible candidate are 0.
    pub fn softmax_blend(
        &mut self,
        cands: &[Var],
        logits: Var,
        masks: Option<Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let out = {
            let cv: Vec<&Tensor<T>> = cands.iter().map(|&c| self.value(c)).collect();
            let (weights, _) = blend_weights(self.value(logits), masks.as_deref(), cands.len())?;
            let (c, h, w) = cv[0].chw();
            let plane = h * w;
            let mut out = Tensor::zeros(&[c, h, w]);
            for (i, cand) in cv.iter().enumerate() {
                shape_check("softmax_blend", &[c, h, w], cand.shape())?;
                let wi = &weights[i * plane..(i + 1) * plane];
                for ch in 0..c {
                    let o = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
                    let s = &cand.data()[ch * plane..(ch + 1) * plane];
                    for p in 0..plane {
                        o[p] += wi[p] * s[p];
                    }
                }
            }
            out
        };
        let ng = self.ng(logits) || cands.iter().any(|&c| self.ng(c));
        Ok(self.push(
            Op::SoftmaxBlend {
                cands: cands.to_vec(),
                logits,
                masks,
            },
            out,
            ng,
        ))
    }

    /// `w * a + (1 - w) * b` with a single-channel `w` broadcast over channels.
    pub fn blend2(&mut self, w: Var, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (wv, av, bv) = (self.value(w), self.value(a), self.value(b));
            shape_check("blend2", av.shape(), bv.shape())?;
            let (c, h, wd) = av.chw();
            shape_check("blend2 weights", &[1, h, wd], wv.shape())?;
            let plane = h * wd;
            Tensor::from_fn(&[c, h, wd], |i| {
                let wp = wv.data()[i % plane];
                wp * av.data()[i] + (T::one() - wp) * bv.data()[i]
            })
        };
        let ng = self.ng(w) || self.ng(a) || self.ng(b);
        Ok(self.push(Op::Blend2 { w, a, b }, out, ng))
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.len().max(1) as f64);
        let out = Tensor::scalar(xv.data().iter().map(|v| v.abs()).sum::<T>() / n);
        let ng = self.ng(x);
        self.push(Op::MeanAbs(x), out, ng)
    }

    pub fn mean_sq(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.len().max(1) as f64);
        let out = Tensor::scalar(xv.sum_sq() / n);
        let ng = self.ng(x);
        self.push(Op::MeanSq(x), out, ng)
    }

    /// Mean absolute error between two nodes.
    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        Ok(self.mean_abs(d))
    }

    /// Reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut params = Vec::new();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    params.push((*id, i));
                    grads[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            let out = node.value.as_ref().expect("op nodes carry values");
            self.backward_op(&node.op, out, &g, &mut grads);
        }
        Gradients {
            per_node: grads,
            params,
        }
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.axpy(T::one(), &t),
                slot @ None => *slot = Some(t),
            }
        };
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Conv2d { x, w, b } => {
                let (gx, gw, gb) = conv_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x * y).expect("shape"));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(av, |x, y| x * y).expect("shape"));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[0];
                    acc(p, g.channels(start, c));
                    start += c;
                }
            }
            Op::Channels { x, start } => {
                let xv = self.value(*x);
                let (_, h, w) = xv.chw();
                let mut gx = Tensor::zeros(xv.shape());
                let off = start * h * w;
                gx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                acc(*x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    g.zip_map(xv, |gv, v| if v > T::zero() { gv } else { gv * *slope })
                        .expect("shape"),
                );
            }
            Op::Sigmoid(x) => {
                acc(*x, g.zip_map(out, |gv, s| gv * s * (T::one() - s)).expect("shape"));
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let quarter = T::of(0.25);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..oh * 2 {
                        for xx in 0..ow * 2 {
                            let v = g.data()[(ch * oh + y / 2) * ow + xx / 2] * quarter;
                            gx.data_mut()[(ch * h + y) * w + xx] = v;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let mut gx = Tensor::zeros(&[c, h, w]);
                let ow = 2 * w;
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            gx.data_mut()[(ch * h + y / 2) * w + xx / 2] +=
                                g.data()[(ch * 2 * h + y) * ow + xx];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let (c, h, w) = out.chw();
                let plane = h * w;
                let n = T::of(plane as f64);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    let (gs, ys) = (&g.data()[r.clone()], &out.data()[r.clone()]);
                    let mg = gs.iter().copied().sum::<T>() / n;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (o, (&gv, &yv)) in gx.data_mut()[r].iter_mut().zip(gs.iter().zip(ys)) {
                        *o = inv_std[ch] * (gv - mg - yv * mgy);
                    }
                }
                acc(*x, gx);
            }
            Op::Pad(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, ph, pw) = g.chw();
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..h {
                        gx.data_mut()[(ch * h + y) * w..][..w]
                            .copy_from_slice(&g.data()[(ch * ph + y) * pw..][..w]);
                    }
                }
                acc(*x, gx);
            }
            Op::Crop(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = g.chw();
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..oh {
                        gx.data_mut()[(ch * h + y) * w..][..ow]
                            .copy_from_slice(&g.data()[(ch * oh + y) * ow..][..ow]);
                    }
                }
                acc(*x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    g.zip_map(xv, |gv, v| if v >= *lo && v <= *hi { gv } else { T::zero() })
                        .expect("shape"),
                );
            }
            Op::Warp { src, flow } => {
                let (gs, gf) = warp_backward(self.value(*src), self.value(*flow), g);
                if self.ng(*src) {
                    acc(*src, gs);
                }
                if self.ng(*flow) {
                    acc(*flow, gf);
                }
            }
            Op::SoftmaxBlend { cands, logits, masks } => {
                let lv = self.value(*logits);
                let (weights, _) = blend_weights(lv, masks.as_deref(), cands.len()).expect("checked in forward");
                let (c, h, w) = out.chw();
                let plane = h * w;
                let mut gl = Tensor::zeros(lv.shape());
                for (i, &cand) in cands.iter().enumerate() {
                    let cv = self.value(cand);
                    let wi = &weights[i * plane..(i + 1) * plane];
                    if self.ng(cand) {
                        let mut gc = Tensor::zeros(&[c, h, w]);
                        for ch in 0..c {
                            for p in 0..plane {
                                gc.data_mut()[ch * plane + p] = wi[p] * g.data()[ch * plane + p];
                            }
                        }
                        acc(cand, gc);
                    }
                    // d out / d l_i = w_i (c_i - out)
                    for p in 0..plane {
                        let mut s = T::zero();
                        for ch in 0..c {
                            let k = ch * plane + p;
                            s += g.data()[k] * (cv.data()[k] - out.data()[k]);
                        }
                        gl.data_mut()[i * plane + p] = wi[p] * s;
                    }
                }
                acc(*logits, gl);
            }
            Op::Blend2 { w, a, b } => {
                let (wv, av, bv) = (self.value(*w), self.value(*a), self.value(*b));
                let (c, h, wd) = av.chw();
                let plane = h * wd;
                if self.ng(*a) {
                    acc(*a, Tensor::from_fn(&[c, h, wd], |i| g.data()[i] * wv.data()[i % plane]));
                }
                if self.ng(*b) {
                    acc(
                        *b,
                        Tensor::from_fn(&[c, h, wd], |i| g.data()[i] * (T::one() - wv.data()[i % plane])),
                    );
                }
                if self.ng(*w) {
                    let mut gw = Tensor::zeros(&[1, h, wd]);
                    for i in 0..c * plane {
                        gw.data_mut()[i % plane] += g.data()[i] * (av.data()[i] - bv.data()[i]);
                    }
                    acc(*w, gw);
                }
            }
            Op::MeanAbs(x) => {
                let xv = self.value(*x);
                let s = g.item() / T::of(xv.len().max(1) as f64);
                acc(
                    *x,
                    xv.map(|v| {
                        if v > T::zero() {
                            s
                        } else if v < T::zero() {
                            -s
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::MeanSq(x) => {
                let xv = self.value(*x);
                let s = T::of(2.0) * g.item() / T::of(xv.len().max(1) as f64);
                acc(*x, xv.scale(s));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Softmax weights per pixel, laid out `(n, H, W)`; the bool marks pixels
/// with at least one admissible candidate.
fn blend_weights<T: Scalar>(
    logits: &Tensor<T>,
    masks: Option<&[Tensor<T>]>,
    n: usize,
) -> Result<(Vec<T>, Vec<bool>)> {
    let (lc, h, w) = logits.chw();
    shape_check("softmax_blend logits", &[n], &[lc])?;
    let plane = h * w;
    if let Some(ms) = masks {
        shape_check("softmax_blend masks", &[n], &[ms.len()])?;
        for m in ms {
            shape_check("softmax_blend mask", &[1, h, w], m.shape())?;
        }
    }
    let admissible = |i: usize, p: usize| masks.is_none_or(|ms| ms[i].data()[p] > T::zero());
    let mut weights = vec![T::zero(); n * plane];
    let mut any = vec![false; plane];
    for p in 0..plane {
        let mut mx = T::neg_infinity();
        for i in 0..n {
            if admissible(i, p) {
                mx = mx.max(logits.data()[i * plane + p]);
            }
        }
        if mx == T::neg_infinity() {
            continue;
        }
        any[p] = true;
        let mut z = T::zero();
        for i in 0..n {
            if admissible(i, p) {
                let e = (logits.data()[i * plane + p] - mx).exp();
                weights[i * plane + p] = e;
                z += e;
            }
        }
        for i in 0..n {
            weights[i * plane + p] /= z;
        }
    }
    Ok((weights, any))
}

fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let y = (i / ow) % oh;
        let xx = i % ow;
        let base = (ch * h + 2 * y) * w + 2 * xx;
        let d = x.data();
        (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]) * quarter
    })
}

fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (2 * h, 2 * w);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let y = (i / ow) % oh;
        let xx = i % ow;
        x.data()[(ch * h + y / 2) * w + xx / 2]
    })
}

fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (c, h, w) = x.chw();
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut cols = vec![T::zero(); c * k * k * plane];
    for ch in 0..c {
        let src = &x.data()[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let srow = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[srow + sx0..srow + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let dst = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    let drow = sy as usize * w;
                    for xx in x0..x1 {
                        dst[drow + (xx as isize + dx) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (c, h, wd) = x.chw();
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(crate::Error::ShapeMismatch {
            context: "conv2d weight",
            expected: vec![ws.first().copied().unwrap_or(0), c, 3, 3],
            found: ws.to_vec(),
        });
    }
    let (co, k) = (ws[0], ws[2]);
    let plane = h * wd;
    let ck = c * k * k;
    let mut out = Tensor::zeros(&[co, h, wd]);
    if let Some(b) = b {
        shape_check("conv2d bias", &[co], b.shape())?;
        for o in 0..co {
            out.data_mut()[o * plane..(o + 1) * plane].fill(b.data()[o]);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    if k == 1 {
        T::gemm(co, ck, plane, T::one(), w.data(), ck as isize, 1, x.data(), plane as isize, 1, beta, out.data_mut(), plane as isize, 1);
    } else {
        let cols = im2col(x, k);
        T::gemm(co, ck, plane, T::one(), w.data(), ck as isize, 1, &cols, plane as isize, 1, beta, out.data_mut(), plane as isize, 1);
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (c, h, wd) = x.chw();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let plane = h * wd;
    let ck = c * k * k;
    let gb = Tensor::from_fn(&[co], |o| g.data()[o * plane..(o + 1) * plane].iter().copied().sum());

    let gw = need_w.then(|| {
        let mut gw = Tensor::zeros(w.shape());
        let owned;
        let cols: &[T] = if k == 1 {
            x.data()
        } else {
            owned = im2col(x, k);
            &owned
        };
        T::gemm(co, plane, ck, T::one(), g.data(), plane as isize, 1, cols, 1, plane as isize, T::zero(), gw.data_mut(), ck as isize, 1);
        gw
    });
    let gx = need_x.then(|| {
        let mut gcols = vec![T::zero(); ck * plane];
        T::gemm(ck, co, plane, T::one(), w.data(), 1, ck as isize, g.data(), plane as isize, 1, T::zero(), &mut gcols, plane as isize, 1);
        if k == 1 {
            Tensor::from_vec(&[c, h, wd], gcols)
        } else {
            col2im(&gcols, c, h, wd, k)
        }
    });
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, wd) = x.chw();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let p = (k / 2) as isize;
        Tensor::from_fn(&[co, h, wd], |i| {
            let o = i / (h * wd);
            let y = (i / wd) % h;
            let xx = i % wd;
            let mut s = b.data()[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            s += w.data()[((o * c + ci) * k + ky) * k + kx] * x.at(ci, sy as usize, sx as usize);
                        }
                    }
                }
            }
            s
        })
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_summation() {
        let store = ParamStore::new();
        for k in [1usize, 3, 5] {
            let x = Tensor::from_vec(&[3, 5, 6], pseudo(90, 0.7));
            let w = Tensor::from_vec(&[4, 3, k, k], pseudo(12 * k * k, 1.3));
            let b = Tensor::from_vec(&[4], pseudo(4, 2.1));
            let mut g = Graph::new(&store, None);
            let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv)).unwrap();
            let expect = naive_conv(&x, &w, &b);
            for (a, e) in g.value(y).data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-12, "k={k}");
            }
        }
    }

    /// Central-difference check of d(sum(out * probe))/d(input).
    fn check_grad(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Tensor<f64>) {
        let store = ParamStore::new();
        let probe = |g: &mut Graph<f64>, y: Var| {
            let shape = g.value(y).shape().to_vec();
            let n: usize = shape.iter().product();
            let p = g.input(Tensor::from_vec(&shape, pseudo(n, 0.91)));
            let m = g.mul(y, p).unwrap();
            g.mean_abs(m)
        };
        let mut g = Graph::new(&store, None);
        let x = g.input_with_grad(x0.clone());
        let y = build(&mut g, x);
        let l = probe(&mut g, y);
        let grads = g.backward(l);
        let analytic = grads.wrt(x).unwrap().clone();
        let eps = 1e-6;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut xt = x0.clone();
                xt.data_mut()[i] += d;
                let mut g = Graph::new(&store, None);
                let x = g.input(xt);
                let y = build(&mut g, x);
                let l = probe(&mut g, y);
                g.value(l).item()
            };
            let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!(
                (num - analytic.data()[i]).abs() < 1e-6,
                "component {i}: numeric {num} analytic {}",
                analytic.data()[i]
            );
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let x0 = Tensor::from_vec(&[2, 4, 4], pseudo(32, 0.37));
        check_grad(|g, x| g.avg_pool2(x), x0.clone());
        check_grad(|g, x| g.upsample2(x), x0.clone());
        check_grad(|g, x| g.instance_norm(x), x0.clone());
        check_grad(|g, x| g.sigmoid(x), x0.clone());
        check_grad(|g, x| g.leaky_relu(x, 0.1), x0.clone());
        check_grad(|g, x| { let p = g.pad_to(x, 6, 5); g.crop_to(p, 3, 3) }, x0.clone());
        check_grad(
            |g, x| {
                let w = g.input(Tensor::from_vec(&[3, 2, 3, 3], pseudo(54, 0.53)));
                g.conv2d(x, w, None).unwrap()
            },
            x0.clone(),
        );
        check_grad(
            |g, x| {
                let a = g.channels(x, 0, 1);
                let b = g.channels(x, 1, 1);
                let l = g.concat(&[a, b]).unwrap();
                let c = g.channels(x, 0, 1);
                g.softmax_blend(&[c, a], l, None).unwrap()
            },
            x0.clone(),
        );
        check_grad(
            |g, x| {
                let w = g.channels(x, 0, 1);
                let s = g.sigmoid(w);
                let a = g.channels(x, 1, 1);
                let b = g.scale(a, 0.5);
                g.blend2(s, a, b).unwrap()
            },
            x0,
        );
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let wid = store.insert("w", Tensor::from_vec(&[2, 2, 3, 3], pseudo(36, 0.29))).unwrap();
        let bid = store.insert("b", Tensor::from_vec(&[2], vec![0.1, -0.2])).unwrap();
        let x0 = Tensor::from_vec(&[2, 5, 4], pseudo(40, 0.77));
        let mask = ParamMask::all(2);
        let loss = |store: &ParamStore<f64>, mask: Option<&ParamMask>| {
            let mut g = Graph::new(store, mask);
            let x = g.input(x0.clone());
            let (w, b) = (g.param(wid), g.param(bid));
            let y = g.conv2d(x, w, Some(b)).unwrap();
            let l = g.mean_sq(y);
            let v = g.value(l).item();
            let mut acc = ParamGrads::new(2);
            g.backward(l).accumulate_into(&mut acc);
            (v, acc)
        };
        let (_, grads) = loss(&store, Some(&mask));
        for id in [wid, bid] {
            for i in 0..store.get(id).len() {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += 1e-6;
                let up = loss(&s, None).0;
                s.get_mut(id).data_mut()[i] -= 2e-6;
                let dn = loss(&s, None).0;
                let num = (up - dn) / 2e-6;
                let an = grads.get(id).unwrap().data()[i];
                assert!((num - an).abs() < 1e-6 * (1.0 + num.abs()));
            }
        }
    }

    #[test]
    fn masked_softmax_blend_excludes_invalid_candidates() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store, None);
        let a = g.input(Tensor::full(&[1, 1, 2], 1.0));
        let b = g.input(Tensor::full(&[1, 1, 2], 3.0));
        let l = g.input(Tensor::zeros(&[2, 1, 2]));
        let masks = vec![
            Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]),
            Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]),
        ];
        let o = g.softmax_blend(&[a, b], l, Some(masks)).unwrap();
        assert_eq!(g.value(o).data(), &[2.0, 0.0]);
    }
}
