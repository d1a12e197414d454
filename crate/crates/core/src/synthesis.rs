//! Proxy-guided synthesis: direct synthesis from each boundary frame,
//! transitional chains that advance a proxy frame slice by slice, and a
//! fusion network over all candidates.
//!
//! `f1` and `f2` predict a residual that is added to the frame they start
//! from, so with their zero-initialized heads each starts out as the identity.

use crate::error::{Error, Result};
use crate::events::{reverse, slice, uniform_boundaries, voxelize, EventStream, VoxelGrid};
use crate::graph::{Graph, Var};
use crate::model::{InterpInput, Model};
use crate::nn::Hourglass;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Synthesis results as plain images.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutput<T> {
    /// From frame 0 with `E_{0->t}`.
    pub direct_fwd: Tensor<T>,
    /// From frame 1 with the reversed `E_{1->t}`.
    pub direct_bwd: Tensor<T>,
    /// One chain per configured length; each holds every proxy in order, the
    /// last one being the chain's final prediction.
    pub proxies_fwd: Vec<Vec<Tensor<T>>>,
    pub proxies_bwd: Vec<Vec<Tensor<T>>>,
    pub fused: Tensor<T>,
}

impl<T> SynthesisOutput<T> {
    /// Final proxy of the first configured chain.
    pub fn proxy_fwd_final(&self) -> &Tensor<T> {
        self.proxies_fwd[0].last().expect("non-empty chain")
    }

    pub fn proxy_bwd_final(&self) -> &Tensor<T> {
        self.proxies_bwd[0].last().expect("non-empty chain")
    }
}

/// Synthesis results as graph nodes.
#[derive(Clone, Debug)]
pub struct SynthesisVars {
    pub direct_fwd: Var,
    pub direct_bwd: Var,
    pub proxies_fwd: Vec<Vec<Var>>,
    pub proxies_bwd: Vec<Vec<Var>>,
    pub fused: Var,
}

impl SynthesisVars {
    /// The four (or more) fusion candidates: both direct predictions, then the
    /// final proxy of each chain, forward before backward.
    pub fn candidates(&self) -> Vec<Var> {
        let mut c = vec![self.direct_fwd, self.direct_bwd];
        for (f, b) in self.proxies_fwd.iter().zip(&self.proxies_bwd) {
            c.push(*f.last().expect("non-empty chain"));
            c.push(*b.last().expect("non-empty chain"));
        }
        c
    }

    pub fn values<T: Scalar>(&self, g: &Graph<'_, T>) -> SynthesisOutput<T> {
        let v = |x: &Var| g.value(*x).clone();
        SynthesisOutput {
            direct_fwd: v(&self.direct_fwd),
            direct_bwd: v(&self.direct_bwd),
            proxies_fwd: self.proxies_fwd.iter().map(|c| c.iter().map(v).collect()).collect(),
            proxies_bwd: self.proxies_bwd.iter().map(|c| c.iter().map(v).collect()).collect(),
            fused: v(&self.fused),
        }
    }
}

/// `clamp(base + net(concat(base, E)), 0, 1)`.
fn step<T: Scalar>(g: &mut Graph<'_, T>, net: &Hourglass, base: Var, e: &VoxelGrid<T>) -> Result<Var> {
    let ev = g.input(e.data.clone());
    let x = g.concat(&[base, ev])?;
    let delta = net.forward(g, x)?;
    let out = g.add(base, delta)?;
    Ok(g.clamp(out, T::zero(), T::one()))
}

pub fn direct_synthesize<T: Scalar>(
    g: &mut Graph<'_, T>,
    f1: &Hourglass,
    i_boundary: Var,
    e: &VoxelGrid<T>,
) -> Result<Var> {
    step(g, f1, i_boundary, e)
}

/// Runs `P_1 = f2(I, E_1)`, `P_i = f2(P_{i-1}, E_i)` and returns every `P_i`.
pub fn transitional_synthesize<T: Scalar>(
    g: &mut Graph<'_, T>,
    f2: &Hourglass,
    i_boundary: Var,
    slices: &[VoxelGrid<T>],
) -> Result<Vec<Var>> {
    if slices.is_empty() {
        return Err(Error::EmptySliceList);
    }
    let mut cur = i_boundary;
    let mut out = Vec::with_capacity(slices.len());
    for e in slices {
        cur = step(g, f2, cur, e)?;
        out.push(cur);
    }
    Ok(out)
}

/// Per-pixel softmax blend of the candidates plus a residual correction.
///
/// The network sees the concatenated candidates and predicts one logit per
/// candidate and a 3-channel residual; with its zero-initialized head the
/// output starts as the plain candidate average.
pub fn synthesis_fuse<T: Scalar>(g: &mut Graph<'_, T>, net: &Hourglass, cands: &[Var]) -> Result<Var> {
    let n = cands.len();
    let x = g.concat(cands)?;
    let out = net.forward(g, x)?;
    let logits = g.channels(out, 0, n);
    let residual = g.channels(out, n, 3);
    let blended = g.softmax_blend(cands, logits, None)?;
    let y = g.add(blended, residual)?;
    Ok(g.clamp(y, T::zero(), T::one()))
}

/// Voxel grids of `stream` cut into `n` uniform slices, in chronological order.
pub fn slice_voxels<T: Scalar>(stream: &EventStream, n: usize, bins: usize) -> Result<Vec<VoxelGrid<T>>> {
    if n == 0 {
        return Err(Error::EmptySliceList);
    }
    slice(stream, &uniform_boundaries(stream.window(), n))?
        .iter()
        .map(|s| voxelize(s, bins))
        .collect()
}

pub fn synthesis_graph<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, input: &InterpInput<'_, T>) -> Result<SynthesisVars> {
    input.validate()?;
    let bins = model.config.bins;
    let fwd_stream = input.events_0t;
    let bwd_stream = reverse(input.events_t1);
    let i0 = g.input(input.i0.clone());
    let i1 = g.input(input.i1.clone());
    let direct_fwd = direct_synthesize(g, &model.f1, i0, &voxelize(fwd_stream, bins)?)?;
    let direct_bwd = direct_synthesize(g, &model.f1, i1, &voxelize(&bwd_stream, bins)?)?;
    let mut proxies_fwd = Vec::with_capacity(model.config.proxies.len());
    let mut proxies_bwd = Vec::with_capacity(model.config.proxies.len());
    for &n in &model.config.proxies {
        proxies_fwd.push(transitional_synthesize(g, &model.f2, i0, &slice_voxels(fwd_stream, n, bins)?)?);
        proxies_bwd.push(transitional_synthesize(g, &model.f2, i1, &slice_voxels(&bwd_stream, n, bins)?)?);
    }
    let mut vars = SynthesisVars {
        direct_fwd,
        direct_bwd,
        proxies_fwd,
        proxies_bwd,
        fused: direct_fwd,
    };
    vars.fused = synthesis_fuse(g, &model.synthesis_fusion, &vars.candidates())?;
    Ok(vars)
}

/// Inference pass of the synthesis branch.
pub fn synthesis_forward<T: Scalar>(model: &Model<T>, input: &InterpInput<'_, T>) -> Result<SynthesisOutput<T>> {
    let mut g = Graph::new(&model.store, None);
    let vars = synthesis_graph(&mut g, model, input)?;
    Ok(vars.values(&g))
}
