//! Attention-based averaging of the synthesis and warping predictions, and
//! the full three-branch inference pass.

use crate::error::{shape_check, Result};
use crate::graph::{Graph, Var};
use crate::model::{InterpInput, Model};
use crate::nn::{FlowEstimator, Hourglass};
use crate::scalar::Scalar;
use crate::synthesis::{synthesis_graph, SynthesisOutput};
use crate::tensor::Tensor;
use crate::warping::{warping_graph, WarpingOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct BlendOutput<T> {
    pub final_image: Tensor<T>,
    /// `(1, H, W)` weight of the synthesis prediction, in `[0, 1]`.
    pub weights: Tensor<T>,
}

/// `w = sigmoid(net(concat(syn, warp)))` (the sigmoid is the network's final
/// activation) and `w syn + (1 - w) warp`, broadcast over colour channels.
/// Returns `(final, w)`.
pub fn attention_blend<T: Scalar>(g: &mut Graph<'_, T>, net: &Hourglass, syn: Var, warp: Var) -> Result<(Var, Var)> {
    shape_check("attention blend", g.value(syn).shape(), g.value(warp).shape())?;
    let x = g.concat(&[syn, warp])?;
    let w = net.forward(g, x)?;
    Ok((g.blend2(w, syn, warp)?, w))
}

/// Blend of two fixed images with the model's blend network.
pub fn blend_images<T: Scalar>(model: &Model<T>, syn: &Tensor<T>, warp: &Tensor<T>) -> Result<BlendOutput<T>> {
    let mut g = Graph::new(&model.store, None);
    let s = g.input(syn.clone());
    let w = g.input(warp.clone());
    let (f, wt) = attention_blend(&mut g, &model.blend, s, w)?;
    Ok(BlendOutput {
        final_image: g.value(f).clone(),
        weights: g.value(wt).clone(),
    })
}

/// Everything one interpolation query produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation<T> {
    pub synthesis: SynthesisOutput<T>,
    pub warping: WarpingOutput<T>,
    pub blend: BlendOutput<T>,
}

/// Full inference pass: both branches, then the attention blend.
pub fn interpolate<T: Scalar>(
    model: &Model<T>,
    input: &InterpInput<'_, T>,
    estimator: &dyn FlowEstimator<T>,
) -> Result<Interpolation<T>> {
    let mut g = Graph::new(&model.store, None);
    let syn = synthesis_graph(&mut g, model, input)?;
    let warp = warping_graph(&mut g, model, input, estimator)?;
    let (f, w) = attention_blend(&mut g, &model.blend, syn.fused, warp.fused)?;
    Ok(Interpolation {
        synthesis: syn.values(&g),
        warping: warp.values(&g),
        blend: BlendOutput {
            final_image: g.value(f).clone(),
            weights: g.value(w).clone(),
        },
    })
}
