//! Event-guided recurrent warping.
//!
//! Stage I fuses frozen boundary flows into flows from the target time to
//! both boundaries. Stage II adds an event-conditioned residual (`g1`, shared
//! by both directions), stage III an image-conditioned residual (`g2`). Both
//! boundary frames are then backward-warped and merged by a fusion network
//! that also sees the validity masks and the refined flows.

use crate::error::Result;
use crate::events::{reverse, voxelize, VoxelGrid};
use crate::flow::{fuse_initial_flow, FlowField, WarpResult};
use crate::graph::{Graph, Var};
use crate::model::{InterpInput, Model};
use crate::nn::{FlowEstimator, FlowQuery, Hourglass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct WarpingOutput<T> {
    pub ft0_init: FlowField<T>,
    pub ft1_init: FlowField<T>,
    pub ft0_update: FlowField<T>,
    pub ft1_update: FlowField<T>,
    pub ft0_refine: FlowField<T>,
    pub ft1_refine: FlowField<T>,
    pub warped_fwd: WarpResult<T>,
    pub warped_bwd: WarpResult<T>,
    pub fused: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct WarpingVars<T> {
    pub t: f64,
    pub ft0_init: Var,
    pub ft1_init: Var,
    pub ft0_update: Var,
    pub ft1_update: Var,
    pub ft0_refine: Var,
    pub ft1_refine: Var,
    /// `I_0` warped to `t`.
    pub warped_fwd: Var,
    /// `I_1` warped to `t`.
    pub warped_bwd: Var,
    pub mask_fwd: Tensor<T>,
    pub mask_bwd: Tensor<T>,
    pub fused: Var,
}

impl<T: Scalar> WarpingVars<T> {
    pub fn values(&self, g: &Graph<'_, T>) -> WarpingOutput<T> {
        let t = self.t;
        let flow = |v: Var, dst: f64| FlowField {
            data: g.value(v).clone(),
            src_time: t,
            dst_time: dst,
        };
        WarpingOutput {
            ft0_init: flow(self.ft0_init, 0.0),
            ft1_init: flow(self.ft1_init, 1.0),
            ft0_update: flow(self.ft0_update, 0.0),
            ft1_update: flow(self.ft1_update, 1.0),
            ft0_refine: flow(self.ft0_refine, 0.0),
            ft1_refine: flow(self.ft1_refine, 1.0),
            warped_fwd: WarpResult {
                image: g.value(self.warped_fwd).clone(),
                validity: self.mask_fwd.clone(),
            },
            warped_bwd: WarpResult {
                image: g.value(self.warped_bwd).clone(),
                validity: self.mask_bwd.clone(),
            },
            fused: g.value(self.fused).clone(),
        }
    }
}

/// `delta = g1(concat(F, E))`, `F_update = F + delta`.
pub fn event_update<T: Scalar>(g: &mut Graph<'_, T>, g1: &Hourglass, f_init: Var, e: &VoxelGrid<T>) -> Result<(Var, Var)> {
    let ev = g.input(e.data.clone());
    let x = g.concat(&[f_init, ev])?;
    let delta = g1.forward(g, x)?;
    let updated = g.add(f_init, delta)?;
    Ok((delta, updated))
}

/// `(dF_t0, dF_t1) = g2(concat(F_t0, F_t1, I_0, I_1))`, added to the inputs.
pub fn refine<T: Scalar>(
    g: &mut Graph<'_, T>,
    g2: &Hourglass,
    ft0: Var,
    ft1: Var,
    i0: Var,
    i1: Var,
) -> Result<(Var, Var)> {
    let x = g.concat(&[ft0, ft1, i0, i1])?;
    let d = g2.forward(g, x)?;
    let d0 = g.channels(d, 0, 2);
    let d1 = g.channels(d, 2, 2);
    Ok((g.add(ft0, d0)?, g.add(ft1, d1)?))
}

/// Masked softmax blend of the two warped frames plus a residual. Where a
/// frame's warp left the image it is excluded from the blend.
#[allow(clippy::too_many_arguments)]
pub fn warp_fuse<T: Scalar>(
    g: &mut Graph<'_, T>,
    net: &Hourglass,
    w_fwd: Var,
    m_fwd: &Tensor<T>,
    w_bwd: Var,
    m_bwd: &Tensor<T>,
    ft0: Var,
    ft1: Var,
) -> Result<Var> {
    let m0 = g.input(m_fwd.clone());
    let m1 = g.input(m_bwd.clone());
    let x = g.concat(&[w_fwd, w_bwd, m0, m1, ft0, ft1])?;
    let out = net.forward(g, x)?;
    let logits = g.channels(out, 0, 2);
    let residual = g.channels(out, 2, 3);
    let blended = g.softmax_blend(&[w_fwd, w_bwd], logits, Some(vec![m_fwd.clone(), m_bwd.clone()]))?;
    let y = g.add(blended, residual)?;
    Ok(g.clamp(y, T::zero(), T::one()))
}

pub fn warping_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    input: &InterpInput<'_, T>,
    estimator: &dyn FlowEstimator<T>,
) -> Result<WarpingVars<T>> {
    input.validate()?;
    let (f01, f10) = estimator.estimate(&FlowQuery {
        i0: input.i0,
        i1: input.i1,
        ground_truth: input.gt_flows,
        key: input.key,
    })?;
    let (ft0, ft1) = fuse_initial_flow(&f01, &f10, input.t)?;
    let ft0_init = g.input(ft0.data);
    let ft1_init = g.input(ft1.data);
    let (ft0_update, ft1_update) = if model.config.event_update {
        let bins = model.config.bins;
        let e_t0 = voxelize(&reverse(input.events_0t), bins)?;
        let e_t1 = voxelize(input.events_t1, bins)?;
        (
            event_update(g, &model.g1, ft0_init, &e_t0)?.1,
            event_update(g, &model.g1, ft1_init, &e_t1)?.1,
        )
    } else {
        (ft0_init, ft1_init)
    };
    let i0 = g.input(input.i0.clone());
    let i1 = g.input(input.i1.clone());
    let (ft0_refine, ft1_refine) = refine(g, &model.g2, ft0_update, ft1_update, i0, i1)?;
    let (warped_fwd, mask_fwd) = g.warp(i0, ft0_refine)?;
    let (warped_bwd, mask_bwd) = g.warp(i1, ft1_refine)?;
    let fused = warp_fuse(
        g,
        &model.warp_fusion,
        warped_fwd,
        &mask_fwd,
        warped_bwd,
        &mask_bwd,
        ft0_refine,
        ft1_refine,
    )?;
    Ok(WarpingVars {
        t: input.t,
        ft0_init,
        ft1_init,
        ft0_update,
        ft1_update,
        ft0_refine,
        ft1_refine,
        warped_fwd,
        warped_bwd,
        mask_fwd,
        mask_bwd,
        fused,
    })
}

/// Inference pass of the warping branch.
pub fn warping_forward<T: Scalar>(
    model: &Model<T>,
    input: &InterpInput<'_, T>,
    estimator: &dyn FlowEstimator<T>,
) -> Result<WarpingOutput<T>> {
    let mut g = Graph::new(&model.store, None);
    let vars = warping_graph(&mut g, model, input, estimator)?;
    Ok(vars.values(&g))
}
