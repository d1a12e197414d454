//! Training losses. Every L1 term is mean-reduced over elements.
//!
//! * reconstruction: L1 of the fused synthesis output and of every candidate;
//! * synthesis: reconstruction plus `lambda_1` times the perceptual distance
//!   of the fused output;
//! * warping: L1 of the fused warping output and of both warped frames;
//! * averaging: L1 of the blended frame plus `lambda_1` times its perceptual
//!   distance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Result};
use crate::graph::{Graph, Var};
use crate::nn::FeatureExtractor;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synthesis::{SynthesisOutput, SynthesisVars};
use crate::tensor::Tensor;
use crate::warping::{WarpingOutput, WarpingVars};

/// Named loss components with their weights; `total` is their weighted sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    /// `sum(weight * component)`, for checking `total`.
    pub fn recompose(&self) -> f64 {
        self.components.iter().map(|(k, v)| self.weights.get(k).copied().unwrap_or(1.0) * v).sum()
    }
}

/// Weighted scalar loss terms accumulated on a graph.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    terms: Vec<(String, f64, Var)>,
}

impl LossTerms {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, weight: f64, v: Var) {
        self.terms.push((name.into(), weight, v));
    }

    pub fn extend(&mut self, other: LossTerms) {
        self.terms.extend(other.terms);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(|(n, _, _)| n.as_str())
    }

    /// Weighted sum node. Zero-weight terms are left out of the graph.
    pub fn total<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(_, w, v) in &self.terms {
            if w == 0.0 {
                continue;
            }
            let s = if w == 1.0 { v } else { g.scale(v, T::of(w)) };
            acc = Some(match acc {
                None => s,
                Some(a) => g.add(a, s)?,
            });
        }
        Ok(match acc {
            Some(a) => a,
            None => g.input(Tensor::scalar(T::zero())),
        })
    }

    pub fn report<T: Scalar>(&self, g: &Graph<'_, T>) -> LossReport {
        let mut r = LossReport::default();
        for (n, w, v) in &self.terms {
            r.components.insert(n.clone(), g.value(*v).item().as_f64());
            r.weights.insert(n.clone(), *w);
        }
        r.total = r.recompose();
        r
    }
}

/// Sum over pyramid levels of the mean squared feature difference.
pub fn perceptual_graph<T: Scalar>(g: &mut Graph<'_, T>, fx: &FeatureExtractor, pred: Var, gt: Var) -> Result<Var> {
    shape_check("perceptual loss", g.value(gt).shape(), g.value(pred).shape())?;
    let fp = fx.extract(g, pred)?;
    let fg = fx.extract(g, gt)?;
    let mut acc: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(fg) {
        let d = g.sub(a, b)?;
        let m = g.mean_sq(d);
        acc = Some(match acc {
            None => m,
            Some(x) => g.add(x, m)?,
        });
    }
    Ok(acc.expect("three pyramid levels"))
}

fn chain_suffix(len: usize) -> String {
    format!("t{len}")
}

pub fn reconstruction_terms<T: Scalar>(g: &mut Graph<'_, T>, out: &SynthesisVars, gt: Var) -> Result<LossTerms> {
    let mut terms = LossTerms::new();
    terms.push("fused", 1.0, g.l1(out.fused, gt)?);
    terms.push("direct_fwd", 1.0, g.l1(out.direct_fwd, gt)?);
    terms.push("direct_bwd", 1.0, g.l1(out.direct_bwd, gt)?);
    for (f, b) in out.proxies_fwd.iter().zip(&out.proxies_bwd) {
        let sfx = chain_suffix(f.len());
        terms.push(format!("proxy_fwd_{sfx}"), 1.0, g.l1(*f.last().expect("non-empty chain"), gt)?);
        terms.push(format!("proxy_bwd_{sfx}"), 1.0, g.l1(*b.last().expect("non-empty chain"), gt)?);
    }
    Ok(terms)
}

pub fn synthesis_terms<T: Scalar>(
    g: &mut Graph<'_, T>,
    fx: &FeatureExtractor,
    out: &SynthesisVars,
    gt: Var,
    lambda1: f64,
) -> Result<LossTerms> {
    let mut terms = reconstruction_terms(g, out, gt)?;
    terms.push("perceptual", lambda1, perceptual_graph(g, fx, out.fused, gt)?);
    Ok(terms)
}

pub fn warping_terms<T: Scalar>(g: &mut Graph<'_, T>, out: &WarpingVars<T>, gt: Var) -> Result<LossTerms> {
    let mut terms = LossTerms::new();
    terms.push("fused", 1.0, g.l1(out.fused, gt)?);
    terms.push("warped_fwd", 1.0, g.l1(out.warped_fwd, gt)?);
    terms.push("warped_bwd", 1.0, g.l1(out.warped_bwd, gt)?);
    Ok(terms)
}

pub fn averaging_terms<T: Scalar>(
    g: &mut Graph<'_, T>,
    fx: &FeatureExtractor,
    final_image: Var,
    gt: Var,
    lambda1: f64,
) -> Result<LossTerms> {
    let mut terms = LossTerms::new();
    terms.push("final", 1.0, g.l1(final_image, gt)?);
    terms.push("perceptual", lambda1, perceptual_graph(g, fx, final_image, gt)?);
    Ok(terms)
}

fn synthesis_inputs<T: Scalar>(g: &mut Graph<'_, T>, out: &SynthesisOutput<T>) -> SynthesisVars {
    let mut chain = |c: &Vec<Tensor<T>>| c.iter().map(|t| g.input(t.clone())).collect::<Vec<_>>();
    let proxies_fwd = out.proxies_fwd.iter().map(&mut chain).collect();
    let proxies_bwd = out.proxies_bwd.iter().map(&mut chain).collect();
    SynthesisVars {
        direct_fwd: g.input(out.direct_fwd.clone()),
        direct_bwd: g.input(out.direct_bwd.clone()),
        proxies_fwd,
        proxies_bwd,
        fused: g.input(out.fused.clone()),
    }
}

pub fn reconstruction_loss<T: Scalar>(out: &SynthesisOutput<T>, gt: &Tensor<T>) -> Result<LossReport> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, None);
    let vars = synthesis_inputs(&mut g, out);
    let gv = g.input(gt.clone());
    Ok(reconstruction_terms(&mut g, &vars, gv)?.report(&g))
}

pub fn perceptual_loss<T: Scalar>(
    store: &ParamStore<T>,
    fx: &FeatureExtractor,
    pred: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<f64> {
    let mut g = Graph::new(store, None);
    let p = g.input(pred.clone());
    let q = g.input(gt.clone());
    let d = perceptual_graph(&mut g, fx, p, q)?;
    Ok(g.value(d).item().as_f64())
}

pub fn synthesis_loss<T: Scalar>(
    store: &ParamStore<T>,
    fx: &FeatureExtractor,
    out: &SynthesisOutput<T>,
    gt: &Tensor<T>,
    lambda1: f64,
) -> Result<LossReport> {
    let mut g = Graph::new(store, None);
    let vars = synthesis_inputs(&mut g, out);
    let gv = g.input(gt.clone());
    Ok(synthesis_terms(&mut g, fx, &vars, gv, lambda1)?.report(&g))
}

pub fn warping_loss<T: Scalar>(out: &WarpingOutput<T>, gt: &Tensor<T>) -> Result<LossReport> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, None);
    let gv = g.input(gt.clone());
    let mut terms = LossTerms::new();
    for (name, img) in [
        ("fused", &out.fused),
        ("warped_fwd", &out.warped_fwd.image),
        ("warped_bwd", &out.warped_bwd.image),
    ] {
        let v = g.input(img.clone());
        terms.push(name, 1.0, g.l1(v, gv)?);
    }
    Ok(terms.report(&g))
}

pub fn averaging_loss<T: Scalar>(
    store: &ParamStore<T>,
    fx: &FeatureExtractor,
    final_image: &Tensor<T>,
    gt: &Tensor<T>,
    lambda1: f64,
) -> Result<LossReport> {
    let mut g = Graph::new(store, None);
    let p = g.input(final_image.clone());
    let q = g.input(gt.clone());
    Ok(averaging_terms(&mut g, fx, p, q, lambda1)?.report(&g))
}
