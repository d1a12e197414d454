//! Per-target evaluation of a predictor over a dataset.

use serde::{Deserialize, Serialize};

use crate::blend::interpolate;
use crate::dataset::LoadedSample;
use crate::error::Result;
use crate::metrics::{psnr, ssim};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What produces the frame being scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    /// The trained model.
    #[default]
    Model,
    /// The ground truth itself (sanity check of the metric plumbing).
    Oracle,
    /// `(1 - t) I_0 + t I_1`.
    LinearBlend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub target: usize,
    pub t: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the synthesis and warping branches (model predictor only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_synthesis: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_warping: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim_synthesis: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim_warping: Option<f64>,
    /// Mean blend weight of the synthesis branch (model predictor only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_synthesis: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_warping: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim_synthesis: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim_warping: Option<f64>,
}

impl EvalSummary {
    pub fn of(records: &[EvalRecord]) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n.max(1) as f64;
        let opt_mean = |f: &dyn Fn(&EvalRecord) -> Option<f64>| {
            let v: Option<Vec<f64>> = records.iter().map(f).collect();
            v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            n,
            psnr: mean(&|r| r.psnr),
            ssim: mean(&|r| r.ssim),
            psnr_synthesis: opt_mean(&|r| r.psnr_synthesis),
            psnr_warping: opt_mean(&|r| r.psnr_warping),
            ssim_synthesis: opt_mean(&|r| r.ssim_synthesis),
            ssim_warping: opt_mean(&|r| r.ssim_warping),
        }
    }
}

/// One prediction per target, in dataset order, with its scores.
pub fn predict_and_score<T: Scalar>(
    model: Option<&Model<T>>,
    data: &[LoadedSample<T>],
    predictor: Predictor,
    mut sink: impl FnMut(&LoadedSample<T>, usize, &Tensor<T>, Option<&Tensor<T>>) -> Result<()>,
) -> Result<Vec<EvalRecord>> {
    let estimator = model.map(|m| m.estimator());
    let mut out = Vec::new();
    for s in data {
        for (ti, tg) in s.targets.iter().enumerate() {
            let mut rec = EvalRecord {
                sample_id: s.id.clone(),
                target: ti,
                t: tg.t,
                psnr: 0.0,
                ssim: 0.0,
                psnr_synthesis: None,
                psnr_warping: None,
                ssim_synthesis: None,
                ssim_warping: None,
                mean_weight: None,
            };
            let (pred, weights) = match predictor {
                Predictor::Oracle => (tg.image.clone(), None),
                Predictor::LinearBlend => {
                    let t = T::of(tg.t);
                    (s.i0.zip_map(&s.i1, |a, b| (T::one() - t) * a + t * b)?, None)
                }
                Predictor::Model => {
                    let m = model.ok_or_else(|| {
                        crate::error::Error::MissingCheckpoint("the model predictor needs a checkpoint".into())
                    })?;
                    let est = estimator.as_ref().expect("estimator exists with a model");
                    let out = interpolate(m, &s.input(ti), est.as_ref())?;
                    rec.psnr_synthesis = Some(psnr(&out.synthesis.fused, &tg.image)?);
                    rec.psnr_warping = Some(psnr(&out.warping.fused, &tg.image)?);
                    rec.ssim_synthesis = Some(ssim(&out.synthesis.fused, &tg.image)?);
                    rec.ssim_warping = Some(ssim(&out.warping.fused, &tg.image)?);
                    rec.mean_weight = Some(out.blend.weights.mean().as_f64());
                    (out.blend.final_image, Some(out.blend.weights))
                }
            };
            rec.psnr = psnr(&pred, &tg.image)?;
            rec.ssim = ssim(&pred, &tg.image)?;
            sink(s, ti, &pred, weights.as_ref())?;
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    model: Option<&Model<T>>,
    data: &[LoadedSample<T>],
    predictor: Predictor,
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let records = predict_and_score(model, data, predictor, |_, _, _, _| Ok(()))?;
    let summary = EvalSummary::of(&records);
    Ok((records, summary))
}
