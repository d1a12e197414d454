//! Ablation sweeps: train a baseline, then variants that change one design
//! choice, and score every variant on the same evaluation set.
//!
//! A variant whose synthesis (or warping) configuration equals the
//! baseline's takes that branch from the baseline instead of training it
//! again. Every network is seeded independently and each branch stage only
//! touches its own parameters, so the copied weights are exactly the ones a
//! retrain would produce.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::LoadedSample;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalSummary, Predictor};
use crate::fsutil::write_atomic;
use crate::model::{prefix, FlowSource, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::train::{run_stages, ProtocolConfig, Stage, StageConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGroup {
    /// Each branch of the baseline on its own, then the blend.
    Modules,
    /// One transitional chain of 1, 2 or 4 proxies.
    Proxies,
    /// Chains `[1]`, `[1, 2]` and `[1, 2, 4]` fused together.
    Fusion,
    /// Boundary flows from the configured source vs the alternative one.
    FlowSource,
    /// Warping with and without the event-guided flow update.
    EventUpdate,
}

impl AblationGroup {
    pub const ALL: [AblationGroup; 5] = [
        AblationGroup::Modules,
        AblationGroup::Proxies,
        AblationGroup::Fusion,
        AblationGroup::FlowSource,
        AblationGroup::EventUpdate,
    ];
}

/// Which output a row scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scored {
    Synthesis,
    Warping,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// The baseline model and stage schedule shared by every variant.
    pub protocol: ProtocolConfig,
    pub groups: Vec<AblationGroup>,
    /// Flow source of the second row of the flow-source group.
    pub alt_flow_source: FlowSource,
    /// Chain lengths swept by the proxies group.
    pub proxy_counts: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolConfig::default(),
            groups: AblationGroup::ALL.to_vec(),
            alt_flow_source: FlowSource::BlockMatching {
                radius: 4,
                patch_half: 2,
            },
            proxy_counts: vec![1, 2, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: AblationGroup,
    pub variant: String,
    pub scored: Scored,
    pub psnr: f64,
    pub ssim: f64,
    /// Blended output of the same model, whatever `scored` is.
    pub psnr_final: f64,
    pub ssim_final: f64,
    /// Directory (relative to the output root) holding the variant's checkpoints.
    pub run: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Evaluation summary of every trained variant, keyed by run directory.
    pub runs: BTreeMap<String, EvalSummary>,
}

impl AblationReport {
    pub fn rows_of(&self, group: AblationGroup) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.group == group)
    }

    pub fn row(&self, group: AblationGroup, variant: &str) -> Option<&AblationRow> {
        self.rows_of(group).find(|r| r.variant == variant)
    }

    /// Markdown table, one row per variant in sweep order.
    pub fn markdown(&self) -> String {
        let mut s = String::from("| group | variant | scored | PSNR | SSIM | final PSNR | final SSIM |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.4} | {:.2} | {:.4} |\n",
                json_name(&r.group),
                r.variant,
                json_name(&r.scored),
                r.psnr,
                r.ssim,
                r.psnr_final,
                r.ssim_final
            ));
        }
        s
    }
}

fn json_name<S: Serialize>(v: &S) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// The variants of a group: row label and model configuration.
pub fn variants(group: AblationGroup, base: &ModelConfig, cfg: &AblationConfig) -> Vec<(String, ModelConfig)> {
    let alt_flow = &cfg.alt_flow_source;
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match group {
        AblationGroup::Modules => vec![("baseline".into(), base.clone())],
        AblationGroup::Proxies => cfg
            .proxy_counts
            .iter()
            .map(|&n| (n.to_string(), with(&|c| c.proxies = vec![n])))
            .collect(),
        AblationGroup::Fusion => [vec![1usize], vec![1, 2], vec![1, 2, 4]]
            .into_iter()
            .map(|p| {
                let label = match p.len() {
                    1 => "only 1".to_string(),
                    _ => p.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" & "),
                };
                (label, with(&|c| c.proxies = p.clone()))
            })
            .collect(),
        AblationGroup::FlowSource => vec![
            (flow_label(&base.flow_source), base.clone()),
            (flow_label(alt_flow), with(&|c| c.flow_source = alt_flow.clone())),
        ],
        AblationGroup::EventUpdate => vec![
            ("w/o event".into(), with(&|c| c.event_update = false)),
            ("w event".into(), with(&|c| c.event_update = true)),
        ],
    }
}

fn flow_label(f: &FlowSource) -> String {
    match f {
        FlowSource::GroundTruth { sigma } if *sigma == 0.0 => "ground_truth".into(),
        FlowSource::GroundTruth { sigma } => format!("ground_truth (sigma {sigma})"),
        FlowSource::BlockMatching { .. } => "block_matching".into(),
    }
}

fn synthesis_key(c: &ModelConfig) -> impl PartialEq {
    (c.bins, c.proxies.clone(), c.synthesis_net, c.fusion_net, c.norm, c.seed)
}

fn warping_key(c: &ModelConfig) -> impl PartialEq {
    (
        c.bins,
        c.flow_net,
        c.fusion_net,
        c.norm,
        c.event_update,
        serde_json::to_string(&c.flow_source).unwrap_or_default(),
        c.seed,
    )
}

fn copy_module<T: Scalar>(from: &Model<T>, to: &mut Model<T>, module: &str) -> Result<()> {
    for id in from.store.ids_with_prefix(module).collect::<Vec<_>>() {
        let name = from.store.name(id);
        let dst = to
            .store
            .id(name)
            .ok_or_else(|| Error::InvalidConfig(format!("parameter {name} missing from variant")))?;
        *to.store.get_mut(dst) = from.store.get(id).clone();
    }
    Ok(())
}

fn stage_cfg(stages: &[StageConfig], s: Stage) -> Option<StageConfig> {
    stages.iter().find(|c| c.stage == s).cloned()
}

fn run_name(i: usize) -> String {
    format!("run{i:02}")
}

/// Trains the baseline and every variant of the configured groups, scores
/// them on `eval`, and writes checkpoints under `out_dir/runNN/` plus
/// `ablation.json` and `ablation.md`.
pub fn run_ablation<T: Scalar>(
    cfg: &AblationConfig,
    train: &[LoadedSample<T>],
    eval: &[LoadedSample<T>],
    out_dir: &Path,
    verbose: bool,
) -> Result<AblationReport> {
    cfg.protocol.validate()?;
    let stages = &cfg.protocol.stages;
    for s in Stage::ALL {
        if stage_cfg(stages, s).is_none() {
            return Err(Error::InvalidConfig(format!("ablation needs a {} stage", s.name())));
        }
    }
    if cfg.protocol.init_checkpoint.is_some() {
        return Err(Error::InvalidConfig("ablation trains from scratch; drop init_checkpoint".into()));
    }
    if eval.is_empty() {
        return Err(Error::MissingDataset("no evaluation samples".into()));
    }
    let base_cfg = &cfg.protocol.model;
    let mut trained: Vec<(ModelConfig, Model<T>, EvalSummary)> = Vec::new();
    let mut report = AblationReport {
        rows: Vec::new(),
        runs: BTreeMap::new(),
    };

    let train_variant = |mc: &ModelConfig, trained: &mut Vec<(ModelConfig, Model<T>, EvalSummary)>| -> Result<usize> {
        if let Some(i) = trained.iter().position(|(c, _, _)| c == mc) {
            return Ok(i);
        }
        let name = run_name(trained.len());
        let dir = out_dir.join(&name);
        let mut model = Model::<T>::new(mc.clone())?;
        let mut todo = Vec::new();
        let base = trained.first().map(|(_, m, _)| m);
        match base {
            Some(b) if synthesis_key(&b.config) == synthesis_key(mc) => copy_module(b, &mut model, prefix::SYNTHESIS)?,
            _ => todo.extend(stage_cfg(stages, Stage::Synthesis)),
        }
        match base {
            Some(b) if warping_key(&b.config) == warping_key(mc) => copy_module(b, &mut model, prefix::WARPING)?,
            _ => todo.extend(stage_cfg(stages, Stage::Warping)),
        }
        todo.extend(stage_cfg(stages, Stage::Averaging));
        if verbose {
            eprintln!(
                "[ablation] {name}: training {:?}",
                todo.iter().map(|s| s.stage.name()).collect::<Vec<_>>()
            );
        }
        run_stages(&mut model, &todo, train, &dir, verbose)?;
        let (_, summary) = evaluate(Some(&model), eval, Predictor::Model)?;
        trained.push((mc.clone(), model, summary));
        Ok(trained.len() - 1)
    };

    train_variant(base_cfg, &mut trained)?;
    for &group in &cfg.groups {
        for (label, mc) in variants(group, base_cfg, cfg) {
            let i = train_variant(&mc, &mut trained)?;
            let s = &trained[i].2;
            let scored_rows: Vec<(String, Scored)> = match group {
                AblationGroup::Modules => vec![
                    ("synthesis".into(), Scored::Synthesis),
                    ("warping".into(), Scored::Warping),
                    ("averaging".into(), Scored::Final),
                ],
                AblationGroup::Proxies | AblationGroup::Fusion => vec![(label, Scored::Final)],
                AblationGroup::FlowSource | AblationGroup::EventUpdate => vec![(label, Scored::Warping)],
            };
            for (variant, scored) in scored_rows {
                let (psnr, ssim) = match scored {
                    Scored::Synthesis => (s.psnr_synthesis, s.ssim_synthesis),
                    Scored::Warping => (s.psnr_warping, s.ssim_warping),
                    Scored::Final => (Some(s.psnr), Some(s.ssim)),
                };
                report.rows.push(AblationRow {
                    group,
                    variant,
                    scored,
                    psnr: psnr.unwrap_or(f64::NAN),
                    ssim: ssim.unwrap_or(f64::NAN),
                    psnr_final: s.psnr,
                    ssim_final: s.ssim,
                    run: run_name(i),
                });
            }
        }
    }
    for (i, (_, _, s)) in trained.iter().enumerate() {
        report.runs.insert(run_name(i), s.clone());
    }
    write_atomic(&out_dir.join("ablation.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&out_dir.join("ablation.md"), report.markdown().as_bytes())?;
    Ok(report)
}
