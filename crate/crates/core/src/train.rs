//! Staged training: synthesis, then warping, then the averaging module with
//! both branches frozen.
//!
//! Each stage owns a fresh Adam instance and a cosine learning-rate schedule
//! over its own steps. Samples are visited in a permutation derived from
//! `(seed, epoch)` so a run is reproducible and can be resumed mid-stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blend::attention_blend;
use crate::dataset::{epoch_order, LoadedSample};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::graph::Graph;
use crate::losses::{averaging_terms, synthesis_terms, warping_terms, LossReport};
use crate::model::{prefix, Model, ModelConfig};
use crate::nn::{load_checkpoint, save_checkpoint, Checkpoint, FlowEstimator};
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::params::{ParamGrads, ParamMask};
use crate::scalar::Scalar;
use crate::synthesis::synthesis_graph;
use crate::tensor::Tensor;
use crate::warping::warping_graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synthesis,
    Warping,
    Averaging,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Synthesis, Stage::Warping, Stage::Averaging];

    /// Parameter prefix of the module this stage trains.
    pub fn module(self) -> &'static str {
        match self {
            Stage::Synthesis => prefix::SYNTHESIS,
            Stage::Warping => prefix::WARPING,
            Stage::Averaging => prefix::AVERAGING,
        }
    }

    pub fn name(self) -> &'static str {
        self.module()
    }
}

/// Every top-level module of the model.
pub const MODULES: [&str; 4] = [prefix::SYNTHESIS, prefix::WARPING, prefix::AVERAGING, prefix::FEATURES];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_init: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Weight of the perceptual term in the synthesis and averaging losses.
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default)]
    pub seed: u64,
    /// Modules whose parameters must not change during this stage.
    #[serde(default)]
    pub freeze: Vec<String>,
}

fn default_batch() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.99]
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}
fn default_lambda1() -> f64 {
    1.0
}

impl StageConfig {
    /// Desk-scale defaults: 8/8/4 epochs, batch 1, Adam (0.9, 0.99).
    pub fn desk(stage: Stage) -> Self {
        let (epochs, freeze): (u64, &[&str]) = match stage {
            Stage::Synthesis => (8, &[]),
            Stage::Warping => (8, &[prefix::SYNTHESIS]),
            Stage::Averaging => (4, &[prefix::SYNTHESIS, prefix::WARPING]),
        };
        Self {
            stage,
            epochs,
            batch_size: default_batch(),
            lr_init: default_lr(),
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            clip_norm: default_clip(),
            lambda1: default_lambda1(),
            seed: 0,
            freeze: freeze.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("{} stage: {m}", self.stage.name())));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_init.is_finite() && self.lr_init >= 0.0) {
            return bad(format!("invalid lr_init {}", self.lr_init));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        for f in &self.freeze {
            if !MODULES.contains(&f.as_str()) {
                return bad(format!("unknown module {f:?} in freeze list"));
            }
            if f == self.stage.module() {
                return bad("a stage cannot freeze the module it trains".into());
            }
        }
        if self.stage == Stage::Averaging {
            for m in [prefix::SYNTHESIS, prefix::WARPING] {
                if !self.freeze.iter().any(|f| f == m) {
                    return bad(format!("the averaging stage must freeze {m}"));
                }
            }
        }
        Ok(())
    }
}

/// Progress of one stage; enough, together with the parameters and the
/// optimizer moments, to continue the stage exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Optimizer steps taken.
    pub step: u64,
    pub epoch: u64,
    /// Batches already consumed in `epoch`.
    pub batch_in_epoch: u64,
    pub total_steps: u64,
    pub seed: u64,
    /// Mean batch loss of every step.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }
}

/// Median of the first and of the last tenth (at least one step) of a history.
pub fn decile_medians(history: &[f64]) -> Option<(f64, f64)> {
    if history.is_empty() {
        return None;
    }
    let k = history.len().div_ceil(10).max(1);
    let median = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    Some((median(&history[..k]), median(&history[history.len() - k..])))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<T> {
    /// Continue from a saved state instead of starting the stage afresh.
    pub resume: Option<(TrainState, Adam<T>)>,
    /// Stop (resumably) after this many total steps.
    pub stop_after_steps: Option<u64>,
    /// Where a diagnostic dump goes when the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct StageOutcome<T> {
    pub state: TrainState,
    pub adam: Adam<T>,
    /// Hash of every module that was not trained, before and after.
    pub frozen_before: BTreeMap<String, String>,
    pub frozen_after: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl<T> StageOutcome<T> {
    pub fn frozen_unchanged(&self) -> bool {
        self.frozen_before == self.frozen_after
    }
}

/// `(sample index, target index)` of every training item.
pub fn items<T>(data: &[LoadedSample<T>]) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(s, d)| (0..d.targets.len()).map(move |t| (s, t)))
        .collect()
}

fn trainable_mask<T: Scalar>(model: &Model<T>, cfg: &StageConfig) -> ParamMask {
    let mut mask = model.store.mask_for(&[cfg.stage.module()]);
    let frozen: Vec<&str> = cfg.freeze.iter().map(|s| s.as_str()).chain([prefix::FEATURES]).collect();
    let frozen_mask = model.store.mask_for(&frozen);
    for (m, f) in mask.0.iter_mut().zip(&frozen_mask.0) {
        *m &= !f;
    }
    mask
}

fn frozen_hashes<T: Scalar>(model: &Model<T>, stage: Stage) -> BTreeMap<String, String> {
    MODULES
        .iter()
        .filter(|&&m| m != stage.module())
        .map(|&m| (m.to_string(), model.store.hash_prefix(m)))
        .collect()
}

/// Synthesis and warping outputs of every item under the current (frozen)
/// parameters, used as fixed inputs of the averaging stage.
pub fn branch_outputs<T: Scalar>(
    model: &Model<T>,
    data: &[LoadedSample<T>],
    estimator: &dyn FlowEstimator<T>,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    items(data)
        .into_iter()
        .map(|(s, t)| {
            let input = data[s].input(t);
            let mut g = Graph::new(&model.store, None);
            let syn = synthesis_graph(&mut g, model, &input)?;
            let warp = warping_graph(&mut g, model, &input, estimator)?;
            Ok((g.value(syn.fused).clone(), g.value(warp.fused).clone()))
        })
        .collect()
}

/// Loss and parameter gradients of one item.
fn item_step<T: Scalar>(
    model: &Model<T>,
    cfg: &StageConfig,
    mask: &ParamMask,
    sample: &LoadedSample<T>,
    target: usize,
    cached: Option<&(Tensor<T>, Tensor<T>)>,
    estimator: &dyn FlowEstimator<T>,
    grads: &mut ParamGrads<T>,
) -> Result<LossReport> {
    let input = sample.input(target);
    let mut g = Graph::new(&model.store, Some(mask));
    let gt = g.input(sample.targets[target].image.clone());
    let terms = match cfg.stage {
        Stage::Synthesis => {
            let syn = synthesis_graph(&mut g, model, &input)?;
            synthesis_terms(&mut g, &model.features, &syn, gt, cfg.lambda1)?
        }
        Stage::Warping => {
            let warp = warping_graph(&mut g, model, &input, estimator)?;
            warping_terms(&mut g, &warp, gt)?
        }
        Stage::Averaging => {
            let (syn, warp) = match cached {
                Some(c) => c.clone(),
                None => {
                    let mut v = branch_outputs(model, std::slice::from_ref(sample), estimator)?;
                    v.swap_remove(target)
                }
            };
            let s = g.input(syn);
            let w = g.input(warp);
            let (f, _) = attention_blend(&mut g, &model.blend, s, w)?;
            averaging_terms(&mut g, &model.features, f, gt, cfg.lambda1)?
        }
    };
    let total = terms.total(&mut g)?;
    let report = terms.report(&g);
    if report.total.is_finite() {
        g.backward(total).accumulate_into(grads);
    }
    Ok(report)
}

fn dump_nonfinite(dir: &Path, stage: Stage, step: u64, ids: &[String], reports: &[LossReport]) -> Result<PathBuf> {
    let path = dir.join(format!("nonfinite_{}_step{step}.json", stage.name()));
    let body = serde_json::json!({
        "stage": stage,
        "step": step,
        "samples": ids,
        "losses": reports,
    });
    write_atomic(&path, serde_json::to_string_pretty(&body)?.as_bytes())?;
    Ok(path)
}

/// Runs (or continues) one stage over `data`.
pub fn train_stage<T: Scalar>(
    model: &mut Model<T>,
    cfg: &StageConfig,
    data: &[LoadedSample<T>],
    opts: TrainOptions<T>,
) -> Result<StageOutcome<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let all = items(data);
    if all.is_empty() {
        return Err(Error::MissingDataset("no training samples".into()));
    }
    let per_epoch = all.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = per_epoch * cfg.epochs;
    let mask = trainable_mask(model, cfg);
    let estimator = model.estimator();
    let (mut state, mut adam) = match opts.resume {
        Some((s, a)) => {
            if s.stage != cfg.stage || s.total_steps != total_steps || s.seed != cfg.seed {
                return Err(Error::InvalidConfig("resume state does not match the stage configuration".into()));
            }
            (s, a)
        }
        None => (
            TrainState {
                stage: cfg.stage,
                step: 0,
                epoch: 0,
                batch_in_epoch: 0,
                total_steps,
                seed: cfg.seed,
                loss_history: Vec::new(),
            },
            Adam::new(&model.store, &mask, cfg.betas[0], cfg.betas[1], cfg.adam_eps),
        ),
    };
    let frozen_before = frozen_hashes(model, cfg.stage);
    let cache = if cfg.stage == Stage::Averaging {
        Some(branch_outputs(model, data, estimator.as_ref())?)
    } else {
        None
    };
    let item_index: BTreeMap<(usize, usize), usize> = all.iter().enumerate().map(|(i, &k)| (k, i)).collect();

    'epochs: while state.epoch < cfg.epochs {
        let order = epoch_order(all.len(), cfg.seed, state.epoch);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        while (state.batch_in_epoch as usize) < batches.len() {
            if opts.stop_after_steps.is_some_and(|s| state.step >= s) {
                break 'epochs;
            }
            let batch = batches[state.batch_in_epoch as usize];
            let mut grads = ParamGrads::new(model.store.len());
            let mut reports = Vec::with_capacity(batch.len());
            for &i in batch {
                let (s, t) = all[i];
                let cached = cache.as_ref().map(|c| &c[item_index[&(s, t)]]);
                reports.push(item_step(model, cfg, &mask, &data[s], t, cached, estimator.as_ref(), &mut grads)?);
            }
            let loss = reports.iter().map(|r| r.total).sum::<f64>() / batch.len() as f64;
            let norm = grads.global_norm().as_f64();
            if !loss.is_finite() || !norm.is_finite() {
                let ids: Vec<String> = batch.iter().map(|&i| data[all[i].0].id.clone()).collect();
                let dump = match &opts.dump_dir {
                    Some(d) => Some(dump_nonfinite(d, cfg.stage, state.step, &ids, &reports)?),
                    None => None,
                };
                return Err(Error::NonFiniteLoss {
                    stage: cfg.stage.name().to_string(),
                    step: state.step,
                    dump,
                });
            }
            grads.scale(T::of(1.0 / batch.len() as f64));
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.store, &grads, cosine_lr(state.step, total_steps, cfg.lr_init));
            state.loss_history.push(loss);
            state.step += 1;
            state.batch_in_epoch += 1;
        }
        if opts.verbose {
            let n = batches.len().min(state.loss_history.len());
            let recent = &state.loss_history[state.loss_history.len() - n..];
            eprintln!(
                "[{}] epoch {}/{} mean loss {:.5}",
                cfg.stage.name(),
                state.epoch + 1,
                cfg.epochs,
                recent.iter().sum::<f64>() / n.max(1) as f64
            );
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
    }

    let frozen_after = frozen_hashes(model, cfg.stage);
    Ok(StageOutcome {
        state,
        adam,
        frozen_before,
        frozen_after,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Saves parameters, optimizer moments and progress so a stage can resume.
pub fn save_train_state<T: Scalar>(path: &Path, model: &Model<T>, state: &TrainState, adam: &Adam<T>) -> Result<()> {
    let mut ck = Checkpoint::from_store(
        &model.store,
        &[],
        serde_json::json!({
            "model": model.config,
            "train_state": state,
            "adam": {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t},
        }),
    );
    for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
        for id in model.store.ids() {
            if let Some(t) = &moments[id.index()] {
                ck.params.push((format!("adam.{kind}.{}", model.store.name(id)), t.cast()));
            }
        }
    }
    save_checkpoint(path, &ck)
}

pub fn load_train_state<T: Scalar>(path: &Path) -> Result<(Model<T>, TrainState, Adam<T>)> {
    let mut ck = load_checkpoint(path)?;
    let corrupt = |e: serde_json::Error| Error::CorruptCheckpoint(e.to_string());
    let config: ModelConfig = serde_json::from_value(ck.config["model"].clone()).map_err(corrupt)?;
    let state: TrainState = serde_json::from_value(ck.config["train_state"].clone()).map_err(corrupt)?;
    let a = &ck.config["adam"];
    let num = |k: &str| {
        a[k].as_f64()
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing adam.{k}")))
    };
    let (beta1, beta2, eps) = (num("beta1")?, num("beta2")?, num("eps")?);
    let t = a["t"].as_u64().ok_or_else(|| Error::CorruptCheckpoint("missing adam.t".into()))?;
    let mut model = Model::<T>::new(config)?;
    let n = model.store.len();
    let mut adam = Adam {
        beta1,
        beta2,
        eps,
        t,
        m: vec![None; n],
        v: vec![None; n],
    };
    let params = std::mem::take(&mut ck.params);
    let mut plain = Vec::with_capacity(params.len());
    for (name, value) in params {
        let slot = if let Some(rest) = name.strip_prefix("adam.m.") {
            Some((&mut adam.m, rest.to_string()))
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            Some((&mut adam.v, rest.to_string()))
        } else {
            None
        };
        match slot {
            Some((moments, pname)) => {
                let id = model
                    .store
                    .id(&pname)
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("moment for unknown parameter {pname}")))?;
                moments[id.index()] = Some(value.cast());
            }
            None => plain.push((name, value)),
        }
    }
    ck.params = plain;
    ck.apply_to(&mut model.store)?;
    Ok((model, state, adam))
}

/// The whole protocol: model configuration plus the ordered stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
    /// Start from this checkpoint instead of a fresh model.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stages: Stage::ALL.iter().map(|&s| StageConfig::desk(s)).collect(),
            init_checkpoint: None,
        }
    }
}

impl ProtocolConfig {
    /// Sets every stage's seed and the model seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        for s in &mut self.stages {
            s.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("protocol has no stages".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: u64,
    pub steps: u64,
    pub final_loss: f64,
    pub first_decile_median: f64,
    pub last_decile_median: f64,
    pub wall_time_s: f64,
    pub checkpoint_path: PathBuf,
    pub frozen_unchanged: bool,
    pub frozen_hashes: BTreeMap<String, String>,
    pub loss_history: Vec<f64>,
}

impl StageReport {
    pub fn loss_decreased(&self) -> bool {
        self.last_decile_median < self.first_decile_median
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub stages: Vec<StageReport>,
}

pub const PROTOCOL_REPORT: &str = "protocol_report.json";

pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.ckpt", stage.name()))
}

/// Trains every configured stage in order, writing one checkpoint per stage
/// and the protocol report into `out_dir`.
pub fn run_protocol<T: Scalar>(
    cfg: &ProtocolConfig,
    data: &[LoadedSample<T>],
    out_dir: &Path,
    verbose: bool,
) -> Result<(Model<T>, ProtocolReport)> {
    cfg.validate()?;
    let mut model = match &cfg.init_checkpoint {
        Some(p) => {
            let m = Model::<T>::load(p)?;
            if m.config != cfg.model {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                )));
            }
            m
        }
        None => Model::<T>::new(cfg.model.clone())?,
    };
    let report = run_stages(&mut model, &cfg.stages, data, out_dir, verbose)?;
    Ok((model, report))
}

/// Trains `stages` in order on an existing model, writing one checkpoint per
/// stage and the report into `out_dir`.
pub fn run_stages<T: Scalar>(
    model: &mut Model<T>,
    stages: &[StageConfig],
    data: &[LoadedSample<T>],
    out_dir: &Path,
    verbose: bool,
) -> Result<ProtocolReport> {
    let mut report = ProtocolReport { stages: Vec::new() };
    for stage_cfg in stages {
        let outcome = train_stage(
            model,
            stage_cfg,
            data,
            TrainOptions {
                dump_dir: Some(out_dir.to_path_buf()),
                verbose,
                ..Default::default()
            },
        )?;
        let path = checkpoint_path(out_dir, stage_cfg.stage);
        model.save(&path)?;
        let (first, last) = decile_medians(&outcome.state.loss_history).unwrap_or((f64::NAN, f64::NAN));
        report.stages.push(StageReport {
            stage: stage_cfg.stage,
            epochs: stage_cfg.epochs,
            steps: outcome.state.step,
            final_loss: outcome.state.loss_history.last().copied().unwrap_or(f64::NAN),
            first_decile_median: first,
            last_decile_median: last,
            wall_time_s: outcome.wall_time_s,
            checkpoint_path: path,
            frozen_unchanged: outcome.frozen_unchanged(),
            frozen_hashes: outcome.frozen_after.clone(),
            loss_history: outcome.state.loss_history.clone(),
        });
        write_atomic(&out_dir.join(PROTOCOL_REPORT), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(report)
}
