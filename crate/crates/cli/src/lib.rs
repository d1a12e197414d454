//! Command implementations behind the `evfi` binary.
//!
//! Every command reads one JSON config (or starts from defaults), applies
//! `--seed` and `--set key=value` overrides, writes the resulting effective
//! config to the output directory and then does its work. Feeding that file
//! back with `--config` reproduces the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use evfi::ablation::{run_ablation, AblationConfig, AblationReport};
use evfi::dataset::{generate_dataset, load_dataset, write_dataset, write_png, SimulateConfig};
use evfi::evaluate::{predict_and_score, EvalRecord, EvalSummary, Predictor};
use evfi::flow::write_flow;
use evfi::fsutil::write_atomic;
use evfi::train::{run_protocol, ProtocolConfig, ProtocolReport};
use evfi::Model;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const SUMMARY: &str = "summary.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_MD: &str = "metrics.md";

#[derive(Debug, Parser)]
#[command(name = "evfi", version, about = "Event-camera video frame interpolation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic dataset of rendered scenes and simulated events.
    Simulate(CommonArgs),
    /// Run the staged training protocol.
    Train(CommonArgs),
    /// Insert the missing frames of every window of a dataset.
    Interpolate(CommonArgs),
    /// Score a checkpoint (or a reference predictor) on a dataset.
    Evaluate(CommonArgs),
    /// Train and score the ablation variants.
    Ablate(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-key override, e.g. `--set protocol.stages.0.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCommand {
    pub dataset: PathBuf,
    pub protocol: ProtocolConfig,
    /// When set, replaces the model seed and every stage seed.
    pub seed: Option<u64>,
}

impl Default for TrainCommand {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            protocol: ProtocolConfig::default(),
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolateCommand {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Also write the synthesis blend weight of every frame.
    pub weights: bool,
    /// Also write the refined flows `F_t->0` and `F_t->1`.
    pub flows: bool,
    /// Inference is deterministic; the seed is kept for the record.
    pub seed: Option<u64>,
}

impl Default for InterpolateCommand {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            checkpoint: PathBuf::from("averaging.ckpt"),
            weights: false,
            flows: false,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateCommand {
    pub dataset: PathBuf,
    /// Required by the `model` predictor only.
    pub checkpoint: Option<PathBuf>,
    pub predictor: Predictor,
    pub seed: Option<u64>,
}

impl Default for EvaluateCommand {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            checkpoint: None,
            predictor: Predictor::Model,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateCommand {
    /// Training set.
    pub dataset: PathBuf,
    /// Scoring set; the training set when absent.
    pub eval_dataset: Option<PathBuf>,
    pub ablation: AblationConfig,
    pub seed: Option<u64>,
}

impl Default for AblateCommand {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            eval_dataset: None,
            ablation: AblationConfig::default(),
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub n_windows: usize,
    pub n_samples: usize,
    pub n_events: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub predictor: Predictor,
    pub summary: EvalSummary,
    pub records: Vec<EvalRecord>,
}

/// Sets `key` (dot-separated; numeric parts index arrays) in `root`. The
/// value is parsed as JSON and taken as a plain string when that fails.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    if key.is_empty() {
        bail!("override {spec:?} has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().with_context(|| format!("{key}: {part:?} is not an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("{key}: index {idx} out of range (length {len})"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null if !last => {
                *cur = Value::Object(Default::default());
                match cur {
                    Value::Object(map) => map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default())),
                    _ => unreachable!(),
                }
            }
            other => bail!("{key}: cannot descend into {other}"),
        };
    }
    unreachable!("loop returns on the last key part")
}

/// Config file (or defaults) with overrides applied; unknown keys are
/// rejected both in the file and in the overrides.
pub fn load_config<C>(path: Option<&Path>, overrides: &[String]) -> Result<C>
where
    C: Serialize + DeserializeOwned + Default,
{
    let base: C = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => C::default(),
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut v = serde_json::to_value(&base)?;
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    serde_json::from_value(v).context("applying overrides")
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn echo_config<S: Serialize>(out: &Path, cfg: &S) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(EFFECTIVE_CONFIG), cfg)
}

fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        bail!("non-finite value in {what}");
    }
    Ok(())
}

pub fn cmd_simulate(args: &CommonArgs) -> Result<SimulateSummary> {
    let mut cfg: SimulateConfig = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    echo_config(&args.out, &cfg)?;
    let start = Instant::now();
    let samples = generate_dataset::<f32>(&cfg)?;
    let ds = write_dataset(&args.out, &samples)?;
    let summary = SimulateSummary {
        n_windows: ds.n_windows,
        n_samples: ds.n_samples,
        n_events: ds.n_events,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_json(&args.out.join(SUMMARY), &summary)?;
    println!(
        "simulated {} windows ({} samples, {} events) in {:.1}s -> {}",
        summary.n_windows,
        summary.n_samples,
        summary.n_events,
        summary.wall_time_s,
        args.out.display()
    );
    Ok(summary)
}

pub fn cmd_train(args: &CommonArgs) -> Result<ProtocolReport> {
    let mut cfg: TrainCommand = load_config(args.config.as_deref(), &args.overrides)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if let Some(s) = cfg.seed {
        cfg.protocol = cfg.protocol.with_seed(s);
    }
    cfg.protocol.validate()?;
    echo_config(&args.out, &cfg)?;
    let data = load_dataset::<f32>(&cfg.dataset)?;
    let (_, report) = run_protocol(&cfg.protocol, &data, &args.out, true)?;
    for s in &report.stages {
        check_finite(s.stage.name(), s.loss_history.iter().copied())?;
        println!(
            "{:<10} {:>5} steps  loss {:.5} -> {:.5} (decile medians)  frozen unchanged: {}  {:.1}s",
            s.stage.name(),
            s.steps,
            s.first_decile_median,
            s.last_decile_median,
            s.frozen_unchanged,
            s.wall_time_s
        );
    }
    Ok(report)
}

/// File stem of one interpolated frame.
pub fn frame_stem(sample: &str, t: f64) -> String {
    format!("{sample}_{t:.3}")
}

pub fn cmd_interpolate(args: &CommonArgs) -> Result<Vec<PathBuf>> {
    let mut cfg: InterpolateCommand = load_config(args.config.as_deref(), &args.overrides)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    let model = Model::<f32>::load(&cfg.checkpoint)?;
    let data = load_dataset::<f32>(&cfg.dataset)?;
    echo_config(&args.out, &cfg)?;
    let estimator = model.estimator();
    let mut written = Vec::new();
    for s in &data {
        for (ti, tg) in s.targets.iter().enumerate() {
            let out = evfi::interpolate(&model, &s.input(ti), estimator.as_ref())?;
            check_finite("interpolated frame", out.blend.final_image.data().iter().map(|v| *v as f64))?;
            let stem = frame_stem(&s.id, tg.t);
            let path = args.out.join(format!("{stem}.png"));
            write_png(&path, &out.blend.final_image)?;
            written.push(path);
            if cfg.weights {
                write_png(&args.out.join("weights").join(format!("{stem}.png")), &out.blend.weights)?;
            }
            if cfg.flows {
                for (tag, f) in [("t0", &out.warping.ft0_refine), ("t1", &out.warping.ft1_refine)] {
                    let mut buf = Vec::new();
                    write_flow(&mut buf, f)?;
                    write_atomic(&args.out.join("flows").join(format!("{stem}_{tag}.flo")), &buf)?;
                }
            }
        }
    }
    println!("wrote {} frames -> {}", written.len(), args.out.display());
    Ok(written)
}

fn metrics_markdown(m: &MetricsFile) -> String {
    let mut s = String::from("| sample | target | t | PSNR | SSIM |\n|---|---|---|---|---|\n");
    for r in &m.records {
        s.push_str(&format!(
            "| {} | {} | {:.3} | {:.2} | {:.4} |\n",
            r.sample_id, r.target, r.t, r.psnr, r.ssim
        ));
    }
    s.push_str(&format!(
        "| **mean** ({} targets) | | | {:.2} | {:.4} |\n",
        m.summary.n, m.summary.psnr, m.summary.ssim
    ));
    s
}

pub fn cmd_evaluate(args: &CommonArgs) -> Result<MetricsFile> {
    let mut cfg: EvaluateCommand = load_config(args.config.as_deref(), &args.overrides)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    let model = match (&cfg.checkpoint, cfg.predictor) {
        (Some(p), _) => Some(Model::<f32>::load(p)?),
        (None, Predictor::Model) => {
            return Err(evfi::Error::MissingCheckpoint("the model predictor needs `checkpoint`".into()).into())
        }
        (None, _) => None,
    };
    let data = load_dataset::<f32>(&cfg.dataset)?;
    echo_config(&args.out, &cfg)?;
    let records = predict_and_score(model.as_ref(), &data, cfg.predictor, |_, _, _, _| Ok(()))?;
    let summary = EvalSummary::of(&records);
    check_finite("metrics", records.iter().flat_map(|r| [r.psnr, r.ssim]))?;
    let m = MetricsFile {
        predictor: cfg.predictor,
        summary,
        records,
    };
    write_json(&args.out.join(METRICS_JSON), &m)?;
    write_atomic(&args.out.join(METRICS_MD), metrics_markdown(&m).as_bytes())?;
    println!(
        "{} targets: PSNR {:.2} dB  SSIM {:.4}",
        m.summary.n, m.summary.psnr, m.summary.ssim
    );
    Ok(m)
}

pub fn cmd_ablate(args: &CommonArgs) -> Result<AblationReport> {
    let mut cfg: AblateCommand = load_config(args.config.as_deref(), &args.overrides)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if let Some(s) = cfg.seed {
        cfg.ablation.protocol = cfg.ablation.protocol.clone().with_seed(s);
    }
    cfg.ablation.protocol.validate()?;
    echo_config(&args.out, &cfg)?;
    let train = load_dataset::<f32>(&cfg.dataset)?;
    let eval = match &cfg.eval_dataset {
        Some(p) => load_dataset::<f32>(p)?,
        None => train.clone(),
    };
    let report = run_ablation(&cfg.ablation, &train, &eval, &args.out, true)?;
    check_finite("ablation", report.rows.iter().flat_map(|r| [r.psnr, r.ssim]))?;
    print!("{}", report.markdown());
    Ok(report)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a).map(drop),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Interpolate(a) => cmd_interpolate(&a).map(drop),
        Command::Evaluate(a) => cmd_evaluate(&a).map(drop),
        Command::Ablate(a) => cmd_ablate(&a).map(drop),
    }
}
