//! On-disk datasets and sample assembly.
//!
//! Layout under a root directory, all paths in the index relative to it:
//!
//! ```text
//! index.jsonl        one SampleManifest per line
//! frames/*.png       8-bit RGB frames
//! events/*.evt       EVT1 event files, one per window
//! flows/*.flo        optional analytic boundary flows, one pair per window
//! ```
//!
//! A sample is a window of `k + 2` consecutive frames: two boundary frames
//! `k + 1` apart and the `k` frames between them as interpolation targets.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{read_events, write_events, EventStream, SensorSize, TimeWindow};
use crate::flow::{read_flow, write_flow, FlowField};
use crate::fsutil::write_atomic;
use crate::model::InterpInput;
use crate::scalar::Scalar;
use crate::simulator::{generate_scene, simulate, FrameSequence, RandomSceneSpec, SceneConfig, SceneTruth, SimulatorConfig};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRef {
    pub path: String,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRefs {
    pub f01: String,
    pub f10: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub sample_id: String,
    /// All `k + 2` frames of the window in time order.
    pub frames: Vec<FrameRef>,
    /// Events covering `[first timestamp, last timestamp)`.
    pub events: String,
    /// Indices into `frames` of the interpolation targets.
    pub targets: Vec<usize>,
    pub skip: usize,
    /// `[width, height]`.
    pub sensor: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flows: Option<FlowRefs>,
}

impl SampleManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::InvalidConfig(format!("sample {}: {m}", self.sample_id));
        if self.frames.len() < 3 {
            return Err(bad("needs two boundary frames and at least one target".into()));
        }
        if self.frames.windows(2).any(|w| !(w[0].timestamp < w[1].timestamp)) {
            return Err(Error::DegenerateTimestamps);
        }
        let last = self.frames.len() - 1;
        if self.targets.is_empty() || self.targets.iter().any(|&i| i == 0 || i >= last) {
            return Err(bad(format!("targets {:?} must lie strictly inside the window", self.targets)));
        }
        Ok(())
    }

    pub fn window(&self) -> Result<TimeWindow> {
        TimeWindow::new(self.frames[0].timestamp, self.frames.last().expect("validated").timestamp)
    }

    /// Normalized time of frame `i` within the window.
    pub fn normalized_time(&self, i: usize) -> f64 {
        let t0 = self.frames[0].timestamp;
        let t1 = self.frames.last().expect("non-empty").timestamp;
        (self.frames[i].timestamp - t0) / (t1 - t0)
    }
}

/// A window assembled in memory, before it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleData<T> {
    pub manifest: SampleManifest,
    /// One image per manifest frame, 8-bit quantized.
    pub frames: Vec<Tensor<T>>,
    pub events: EventStream,
    pub flows: Option<(FlowField<T>, FlowField<T>)>,
}

/// Rounds to the nearest representable 8-bit level.
pub fn quantize_8bit<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| T::of((v.as_f64().clamp(0.0, 1.0) * 255.0).round() / 255.0))
}

/// Sliding windows of `skip + 2` frames with stride one. `name` prefixes the
/// sample ids and file names; `truth`, when given, supplies the analytic
/// boundary flows of every window.
pub fn build_samples<T: Scalar>(
    name: &str,
    seq: &FrameSequence<T>,
    events: &EventStream,
    skip: usize,
    truth: Option<&SceneTruth>,
) -> Result<Vec<SampleData<T>>> {
    if skip == 0 {
        return Err(Error::TooFewTargets(skip));
    }
    seq.validate()?;
    let span = skip + 1;
    if seq.len() < span + 1 {
        return Err(Error::TooFewFrames {
            frames: seq.len(),
            skip,
        });
    }
    let (h, w) = (seq.height(), seq.width());
    let frame_path = |i: usize| format!("frames/{name}_f{i:04}.png");
    let mut out = Vec::with_capacity(seq.len() - span);
    for a in 0..seq.len() - span {
        let b = a + span;
        let id = format!("{name}_w{a:04}_k{skip}");
        let window = TimeWindow::new(seq.timestamps[a], seq.timestamps[b])?;
        let manifest = SampleManifest {
            sample_id: id.clone(),
            frames: (a..=b)
                .map(|i| FrameRef {
                    path: frame_path(i),
                    timestamp: seq.timestamps[i],
                })
                .collect(),
            events: format!("events/{id}.evt"),
            targets: (1..=skip).collect(),
            skip,
            sensor: [w as u32, h as u32],
            flows: truth.map(|_| FlowRefs {
                f01: format!("flows/{id}_01.flo"),
                f10: format!("flows/{id}_10.flo"),
            }),
        };
        let flows = truth.map(|tr| {
            let (ta, tb) = (a as f64, b as f64);
            (tr.flow(ta, tb, 0.0, 1.0), tr.flow(tb, ta, 1.0, 0.0))
        });
        out.push(SampleData {
            manifest,
            frames: (a..=b).map(|i| quantize_8bit(&seq.frames[i])).collect(),
            events: events.restrict(window)?,
            flows,
        });
    }
    Ok(out)
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_scenes: usize,
    pub scene: RandomSceneSpec,
    pub simulator: SimulatorConfig,
    pub skip: usize,
    /// Rendered sub-frames per frame interval used to drive the event
    /// simulator, so events follow the true (possibly nonlinear) motion.
    pub render_substeps: usize,
    /// Keep only the first windows of each scene (0 keeps all).
    pub max_windows_per_scene: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_scenes: 8,
            scene: RandomSceneSpec {
                n_frames: 3,
                ..Default::default()
            },
            simulator: SimulatorConfig::default(),
            skip: 1,
            render_substeps: 8,
            max_windows_per_scene: 0,
            seed: 0,
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::EmptyScene);
        }
        if self.render_substeps == 0 {
            return Err(Error::InvalidConfig("render_substeps must be positive".into()));
        }
        if self.skip == 0 {
            return Err(Error::TooFewTargets(0));
        }
        if self.scene.n_frames < self.skip + 2 {
            return Err(Error::TooFewFrames {
                frames: self.scene.n_frames,
                skip: self.skip,
            });
        }
        self.simulator.validate()
    }
}

fn scene_seed(seed: u64, i: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((i as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Renders one scene at `substeps` sub-frames per interval, simulates its
/// events and returns the key frames with the event stream.
pub fn simulate_scene<T: Scalar>(
    scene: &SceneConfig,
    sim: &SimulatorConfig,
    substeps: usize,
) -> Result<(FrameSequence<T>, EventStream, SceneTruth)> {
    let (keys, truth) = generate_scene::<T>(scene)?;
    let n = (scene.n_frames - 1) * substeps + 1;
    let taus: Vec<f64> = (0..n).map(|i| i as f64 / substeps as f64).collect();
    let fine = FrameSequence::new(
        taus.iter().map(|&t| truth.render::<T>(t)).collect(),
        taus.iter().map(|&t| truth.frame_time(t)).collect(),
    )?;
    let events = simulate(&fine, sim)?;
    Ok((keys, events, truth))
}

/// Generates every scene of `cfg` and assembles its windows.
pub fn generate_dataset<T: Scalar>(cfg: &SimulateConfig) -> Result<Vec<SampleData<T>>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for i in 0..cfg.n_scenes {
        let s = scene_seed(cfg.seed, i);
        let scene = SceneConfig::random(&cfg.scene, s)?;
        let sim = SimulatorConfig {
            seed: s ^ cfg.simulator.seed,
            ..cfg.simulator.clone()
        };
        let (keys, events, truth) = simulate_scene::<T>(&scene, &sim, cfg.render_substeps)?;
        let mut samples = build_samples(&format!("s{i:04}"), &keys, &events, cfg.skip, Some(&truth))?;
        if cfg.max_windows_per_scene > 0 {
            samples.truncate(cfg.max_windows_per_scene);
        }
        out.extend(samples);
    }
    Ok(out)
}

fn to_png_bytes<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = img.chw();
    let plane = h * w;
    let px = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut buf = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut buf);
    use image::ImageEncoder;
    match c {
        1 => {
            let raw: Vec<u8> = img.data().iter().map(|&v| px(v)).collect();
            enc.write_image(&raw, w as u32, h as u32, image::ExtendedColorType::L8)?;
        }
        3 => {
            let raw: Vec<u8> = (0..plane * 3).map(|i| px(img.data()[(i % 3) * plane + i / 3])).collect();
            enc.write_image(&raw, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
        }
        _ => {
            return Err(Error::ShapeMismatch {
                context: "PNG channels",
                expected: vec![3],
                found: vec![c],
            })
        }
    }
    Ok(buf)
}

/// Writes a `(3, H, W)` RGB or `(1, H, W)` grayscale image as 8-bit PNG.
pub fn write_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    write_atomic(path, &to_png_bytes(img)?)
}

/// Reads a PNG as `(3, H, W)` RGB in `[0, 1]`.
pub fn read_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let plane = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        T::of(raw[p * 3 + c] as f64 / 255.0)
    }))
}

/// Totals reported after writing a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_windows: usize,
    pub n_samples: usize,
    pub n_events: usize,
}

/// Writes every sample's files and the index. Shared frames are written once.
pub fn write_dataset<T: Scalar>(root: &Path, samples: &[SampleData<T>]) -> Result<DatasetSummary> {
    let mut ids = HashSet::new();
    let mut written = HashSet::new();
    let mut index = String::new();
    let mut n_events = 0;
    for s in samples {
        s.manifest.validate()?;
        if !ids.insert(s.manifest.sample_id.clone()) {
            return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.manifest.sample_id)));
        }
        for (f, img) in s.manifest.frames.iter().zip(&s.frames) {
            if written.insert(f.path.clone()) {
                write_png(&root.join(&f.path), img)?;
            }
        }
        let mut ev = Vec::new();
        write_events(&mut ev, &s.events)?;
        write_atomic(&root.join(&s.manifest.events), &ev)?;
        n_events += s.events.len();
        if let (Some(refs), Some((f01, f10))) = (&s.manifest.flows, &s.flows) {
            for (p, f) in [(&refs.f01, f01), (&refs.f10, f10)] {
                let mut buf = Vec::new();
                write_flow(&mut buf, f)?;
                write_atomic(&root.join(p), &buf)?;
            }
        }
        index.push_str(&serde_json::to_string(&s.manifest)?);
        index.push('\n');
    }
    write_atomic(&root.join(INDEX_FILE), index.as_bytes())?;
    Ok(DatasetSummary {
        n_windows: samples.len(),
        n_samples: samples.iter().map(|s| s.manifest.targets.len()).sum(),
        n_events,
    })
}

/// Reads the index in file order, rejecting duplicate ids.
pub fn read_index(root: &Path) -> Result<Vec<SampleManifest>> {
    let path = root.join(INDEX_FILE);
    if !path.is_file() {
        return Err(Error::MissingDataset(root.display().to_string()));
    }
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for line in BufReader::new(fs::File::open(&path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: SampleManifest = serde_json::from_str(&line)?;
        m.validate()?;
        if !ids.insert(m.sample_id.clone()) {
            return Err(Error::InvalidConfig(format!("duplicate sample id {}", m.sample_id)));
        }
        out.push(m);
    }
    Ok(out)
}

fn open(root: &Path, rel: &str) -> Result<fs::File> {
    let p: PathBuf = root.join(rel);
    fs::File::open(&p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(p),
        _ => Error::Io(e),
    })
}

/// Reads one window's files back into memory.
pub fn read_sample<T: Scalar>(root: &Path, manifest: &SampleManifest) -> Result<SampleData<T>> {
    manifest.validate()?;
    let frames = manifest
        .frames
        .iter()
        .map(|f| read_png(&root.join(&f.path)))
        .collect::<Result<Vec<_>>>()?;
    let [w, h] = manifest.sensor;
    for f in &frames {
        crate::error::shape_check("dataset frame", &[3, h as usize, w as usize], f.shape())?;
    }
    let events = read_events(open(root, &manifest.events)?)?;
    if events.sensor() != SensorSize::new(w, h) || events.window() != manifest.window()? {
        return Err(Error::CorruptEventFile(format!(
            "{}: header does not match the manifest",
            manifest.events
        )));
    }
    let flows = match &manifest.flows {
        None => None,
        Some(r) => Some((
            read_flow(open(root, &r.f01)?, 0.0, 1.0)?,
            read_flow(open(root, &r.f10)?, 1.0, 0.0)?,
        )),
    };
    Ok(SampleData {
        manifest: manifest.clone(),
        frames,
        events,
        flows,
    })
}

/// One interpolation target of a window with its event slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Target<T> {
    /// Index into the window's frames.
    pub frame: usize,
    pub t: f64,
    pub image: Tensor<T>,
    /// Events in `[t0, t_target)`.
    pub events_0t: EventStream,
    /// Events in `[t_target, t1)`.
    pub events_t1: EventStream,
}

/// A window ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample<T> {
    pub id: String,
    pub key: u64,
    pub i0: Tensor<T>,
    pub i1: Tensor<T>,
    pub targets: Vec<Target<T>>,
    pub gt_flows: Option<(FlowField<T>, FlowField<T>)>,
}

impl<T: Scalar> LoadedSample<T> {
    pub fn input(&self, target: usize) -> InterpInput<'_, T> {
        let tg = &self.targets[target];
        InterpInput {
            i0: &self.i0,
            i1: &self.i1,
            events_0t: &tg.events_0t,
            events_t1: &tg.events_t1,
            t: tg.t,
            gt_flows: self.gt_flows.as_ref().map(|(a, b)| (a, b)),
            key: self.key,
        }
    }
}

/// Stable 64-bit key of a sample id.
pub fn sample_key(id: &str) -> u64 {
    u64::from_le_bytes(Sha256::digest(id.as_bytes())[..8].try_into().unwrap())
}

/// Splits a window into per-target inputs.
pub fn assemble<T: Scalar>(data: SampleData<T>) -> Result<LoadedSample<T>> {
    let m = &data.manifest;
    m.validate()?;
    let window = m.window()?;
    let mut targets = Vec::with_capacity(m.targets.len());
    for &i in &m.targets {
        let split = crate::events::quantize_time(m.frames[i].timestamp);
        let left = TimeWindow::new(window.start(), split)?;
        let right = TimeWindow::new(split, window.end())?;
        targets.push(Target {
            frame: i,
            t: m.normalized_time(i),
            image: data.frames[i].clone(),
            events_0t: data.events.restrict(left)?,
            events_t1: data.events.restrict(right)?,
        });
    }
    let last = data.frames.len() - 1;
    Ok(LoadedSample {
        id: m.sample_id.clone(),
        key: sample_key(&m.sample_id),
        i0: data.frames[0].clone(),
        i1: data.frames[last].clone(),
        targets,
        gt_flows: data.flows,
    })
}

pub fn load_sample<T: Scalar>(root: &Path, manifest: &SampleManifest) -> Result<LoadedSample<T>> {
    assemble(read_sample(root, manifest)?)
}

/// Every sample of the dataset at `root`, in index order.
pub fn load_dataset<T: Scalar>(root: &Path) -> Result<Vec<LoadedSample<T>>> {
    read_index(root)?.iter().map(|m| load_sample(root, m)).collect()
}

/// Deterministic permutation of `0..n` for an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xA076_1D64_78BD_642F));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}
