//! The three-branch interpolation model: configuration, parameter layout and
//! the per-sample input bundle shared by all branches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::events::EventStream;
use crate::flow::FlowField;
use crate::nn::{
    load_checkpoint, save_checkpoint, BlockMatchingEstimator, Checkpoint, FeatureExtractor, FinalActivation,
    FlowEstimator, GtFlowEstimator, Hourglass, HourglassConfig, Norm,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter-name prefixes of the model's sub-networks.
pub mod prefix {
    pub const SYNTHESIS: &str = "synthesis";
    pub const F1: &str = "synthesis.f1";
    pub const F2: &str = "synthesis.f2";
    pub const SYNTHESIS_FUSION: &str = "synthesis.fusion";
    pub const WARPING: &str = "warping";
    pub const G1: &str = "warping.g1";
    pub const G2: &str = "warping.g2";
    pub const WARP_FUSION: &str = "warping.fusion";
    pub const AVERAGING: &str = "averaging";
    pub const BLEND: &str = "averaging.blend";
    pub const FEATURES: &str = "features";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSize {
    pub levels: usize,
    pub base_width: usize,
}

/// Where the frozen boundary flows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowSource {
    /// Analytic scene flow plus optional Gaussian noise of std `sigma` pixels.
    GroundTruth {
        #[serde(default)]
        sigma: f64,
    },
    BlockMatching { radius: usize, patch_half: usize },
}

impl Default for FlowSource {
    fn default() -> Self {
        FlowSource::GroundTruth { sigma: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Temporal bins of every event voxel grid.
    pub bins: usize,
    /// Chain lengths of the transitional synthesis branches; `[2]` is one
    /// two-step chain per direction, `[1, 2, 4]` runs three chains.
    pub proxies: Vec<usize>,
    /// Size of `f1` and `f2`.
    pub synthesis_net: NetSize,
    /// Size of the synthesis fusion, warp fusion and blend networks.
    pub fusion_net: NetSize,
    /// Size of `g1` and `g2`.
    pub flow_net: NetSize,
    pub norm: Norm,
    /// When false the warping branch skips the event-guided flow update.
    pub event_update: bool,
    pub flow_source: FlowSource,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bins: 5,
            proxies: vec![2],
            synthesis_net: NetSize {
                levels: 3,
                base_width: 32,
            },
            fusion_net: NetSize {
                levels: 3,
                base_width: 32,
            },
            flow_net: NetSize {
                levels: 3,
                base_width: 24,
            },
            norm: Norm::None,
            event_update: true,
            flow_source: FlowSource::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::InvalidConfig("bins must be positive".into()));
        }
        if self.proxies.is_empty() {
            return Err(Error::InvalidConfig("at least one proxy chain length is required".into()));
        }
        if self.proxies.contains(&0) {
            return Err(Error::EmptySliceList);
        }
        let mut sorted = self.proxies.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.proxies.len() {
            return Err(Error::InvalidConfig(format!("duplicate proxy chain lengths {:?}", self.proxies)));
        }
        if let FlowSource::GroundTruth { sigma } = self.flow_source {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::InvalidConfig(format!("flow noise sigma {sigma} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Number of synthesis candidates entering the fusion network.
    pub fn n_candidates(&self) -> usize {
        2 + 2 * self.proxies.len()
    }
}

/// All networks of the model together with their shared parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub f1: Hourglass,
    pub f2: Hourglass,
    pub synthesis_fusion: Hourglass,
    pub g1: Hourglass,
    pub g2: Hourglass,
    pub warp_fusion: Hourglass,
    pub blend: Hourglass,
    pub features: FeatureExtractor,
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let b = config.bins;
        let hg = |ci: usize, co: usize, size: NetSize| {
            let mut c = HourglassConfig::new(ci, co, size.levels, size.base_width).zero_head();
            c.norm = config.norm;
            c
        };
        let s = config.seed;
        let f1 = Hourglass::build(&mut store, prefix::F1, hg(3 + b, 3, config.synthesis_net), sub_seed(s, 1))?;
        let f2 = Hourglass::build(&mut store, prefix::F2, hg(3 + b, 3, config.synthesis_net), sub_seed(s, 2))?;
        let n = config.n_candidates();
        let synthesis_fusion = Hourglass::build(
            &mut store,
            prefix::SYNTHESIS_FUSION,
            hg(3 * n, n + 3, config.fusion_net),
            sub_seed(s, 3),
        )?;
        let g1 = Hourglass::build(&mut store, prefix::G1, hg(2 + b, 2, config.flow_net), sub_seed(s, 4))?;
        let g2 = Hourglass::build(&mut store, prefix::G2, hg(10, 4, config.flow_net), sub_seed(s, 5))?;
        let warp_fusion = Hourglass::build(&mut store, prefix::WARP_FUSION, hg(12, 5, config.fusion_net), sub_seed(s, 6))?;
        let mut blend_cfg = hg(6, 1, config.fusion_net);
        blend_cfg.final_activation = FinalActivation::Sigmoid;
        let blend = Hourglass::build(&mut store, prefix::BLEND, blend_cfg, sub_seed(s, 7))?;
        let features = FeatureExtractor::build(&mut store, prefix::FEATURES, sub_seed(s, 8))?;
        Ok(Self {
            config,
            store,
            f1,
            f2,
            synthesis_fusion,
            g1,
            g2,
            warp_fusion,
            blend,
            features,
        })
    }

    pub fn estimator(&self) -> Box<dyn FlowEstimator<T>> {
        match self.config.flow_source {
            FlowSource::GroundTruth { sigma } => Box::new(GtFlowEstimator::noisy(sigma, sub_seed(self.config.seed, 9))),
            FlowSource::BlockMatching { radius, patch_half } => {
                Box::new(BlockMatchingEstimator { radius, patch_half })
            }
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(&self.store, &[], serde_json::to_value(&self.config)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint()?)
    }

    /// Rebuilds the model described by a checkpoint and restores its parameters.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let config: ModelConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let mut model = Self::new(config)?;
        ck.apply_to(&mut model.store)?;
        Ok(model)
    }
}

/// One interpolation query: boundary frames, the events on either side of
/// the target time and, for synthetic data, the analytic boundary flows.
#[derive(Clone, Copy, Debug)]
pub struct InterpInput<'a, T> {
    pub i0: &'a Tensor<T>,
    pub i1: &'a Tensor<T>,
    /// Events in `[t0, t_target)`.
    pub events_0t: &'a EventStream,
    /// Events in `[t_target, t1)`.
    pub events_t1: &'a EventStream,
    /// Target time normalized into `(0, 1)`.
    pub t: f64,
    pub gt_flows: Option<(&'a FlowField<T>, &'a FlowField<T>)>,
    /// Stable per-sample key for deterministic estimator noise.
    pub key: u64,
}

impl<T: Scalar> InterpInput<'_, T> {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.i0.chw();
        shape_check("boundary frame", &[3, h, w], &[c, h, w])?;
        shape_check("boundary frames", self.i0.shape(), self.i1.shape())?;
        for s in [self.events_0t, self.events_t1] {
            let sz = s.sensor();
            shape_check("event sensor", &[h, w], &[sz.height as usize, sz.width as usize])?;
        }
        if self.events_0t.window().end() != self.events_t1.window().start() {
            return Err(Error::InvalidBoundaries(
                "event streams on either side of the target must share the target time".into(),
            ));
        }
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(Error::InvalidConfig(format!("target time {} outside (0, 1)", self.t)));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.i0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.i0.shape()[2]
    }
}
