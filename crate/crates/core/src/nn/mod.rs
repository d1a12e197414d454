//! Trainable building blocks: the skip-connected hourglass U-Net used by
//! every branch, a frozen toy feature pyramid for the perceptual loss, the
//! boundary-flow estimator contract and the checkpoint format.

pub mod checkpoint;
pub mod estimator;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use estimator::{BlockMatchingEstimator, FlowEstimator, FlowQuery, GtFlowEstimator};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    None,
    Instance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    #[default]
    None,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HourglassConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of 2x downsampling stages.
    pub levels: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_width: usize,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub final_activation: FinalActivation,
    /// Start the output convolution at zero so residual heads begin as identity.
    #[serde(default)]
    pub zero_init_head: bool,
}

impl HourglassConfig {
    pub fn new(in_channels: usize, out_channels: usize, levels: usize, base_width: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            levels,
            base_width,
            norm: Norm::None,
            final_activation: FinalActivation::None,
            zero_init_head: false,
        }
    }

    pub fn zero_head(mut self) -> Self {
        self.zero_init_head = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::InvalidConfig(format!("hourglass levels must be in 1..=8, got {}", self.levels)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidConfig("hourglass channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial alignment the input is padded to.
    pub fn alignment(&self) -> usize {
        1 << self.levels
    }

    /// Scalar parameter count, a function of the configuration alone.
    pub fn param_count(&self) -> usize {
        let conv = |ci: usize, co: usize| co * ci * 9 + co;
        let mut n = conv(self.in_channels, self.width(0)) + conv(self.width(0), self.width(0));
        for l in 1..=self.levels {
            n += conv(self.width(l - 1), self.width(l)) + conv(self.width(l), self.width(l));
        }
        for l in (0..self.levels).rev() {
            n += conv(self.width(l + 1) + self.width(l), self.width(l)) + conv(self.width(l), self.width(l));
        }
        n + conv(self.width(0), self.out_channels)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b))
    }
}

/// He-normal weights for a leaky-ReLU network, zero biases.
fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
    zero: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Conv> {
    let fan_in = (ci * k * k) as f64;
    let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let w = if zero {
        Tensor::zeros(&[co, ci, k, k])
    } else {
        Tensor::from_fn(&[co, ci, k, k], |_| T::of(normal.sample(rng)))
    };
    Ok(Conv {
        w: store.insert(format!("{name}.weight"), w)?,
        b: store.insert(format!("{name}.bias"), Tensor::zeros(&[co]))?,
    })
}

#[derive(Clone, Debug)]
struct Stage {
    a: Conv,
    b: Conv,
}

/// A skip-connected hourglass U-Net whose parameters live in a shared
/// [`ParamStore`] under a name prefix.
///
/// Each level applies two 3x3 convolutions with leaky ReLU. The encoder
/// halves resolution by 2x2 average pooling; the decoder doubles it by
/// nearest-neighbour upsampling and concatenates the mirrored encoder
/// features. Inputs are zero-padded at the bottom/right to a multiple of
/// `2^levels` and the output is cropped back.
#[derive(Clone, Debug)]
pub struct Hourglass {
    cfg: HourglassConfig,
    prefix: String,
    enc: Vec<Stage>,
    dec: Vec<Stage>,
    head: Conv,
}

/// The trainable network type shared by all branches.
pub type TrainableMap = Hourglass;

impl Hourglass {
    /// Registers a freshly initialized network under `prefix`.
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: HourglassConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = Vec::with_capacity(cfg.levels + 1);
        for l in 0..=cfg.levels {
            let ci = if l == 0 { cfg.in_channels } else { cfg.width(l - 1) };
            let w = cfg.width(l);
            enc.push(Stage {
                a: add_conv(store, &format!("{prefix}.enc{l}.conv_a"), ci, w, 3, false, &mut rng)?,
                b: add_conv(store, &format!("{prefix}.enc{l}.conv_b"), w, w, 3, false, &mut rng)?,
            });
        }
        let mut dec = Vec::with_capacity(cfg.levels);
        for l in (0..cfg.levels).rev() {
            let w = cfg.width(l);
            dec.push(Stage {
                a: add_conv(store, &format!("{prefix}.dec{l}.conv_a"), cfg.width(l + 1) + w, w, 3, false, &mut rng)?,
                b: add_conv(store, &format!("{prefix}.dec{l}.conv_b"), w, w, 3, false, &mut rng)?,
            });
        }
        let head = add_conv(
            store,
            &format!("{prefix}.head"),
            cfg.width(0),
            cfg.out_channels,
            3,
            cfg.zero_init_head,
            &mut rng,
        )?;
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            enc,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &HourglassConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn stage<T: Scalar>(&self, g: &mut Graph<'_, T>, s: &Stage, x: Var) -> Result<Var> {
        let slope = T::of(LEAKY_SLOPE);
        let mut h = s.a.apply(g, x)?;
        if self.cfg.norm == Norm::Instance {
            h = g.instance_norm(h);
        }
        h = g.leaky_relu(h, slope);
        let h = s.b.apply(g, h)?;
        Ok(g.leaky_relu(h, slope))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (c, h, w) = g.value(x).chw();
        shape_check(
            "hourglass input channels",
            &[self.cfg.in_channels],
            &[c],
        )?;
        let a = self.cfg.alignment();
        let (ph, pw) = (h.div_ceil(a) * a, w.div_ceil(a) * a);
        let mut cur = if (ph, pw) != (h, w) { g.pad_to(x, ph, pw) } else { x };
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for (l, s) in self.enc.iter().enumerate() {
            if l > 0 {
                cur = g.avg_pool2(cur);
            }
            cur = self.stage(g, s, cur)?;
            skips.push(cur);
        }
        skips.pop();
        for s in &self.dec {
            let up = g.upsample2(cur);
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = g.concat(&[up, skip])?;
            cur = self.stage(g, s, cat)?;
        }
        let mut out = self.head.apply(g, cur)?;
        if self.cfg.final_activation == FinalActivation::Sigmoid {
            out = g.sigmoid(out);
        }
        Ok(if (ph, pw) != (h, w) { g.crop_to(out, h, w) } else { out })
    }

    /// Convenience inference pass without gradients.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store, None);
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }
}

/// Frozen, seed-determined convolutional pyramid standing in for a
/// pretrained perceptual backbone.
///
/// Three scales, each `conv3x3 -> x*sigmoid(x) -> avgpool2`, with 8, 16 and 32
/// channels. Features are therefore `(8, H/2, W/2)`, `(16, H/4, W/4)` and
/// `(32, H/8, W/8)`. The input RGB image is centred at 0.5 first. Its
/// parameters are registered in the model store but never selected for
/// training.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    prefix: String,
    convs: Vec<Conv>,
}

pub const FEATURE_CHANNELS: [usize; 3] = [8, 16, 32];

impl FeatureExtractor {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(3);
        let mut ci = 3;
        for (i, &co) in FEATURE_CHANNELS.iter().enumerate() {
            convs.push(add_conv(store, &format!("{prefix}.conv{i}"), ci, co, 3, false, &mut rng)?);
            ci = co;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            convs,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Feature maps at decreasing resolution. `H` and `W` should be divisible by 8.
    pub fn extract<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(image).chw();
        shape_check("feature extractor input", &[3], &[c])?;
        let centre = g.input(Tensor::full(&[3, h, w], T::of(0.5)));
        let mut cur = g.sub(image, centre)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            cur = conv.apply(g, cur)?;
            // x * sigmoid(x): smooth, so the perceptual loss has no kinks
            let gate = g.sigmoid(cur);
            cur = g.mul(cur, gate)?;
            cur = g.avg_pool2(cur);
            out.push(cur);
        }
        Ok(out)
    }

    pub fn extract_values<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(store, None);
        let x = g.input(image.clone());
        let feats = self.extract(&mut g, x)?;
        Ok(feats.into_iter().map(|f| g.value(f).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGrads, ParamMask};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn shape_contract_and_padding() {
        let mut store = ParamStore::<f32>::new();
        let net = Hourglass::build(&mut store, "net", HourglassConfig::new(8, 3, 3, 16), 1).unwrap();
        let out = net.apply(&store, &random_input(8, 64, 64, 0)).unwrap();
        assert_eq!(out.shape(), &[3, 64, 64]);
        let out = net.apply(&store, &random_input(8, 60, 60, 0)).unwrap();
        assert_eq!(out.shape(), &[3, 60, 60]);
    }

    #[test]
    fn padding_matches_explicit_zero_padding() {
        let mut store = ParamStore::<f64>::new();
        let net = Hourglass::build(&mut store, "net", HourglassConfig::new(2, 1, 2, 4), 5).unwrap();
        let x = random_input(2, 6, 7, 3).cast::<f64>();
        let mut padded = Tensor::zeros(&[2, 8, 8]);
        for c in 0..2 {
            for y in 0..6 {
                for xx in 0..7 {
                    padded.set(c, y, xx, x.at(c, y, xx));
                }
            }
        }
        let a = net.apply(&store, &x).unwrap();
        let b = net.apply(&store, &padded).unwrap();
        for y in 0..6 {
            for xx in 0..7 {
                assert_eq!(a.at(0, y, xx), b.at(0, y, xx));
            }
        }
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        let cfg = HourglassConfig::new(8, 3, 3, 16);
        let mut s1 = ParamStore::<f32>::new();
        let mut s2 = ParamStore::<f32>::new();
        let mut s3 = ParamStore::<f32>::new();
        Hourglass::build(&mut s1, "n", cfg.clone(), 9).unwrap();
        Hourglass::build(&mut s2, "n", cfg.clone(), 9).unwrap();
        Hourglass::build(&mut s3, "n", cfg, 10).unwrap();
        assert_eq!(s1.hash_prefix("n"), s2.hash_prefix("n"));
        assert_ne!(s1.hash_prefix("n"), s3.hash_prefix("n"));
    }

    #[test]
    fn param_count_matches_store() {
        for (levels, base) in [(1, 4), (2, 8), (3, 16)] {
            let cfg = HourglassConfig::new(5, 2, levels, base);
            let mut store = ParamStore::<f32>::new();
            Hourglass::build(&mut store, "n", cfg.clone(), 0).unwrap();
            assert_eq!(store.count("n"), cfg.param_count());
        }
    }

    #[test]
    fn zero_head_outputs_zero_and_sigmoid_half() {
        let mut store = ParamStore::<f32>::new();
        let a = Hourglass::build(&mut store, "a", HourglassConfig::new(3, 2, 2, 4).zero_head(), 0).unwrap();
        let mut cfg = HourglassConfig::new(3, 1, 2, 4).zero_head();
        cfg.final_activation = FinalActivation::Sigmoid;
        let b = Hourglass::build(&mut store, "b", cfg, 0).unwrap();
        let x = random_input(3, 16, 16, 1);
        assert!(a.apply(&store, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(b.apply(&store, &x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        for cfg in [HourglassConfig::new(3, 1, 0, 4), HourglassConfig::new(0, 1, 2, 4), HourglassConfig::new(3, 1, 2, 0)] {
            assert!(matches!(Hourglass::build(&mut store, "x", cfg, 0), Err(Error::InvalidConfig(_))));
        }
    }

    fn live_fraction(cfg: HourglassConfig, h: usize, w: usize) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let net = Hourglass::build(&mut store, "n", cfg.clone(), 3).unwrap();
        let mask = ParamMask::all(store.len());
        let mut g = Graph::new(&store, Some(&mask));
        let x = g.input(random_input(cfg.in_channels, h, w, 4).cast());
        let y = net.forward(&mut g, x).unwrap();
        let target = g.input(random_input(cfg.out_channels, h, w, 5).cast());
        let loss = g.l1(y, target).unwrap();
        let mut grads = ParamGrads::new(store.len());
        g.backward(loss).accumulate_into(&mut grads);
        let live: usize = grads
            .iter()
            .map(|(_, t)| t.data().iter().filter(|v| **v != 0.0).count())
            .sum();
        live as f64 / store.count("") as f64
    }

    #[test]
    fn gradients_reach_nearly_every_parameter() {
        assert!(live_fraction(HourglassConfig::new(4, 3, 2, 8), 16, 16) > 0.99);
        let mut cfg = HourglassConfig::new(4, 1, 3, 4);
        cfg.norm = Norm::Instance;
        cfg.final_activation = FinalActivation::Sigmoid;
        assert!(live_fraction(cfg, 24, 24) > 0.99);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn shape_preserved_for_random_configs(
            ci in 1usize..6, co in 1usize..4, levels in 1usize..4, base in 1usize..5,
            h in 1usize..20, w in 1usize..20, instance in prop::bool::ANY,
        ) {
            let mut cfg = HourglassConfig::new(ci, co, levels, base);
            if instance {
                cfg.norm = Norm::Instance;
            }
            let mut store = ParamStore::<f32>::new();
            let net = Hourglass::build(&mut store, "n", cfg, 0).unwrap();
            let out = net.apply(&store, &random_input(ci, h, w, 1)).unwrap();
            prop_assert_eq!(out.shape(), &[co, h, w]);
            prop_assert!(out.all_finite());
        }
    }

    #[test]
    fn feature_pyramid_shapes_and_determinism() {
        let mut store = ParamStore::<f32>::new();
        let fx = FeatureExtractor::build(&mut store, "features", 0).unwrap();
        let img = random_input(3, 32, 32, 2);
        let f = fx.extract_values(&store, &img).unwrap();
        assert_eq!(f[0].shape(), &[8, 16, 16]);
        assert_eq!(f[1].shape(), &[16, 8, 8]);
        assert_eq!(f[2].shape(), &[32, 4, 4]);
        assert_eq!(f, fx.extract_values(&store, &img).unwrap());
    }

    #[test]
    fn feature_distance_grows_with_perturbation() {
        let mut store = ParamStore::<f64>::new();
        let fx = FeatureExtractor::build(&mut store, "features", 0).unwrap();
        let img = random_input(3, 32, 32, 2).cast::<f64>();
        let noise = random_input(3, 32, 32, 3).cast::<f64>().map(|v| v - 0.5);
        let base = fx.extract_values(&store, &img).unwrap();
        let dist = |s: f64| -> f64 {
            let other = img.zip_map(&noise, |a, n| a + s * n).unwrap();
            let f = fx.extract_values(&store, &other).unwrap();
            f.iter().zip(&base).map(|(a, b)| a.sub(b).unwrap().sum_sq() / a.len() as f64).sum()
        };
        let (d0, d1, d2, d3) = (dist(0.0), dist(0.01), dist(0.05), dist(0.2));
        assert_eq!(d0, 0.0);
        assert!(d1 > 0.0 && d1 < d2 && d2 < d3, "{d1} {d2} {d3}");
    }
}
