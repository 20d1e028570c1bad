//! The dehazing network and the frozen feature extractor.
//!
//! One network serves both stages: stage 1 maps the hazy input to an estimate
//! of the captured clean image, stage 2 maps that estimate to the ideal clean
//! image. Every head ends in an activation that pins its range, so the output
//! invariants hold for arbitrary weights.
//!
//! Layout for base width `c` on an `H x W` input:
//!
//! ```text
//! enc1   conv3x3/2   3 -> c      relu              H/2
//! enc2   conv3x3/2   c -> 2c     relu              H/4
//! clean  up2 ++ enc1 -> conv1x1 3c -> c relu -> up2 ++ input -> conv3x3 (c+3) -> 3 -> sigmoid
//! depth  conv3x3 2c -> c/2 relu -> up4 -> conv3x3 c/2 -> 1 -> sigmoid, rescaled to [z_min, z_max]
//! beta   global pool -> conv1x1 2c -> 1 -> softplus + 1e-4
//! light  global pool -> conv1x1 2c -> 3 -> sigmoid
//! ```
//!
//! Parameter count: `30c^2 + 71c + 89` (8 905 at `c = 16`).

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{DepthMap, Error, Image, Real, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Floor added to the softplus scattering head.
pub const BETA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub seed: u64,
    /// Seed of the frozen feature extractor.
    pub feature_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            z_min: 0.5,
            z_max: 3.0,
            seed: 0,
            feature_seed: 0x5EED_F00D,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be a positive even number, got {}",
                self.base_channels
            )));
        }
        if !(self.z_min > 0.0) || !(self.z_max > self.z_min) || !self.z_max.is_finite() {
            return Err(Error::Config(format!(
                "depth bounds [{}, {}] must satisfy 0 < z_min < z_max",
                self.z_min, self.z_max
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`DehazeNet`].
    pub fn param_count(&self) -> usize {
        let c = self.base_channels;
        30 * c * c + 71 * c + 89
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, frozen: bool) -> Result<Var> {
        let (w, b) = if frozen {
            (g.frozen(store, self.w)?, g.frozen(store, self.b)?)
        } else {
            (g.param(store, self.w)?, g.param(store, self.b)?)
        };
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    /// Fan-in scaled uniform weights (`gain = 6` for relu layers, `3` for
    /// heads), zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let bound = (gain / fan_in).sqrt();
        let n = cout * cin * k * k;
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect();
        let w = self
            .store
            .add(format!("{name}.weight"), Tensor::new(vec![cout, cin, k, k], data).expect("sized"));
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }
}

/// Predictions of one `Dehaze` pass.
#[derive(Clone, Copy, Debug)]
pub struct DehazeOutputs {
    /// `B x 3 x H x W` in `[0, 1]`.
    pub clean: Var,
    /// `B x 3 x 1 x 1` in `[0, 1]`.
    pub airlight: Var,
    /// `B x 1 x 1 x 1`, strictly positive.
    pub beta: Var,
    /// `B x 1 x H x W` in `[z_min, z_max]`.
    pub depth: Var,
}

/// Parameter layout of the dehazing network. Weights live in a separate
/// [`ParamStore`] so the same layout drives `f32` training and `f64` checks.
#[derive(Clone, Debug)]
pub struct DehazeNet {
    config: NetworkConfig,
    enc1: Conv,
    enc2: Conv,
    clean1: Conv,
    clean2: Conv,
    depth1: Conv,
    depth2: Conv,
    beta: Conv,
    light: Conv,
}

impl DehazeNet {
    /// Fresh weights, deterministic per `config.seed`.
    pub fn init(config: NetworkConfig) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let c = config.base_channels;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let net = Self {
            config,
            enc1: b.conv("enc1", 3, c, 3, 2, 6.0),
            enc2: b.conv("enc2", c, 2 * c, 3, 2, 6.0),
            clean1: b.conv("clean1", 3 * c, c, 1, 1, 6.0),
            clean2: b.conv("clean2", c + 3, 3, 3, 1, 3.0),
            depth1: b.conv("depth1", 2 * c, c / 2, 3, 1, 6.0),
            depth2: b.conv("depth2", c / 2, 1, 3, 1, 3.0),
            beta: b.conv("beta", 2 * c, 1, 1, 1, 3.0),
            light: b.conv("light", 2 * c, 3, 1, 1, 3.0),
        };
        Ok((net, store))
    }

    /// Layout for `config`, checked against an existing store (e.g. one
    /// loaded from a checkpoint).
    pub fn for_store<T: Real>(config: NetworkConfig, store: &ParamStore<T>) -> Result<Self> {
        let (net, reference) = Self::init(config)?;
        let matches = reference.len() == store.len()
            && reference
                .ids()
                .all(|id| reference.name(id) == store.name(id) && reference.tensor(id).shape() == store.tensor(id).shape());
        if !matches {
            return Err(Error::Config(
                "parameter store does not match the network layout".into(),
            ));
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, input: Var) -> Result<()> {
        let s = g.shape(input);
        if s.len() != 4 || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] < 8 || s[3] < 8 {
            return Err(Error::shape(
                "dehaze_forward",
                format!("input {s:?} must be B x 3 x H x W with H, W >= 8 and divisible by 4"),
            ));
        }
        Ok(())
    }

    /// One `Dehaze` pass. Weights enter the graph as trainable parameters.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Result<DehazeOutputs> {
        self.forward_impl(g, store, input, false)
    }

    /// Like [`DehazeNet::forward`] but with weights as constants (inference).
    pub fn forward_frozen<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Result<DehazeOutputs> {
        self.forward_impl(g, store, input, true)
    }

    fn forward_impl<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var, frozen: bool) -> Result<DehazeOutputs> {
        self.check_input(g, input)?;
        let e1 = self.enc1.apply(g, store, input, frozen)?;
        let e1 = g.relu(e1)?;
        let e2 = self.enc2.apply(g, store, e1, frozen)?;
        let e2 = g.relu(e2)?;

        let u = g.upsample_nearest(e2, 2)?;
        let u = g.concat(&[u, e1])?;
        let u = self.clean1.apply(g, store, u, frozen)?;
        let u = g.relu(u)?;
        let u = g.upsample_nearest(u, 2)?;
        let u = g.concat(&[u, input])?;
        let u = self.clean2.apply(g, store, u, frozen)?;
        let clean = g.sigmoid(u)?;

        let d = self.depth1.apply(g, store, e2, frozen)?;
        let d = g.relu(d)?;
        let d = g.upsample_nearest(d, 4)?;
        let d = self.depth2.apply(g, store, d, frozen)?;
        let d = g.sigmoid(d)?;
        let span = g.scalar(T::from_f64c(self.config.z_max - self.config.z_min))?;
        let lo = g.scalar(T::from_f64c(self.config.z_min))?;
        let d = g.mul(d, span)?;
        let depth = g.add(d, lo)?;

        let pooled = g.global_avg_pool(e2)?;
        let b = self.beta.apply(g, store, pooled, frozen)?;
        let b = g.softplus(b)?;
        let floor = g.scalar(T::from_f64c(BETA_FLOOR))?;
        let beta = g.add(b, floor)?;

        let a = self.light.apply(g, store, pooled, frozen)?;
        let airlight = g.sigmoid(a)?;

        Ok(DehazeOutputs {
            clean,
            airlight,
            beta,
            depth,
        })
    }

    /// Stage 1 on the hazy input, stage 2 on stage 1's clean estimate, with
    /// shared weights and no detachment in between.
    pub fn two_stage<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, hazy: Var) -> Result<(DehazeOutputs, DehazeOutputs)> {
        let s1 = self.forward(g, store, hazy)?;
        let s2 = self.forward(g, store, s1.clean)?;
        Ok((s1, s2))
    }
}

/// Frozen random convolutional features: three conv-relu stages ending in 32
/// channels. Only the first stage downsamples, so even an 8x8 input leaves a
/// 4x4 map whose spatial variance is meaningful for the KL statistics.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    store: ParamStore<T>,
    stages: [Conv; 3],
}

pub const FEATURE_CHANNELS: usize = 32;

impl FeatureExtractor<f32> {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let stages = [
            b.conv("feat1", 3, 8, 3, 2, 6.0),
            b.conv("feat2", 8, 16, 3, 1, 6.0),
            b.conv("feat3", 16, FEATURE_CHANNELS, 3, 1, 6.0),
        ];
        Self { store, stages }
    }
}

impl<T: Real> FeatureExtractor<T> {
    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            store: self.store.cast(),
            stages: self.stages,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    /// `B x 3 x H x W -> B x 32 x H/2 x W/2`; gradients reach `image` but never
    /// the extractor weights.
    pub fn extract(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("feature_extract", format!("input {s:?}")));
        }
        let mut x = image;
        for stage in &self.stages {
            x = stage.apply(g, &self.store, x, true)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }
}

/// Stacks images into a `B x 3 x H x W` tensor.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::shape("images_to_tensor", "images in a batch differ in size"));
        }
        for c in 0..3 {
            data.extend(img.data().chunks_exact(3).map(|p| T::from_f64c(p[c] as f64)));
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Stacks depth maps into a `B x 1 x H x W` tensor.
pub fn depths_to_tensor<T: Real>(depths: &[&DepthMap]) -> Result<Tensor<T>> {
    let first = depths
        .first()
        .ok_or_else(|| Error::InvalidInput("empty depth batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(depths.len() * h * w);
    for d in depths {
        if d.height() != h || d.width() != w {
            return Err(Error::shape("depths_to_tensor", "depth maps in a batch differ in size"));
        }
        data.extend(d.data().iter().map(|v| T::from_f64c(*v as f64)));
    }
    Tensor::new(vec![depths.len(), 1, h, w], data)
}

/// Unstacks a `B x 3 x H x W` tensor into images (values clamped to `[0, 1]`).
pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("tensor_to_images", format!("{s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    t.data()
        .chunks_exact(3 * plane)
        .map(|chunk| {
            Image::from_fn(h, w, |y, x, c| {
                chunk[c * plane + y * w + x].as_f64().clamp(0.0, 1.0) as f32
            })
        })
        .collect()
}

/// Single-pass inference result for one image.
#[derive(Clone, Debug)]
pub struct Dehazed {
    pub clean: Image,
    pub beta: f64,
    pub airlight: [f64; 3],
    pub depth: DepthMap,
}

/// Dehazes `image` with exactly one forward pass.
pub fn dehaze_image(net: &DehazeNet, store: &ParamStore<f32>, image: &Image) -> Result<Dehazed> {
    let mut g = Graph::<f32>::new();
    let x = g.input(images_to_tensor(&[image])?)?;
    let out = net.forward_frozen(&mut g, store, x)?;
    let clean = tensor_to_images(g.value(out.clean))?.remove(0);
    let a = g.value(out.airlight).data();
    let depth = DepthMap::new(
        image.height(),
        image.width(),
        g.value(out.depth).data().to_vec(),
    )?;
    Ok(Dehazed {
        clean,
        beta: g.value(out.beta).item() as f64,
        airlight: [a[0] as f64, a[1] as f64, a[2] as f64],
        depth,
    })
}
