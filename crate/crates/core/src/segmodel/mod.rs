//! Small differentiable segmentation model: a three-block convolutional
//! feature extractor followed by one linear binary scorer per class.
//!
//! Scorer channel `k` always scores class ID `k`; channel 0 is background.

mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{
    load_checkpoint, load_snapshot, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION,
};
use layers::{avg_pool2, avg_pool2_backward, leaky_relu, leaky_relu_backward, Conv3x3};

use crate::error::{Error, Result};
use crate::tensor::{ClassId, LabelMap, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of the first two conv blocks.
    pub hidden: [usize; 2],
    /// Feature dimension `d`.
    pub feature_dim: usize,
    /// Standard deviation of the noise added to background weights when a new
    /// scorer is created.
    pub head_init_noise: f64,
    /// Keep extractor parameters fixed during incremental steps.
    pub freeze_extractor: bool,
    /// Negative-side slope of the extractor activations; 0 gives plain ReLU.
    pub leak: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            hidden: [8, 16],
            feature_dim: 16,
            head_init_noise: 1e-3,
            freeze_extractor: false,
            leak: 0.1,
        }
    }
}

/// Total downsampling factor of the extractor.
pub const STRIDE: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.height % STRIDE != 0 {
            return Err(Error::config(
                "height",
                format!("must be a positive multiple of {STRIDE}"),
            ));
        }
        if self.width == 0 || self.width % STRIDE != 0 {
            return Err(Error::config(
                "width",
                format!("must be a positive multiple of {STRIDE}"),
            ));
        }
        if self.hidden.contains(&0) || self.feature_dim == 0 {
            return Err(Error::config(
                "feature_dim",
                "layer widths must be positive",
            ));
        }
        if self.head_init_noise < 0.0 {
            return Err(Error::config("head_init_noise", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::config("leak", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        (self.height / STRIDE, self.width / STRIDE)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// All trainable parameters. Also used as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub convs: [Conv3x3; 3],
    /// `K × d`, row `k` scores class `k`.
    pub score_w: Vec<f64>,
    pub score_b: Vec<f64>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        let z = |c: &Conv3x3| Conv3x3::zeros(c.cin, c.cout);
        Params {
            convs: [z(&other.convs[0]), z(&other.convs[1]), z(&other.convs[2])],
            score_w: vec![0.0; other.score_w.len()],
            score_b: vec![0.0; other.score_b.len()],
        }
    }

    /// Parameter tensors keyed by stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &[f64])> {
        let mut v: Vec<(String, &[f64])> = Vec::with_capacity(8);
        for (i, c) in self.convs.iter().enumerate() {
            v.push((format!("extractor.conv{}.weight", i + 1), &c.weight));
            v.push((format!("extractor.conv{}.bias", i + 1), &c.bias));
        }
        v.push(("scorers.weight".into(), &self.score_w));
        v.push(("scorers.bias".into(), &self.score_b));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v: Vec<(String, &mut [f64])> = Vec::with_capacity(8);
        let [c1, c2, c3] = &mut self.convs;
        for (i, c) in [c1, c2, c3].into_iter().enumerate() {
            v.push((format!("extractor.conv{}.weight", i + 1), &mut c.weight));
            v.push((format!("extractor.conv{}.bias", i + 1), &mut c.bias));
        }
        v.push(("scorers.weight".into(), &mut self.score_w));
        v.push(("scorers.bias".into(), &mut self.score_b));
        v
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, a) in self.named_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Euclidean norm over every parameter.
    pub fn norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_extractor(name: &str) -> bool {
        name.starts_with("extractor.")
    }
}

/// Output of a forward pass at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `h × w × d`.
    pub features: Tensor3,
    /// `h × w × K` raw (pre-sigmoid) scores.
    pub logits: Tensor3,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    input: Tensor3,
    pre1: Tensor3,
    pool1: Tensor3,
    pre2: Tensor3,
    pool2: Tensor3,
    pre3: Tensor3,
    features: Tensor3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub params: Params,
    /// Step at which each class's scorer was created (background = 0).
    pub step_of_class: BTreeMap<ClassId, usize>,
}

impl SegModel {
    /// Fresh model holding only the background scorer.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let widths = [3, config.hidden[0], config.hidden[1], config.feature_dim];
        let mut make = |cin: usize, cout: usize| {
            let mut c = Conv3x3::zeros(cin, cout);
            let he = Normal::new(0.0, (2.0 / (9.0 * cin as f64)).sqrt()).expect("valid sigma");
            c.weight.iter_mut().for_each(|w| *w = he.sample(rng));
            c
        };
        let convs = [
            make(widths[0], widths[1]),
            make(widths[1], widths[2]),
            make(widths[2], widths[3]),
        ];
        let head = Normal::new(0.0, 0.01).expect("valid sigma");
        let score_w = (0..config.feature_dim).map(|_| head.sample(rng)).collect();
        Ok(Self {
            params: Params {
                convs,
                score_w,
                score_b: vec![0.0],
            },
            step_of_class: BTreeMap::from([(0, 0)]),
            config,
        })
    }

    pub fn num_scorers(&self) -> usize {
        self.params.score_b.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Classes with a scorer, background included, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        self.step_of_class.keys().copied().collect()
    }

    /// Appends one scorer per new class, initialised from the background
    /// scorer plus Gaussian noise. Existing parameters are untouched.
    ///
    /// New classes must be the next contiguous class IDs.
    pub fn expand_head<R: Rng + ?Sized>(
        &mut self,
        new_classes: &[ClassId],
        step: usize,
        rng: &mut R,
    ) -> Result<()> {
        let k = self.num_scorers();
        for (i, &c) in new_classes.iter().enumerate() {
            if self.step_of_class.contains_key(&c) || new_classes[..i].contains(&c) {
                return Err(Error::contract(format!("class {c} already has a scorer")));
            }
            if c as usize != k + i {
                return Err(Error::contract(format!(
                    "class {c} is not the next contiguous id (expected {})",
                    k + i
                )));
            }
        }
        let d = self.feature_dim();
        let noise = Normal::new(0.0, self.config.head_init_noise.max(f64::MIN_POSITIVE))
            .expect("valid sigma");
        let bg_w: Vec<f64> = self.params.score_w[..d].to_vec();
        let bg_b = self.params.score_b[0];
        for &c in new_classes {
            for &w in &bg_w {
                let n = if self.config.head_init_noise > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                self.params.score_w.push(w + n);
            }
            self.params.score_b.push(bg_b);
            self.step_of_class.insert(c, step);
        }
        Ok(())
    }

    fn check_image(&self, image: &Tensor3) -> Result<()> {
        if image.h != self.config.height || image.w != self.config.width || image.c != 3 {
            return Err(Error::contract(format!(
                "image is {}x{}x{}, model expects {}x{}x3",
                image.h, image.w, image.c, self.config.height, self.config.width
            )));
        }
        Ok(())
    }

    /// Extractor-only pass.
    pub fn extract(&self, image: &Tensor3) -> Result<Tensor3> {
        Ok(self.forward_cached(image)?.1.features)
    }

    pub fn forward(&self, image: &Tensor3) -> Result<Forward> {
        Ok(self.forward_cached(image)?.0)
    }

    pub fn forward_cached(&self, image: &Tensor3) -> Result<(Forward, Cache)> {
        self.check_image(image)?;
        let [c1, c2, c3] = &self.params.convs;
        let pre1 = c1.forward(image);
        let leak = self.config.leak;
        let pool1 = avg_pool2(&leaky_relu(&pre1, leak));
        let pre2 = c2.forward(&pool1);
        let pool2 = avg_pool2(&leaky_relu(&pre2, leak));
        let pre3 = c3.forward(&pool2);
        let features = leaky_relu(&pre3, leak);
        let logits = self.score_map(&features);
        let cache = Cache {
            input: image.clone(),
            pre1,
            pool1,
            pre2,
            pool2,
            pre3,
            features: features.clone(),
        };
        Ok((Forward { features, logits }, cache))
    }

    /// Applies every scorer to a single `d`-vector.
    pub fn score(&self, feature: &[f64]) -> Vec<f64> {
        let d = self.feature_dim();
        self.params
            .score_b
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let row = &self.params.score_w[k * d..(k + 1) * d];
                b + row.iter().zip(feature).map(|(w, f)| w * f).sum::<f64>()
            })
            .collect()
    }

    pub fn score_map(&self, features: &Tensor3) -> Tensor3 {
        let k = self.num_scorers();
        let mut logits = Tensor3::zeros(features.h, features.w, k);
        for p in 0..features.positions() {
            let s = self.score(features.pixel(p));
            logits.pixel_mut(p).copy_from_slice(&s);
        }
        logits
    }

    /// Scorer gradient for a feature vector that bypasses the extractor
    /// (replayed features). `dlogit[k]` is dL/d(logit_k).
    pub fn scorer_backward_vec(&self, feature: &[f64], dlogit: &[f64], grads: &mut Params) {
        let d = self.feature_dim();
        for (k, &g) in dlogit.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.score_b[k] += g;
            for (gw, f) in grads.score_w[k * d..(k + 1) * d].iter_mut().zip(feature) {
                *gw += g * f;
            }
        }
    }

    /// Back-propagates `dlogits` (and optional extra feature gradients) through
    /// the scorers and the extractor, accumulating into `grads`.
    pub fn backward(
        &self,
        cache: &Cache,
        dlogits: &Tensor3,
        dfeatures_extra: Option<&Tensor3>,
        grads: &mut Params,
    ) {
        let d = self.feature_dim();
        let k = self.num_scorers();
        let feats = &cache.features;
        let mut dfeat = match dfeatures_extra {
            Some(t) => t.clone(),
            None => Tensor3::zeros(feats.h, feats.w, d),
        };
        for p in 0..feats.positions() {
            let dl = dlogits.pixel(p);
            let f = feats.pixel(p);
            let df = &mut dfeat.data[p * d..(p + 1) * d];
            for c in 0..k {
                let g = dl[c];
                if g == 0.0 {
                    continue;
                }
                grads.score_b[c] += g;
                let row = &self.params.score_w[c * d..(c + 1) * d];
                let grow = &mut grads.score_w[c * d..(c + 1) * d];
                for j in 0..d {
                    grow[j] += g * f[j];
                    df[j] += g * row[j];
                }
            }
        }
        let [c1, c2, c3] = &self.params.convs;
        let [g1, g2, g3] = &mut grads.convs;
        let leak = self.config.leak;
        let d3 = leaky_relu_backward(&cache.pre3, &dfeat, leak);
        let dpool2 = c3
            .backward(&cache.pool2, &d3, g3, true)
            .expect("input grad");
        let drelu2 = avg_pool2_backward(&dpool2, cache.pre2.h, cache.pre2.w);
        let d2 = leaky_relu_backward(&cache.pre2, &drelu2, leak);
        let dpool1 = c2
            .backward(&cache.pool1, &d2, g2, true)
            .expect("input grad");
        let drelu1 = avg_pool2_backward(&dpool1, cache.pre1.h, cache.pre1.w);
        let d1 = leaky_relu_backward(&cache.pre1, &drelu1, leak);
        c1.backward(&cache.input, &d1, g1, false);
    }

    /// SHA-256 over all parameter bytes, in hex.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, data) in self.params.named() {
            h.update(name.as_bytes());
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Frozen copy of the current parameters.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot(Arc::new(self.clone()))
    }
}

/// Immutable, cheaply clonable copy of a model at a step boundary.
#[derive(Debug, Clone)]
pub struct ModelSnapshot(Arc<SegModel>);

impl ModelSnapshot {
    pub fn from_model(model: SegModel) -> Self {
        Self(Arc::new(model))
    }

    /// Mutable copy, e.g. to resume training from a checkpoint.
    pub fn to_model(&self) -> SegModel {
        (*self.0).clone()
    }
}

impl Deref for ModelSnapshot {
    type Target = SegModel;

    fn deref(&self) -> &SegModel {
        &self.0
    }
}

/// Per-position argmax over channels; ties go to the lowest class ID.
///
/// Sigmoid is strictly monotone, so the argmax is taken on raw logits; this
/// avoids spurious ties where the sigmoid saturates in floating point.
pub fn predict(logits: &Tensor3) -> LabelMap {
    let mut out = Vec::with_capacity(logits.positions());
    for p in 0..logits.positions() {
        let row = logits.pixel(p);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        out.push(best as ClassId);
    }
    LabelMap {
        h: logits.h,
        w: logits.w,
        data: out,
    }
}

/// Prediction at full image resolution (nearest-neighbour upsampling).
pub fn predict_full(logits: &Tensor3) -> LabelMap {
    predict(logits).upsample(STRIDE)
}
