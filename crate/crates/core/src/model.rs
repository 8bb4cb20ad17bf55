//! Student segmentation network, frozen teacher and per-region domain classifiers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use road_autodiff::{ConvSpec, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RoadError};
use crate::losses::FeatureMap;
use crate::scene::{Domain, RgbImage};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub dilations: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { widths: vec![16, 32, 64], dilations: vec![1, 1, 2], strides: vec![2, 2, 1], kernel_size: 3 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.dilations.len() != n || self.strides.len() != n {
            return Err(RoadError::Config(format!("backbone stage lists disagree: {self:?}")));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(RoadError::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.widths.iter().chain(&self.dilations).chain(&self.strides).any(|&v| v == 0) {
            return Err(RoadError::Config("backbone widths, dilations and strides must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated backbone has stages")
    }

    /// Padding `dilation·(k−1)/2` keeps every stage at exactly `input / stride`.
    pub fn stage_spec(&self, stage: usize) -> ConvSpec {
        let d = self.dilations[stage];
        ConvSpec { stride: self.strides[stage], dilation: d, padding: d * (self.kernel_size - 1) / 2 }
    }
}

/// Named view over a model's parameters; binding order matches this order.
pub trait Parameters<T> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;
}

/// SHA-256 over parameter names and bytes.
pub fn parameter_checksum<T: Float, M: Parameters<T> + ?Sized>(model: &M) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.named_parameters() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Float> ConvLayer<T> {
    /// He-normal weights, zero bias.
    pub fn he(c_out: usize, c_in: usize, k: usize, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| T::from_f64_lossy(normal.sample(rng))),
            bias: Tensor::zeros(&[c_out]),
            spec,
        }
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundLayer {
        BoundLayer { weight: g.leaf(self.weight.clone(), trainable), bias: g.leaf(self.bias.clone(), trainable) }
    }

    fn apply(&self, g: &mut Graph<T>, bound: BoundLayer, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, bound.weight, Some(bound.bias), self.spec)?)
    }

    pub fn cast<U: Float>(&self) -> ConvLayer<U> {
        ConvLayer { weight: self.weight.cast(), bias: self.bias.cast(), spec: self.spec }
    }
}

/// Graph handles of one layer's weight and bias.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub stages: Vec<BoundLayer>,
}

impl BoundBackbone {
    pub fn vars(&self) -> Vec<Var> {
        self.stages.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub stages: Vec<ConvLayer<T>>,
}

impl<T: Float> Backbone<T> {
    pub fn new(config: &BackboneConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut c_in = in_channels;
        let stages = (0..config.stages())
            .map(|i| {
                let layer = ConvLayer::he(config.widths[i], c_in, config.kernel_size, config.stage_spec(i), rng);
                c_in = config.widths[i];
                layer
            })
            .collect();
        Ok(Self { config: config.clone(), stages })
    }

    /// Registers parameters; stages for which `trainable` is false become constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(usize) -> bool) -> BoundBackbone {
        BoundBackbone { stages: self.stages.iter().enumerate().map(|(i, l)| l.bind(g, trainable(i))).collect() }
    }

    /// conv → relu per stage; the distilled features are post-activation.
    pub fn forward(&self, g: &mut Graph<T>, bound: &BoundBackbone, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, b) in self.stages.iter().zip(&bound.stages) {
            let y = layer.apply(g, *b, h)?;
            h = g.relu(y);
        }
        Ok(h)
    }

    /// Features of an image crop, tagged with where the crop came from.
    pub fn forward_features(
        &self,
        g: &mut Graph<T>,
        bound: &BoundBackbone,
        crop: Var,
        crop_offset: (usize, usize),
        domain: Domain,
    ) -> Result<FeatureMap> {
        let stride = self.config.total_stride();
        let shape = g.shape(crop).to_vec();
        if shape.len() != 3 || shape[1] % stride != 0 || shape[2] % stride != 0 {
            return Err(RoadError::Shape(format!("crop {shape:?} not divisible by total stride {stride}")));
        }
        let features = self.forward(g, bound, crop)?;
        Ok(FeatureMap::new(g, features, crop_offset, stride, domain))
    }

    pub fn cast<U: Float>(&self) -> Backbone<U> {
        Backbone { config: self.config.clone(), stages: self.stages.iter().map(ConvLayer::cast).collect() }
    }

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("backbone.{i}.weight"), &l.weight), (format!("backbone.{i}.bias"), &l.bias)])
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.stages
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [(format!("backbone.{i}.weight"), &mut l.weight), (format!("backbone.{i}.bias"), &mut l.bias)]
            })
            .collect()
    }
}

impl<T: Float> Parameters<T> for Backbone<T> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.named()
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.named_mut()
    }
}

/// Crop of an 8-bit image as a normalized `[3,h,w]` tensor.
pub fn crop_tensor<T: Float>(image: &RgbImage, offset: (usize, usize), size: (usize, usize)) -> Result<Tensor<T>> {
    let (r0, c0) = offset;
    let (h, w) = size;
    if r0 + h > image.height || c0 + w > image.width {
        return Err(RoadError::Contract(format!(
            "crop {h}x{w} at {offset:?} exceeds image {}x{}",
            image.height, image.width
        )));
    }
    let scale = T::from_f64_lossy(1.0 / 64.0);
    let centre = T::from_f64_lossy(128.0);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        let (y, x) = (rest / w, rest % w);
        let v = image.data[((r0 + y) * image.width + c0 + x) * 3 + c];
        (T::from_f64_lossy(v as f64) - centre) * scale
    }))
}

#[derive(Debug, Clone)]
pub struct BoundStudent {
    pub backbone: BoundBackbone,
    pub head: BoundLayer,
}

impl BoundStudent {
    /// Handles in [`Parameters::named_parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.backbone.vars();
        v.extend([self.head.weight, self.head.bias]);
        v
    }
}

/// Segmentation network: dilated backbone, 1×1 classifier, bilinear upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel<T> {
    pub backbone: Backbone<T>,
    pub head: ConvLayer<T>,
    pub num_classes: usize,
    pub frozen_prefix_stages: usize,
}

impl<T: Float> StudentModel<T> {
    pub fn new(config: &BackboneConfig, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = Backbone::new(config, 3, rng)?;
        Ok(Self::with_backbone(backbone, num_classes, rng))
    }

    /// Fresh classifier on top of an existing (e.g. pretrained) backbone.
    pub fn with_backbone(backbone: Backbone<T>, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = backbone.config.out_channels();
        let head = ConvLayer::he(num_classes, c, 1, ConvSpec::default(), rng);
        Self { backbone, head, num_classes, frozen_prefix_stages: 0 }
    }

    /// Excludes the first `k` backbone stages from optimisation.
    pub fn freeze_prefix(mut self, k: usize) -> Result<Self> {
        if k > self.backbone.config.stages() {
            return Err(RoadError::Config(format!(
                "cannot freeze {k} of {} stages",
                self.backbone.config.stages()
            )));
        }
        self.frozen_prefix_stages = k;
        Ok(self)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundStudent {
        let k = self.frozen_prefix_stages;
        BoundStudent { backbone: self.backbone.bind(g, |i| i >= k), head: self.head.bind(g, true) }
    }

    /// Constant copy of every parameter, for inference.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundStudent {
        BoundStudent { backbone: self.backbone.bind(g, |_| false), head: self.head.bind(g, false) }
    }

    pub fn forward_features(
        &self,
        g: &mut Graph<T>,
        bound: &BoundStudent,
        crop: Var,
        crop_offset: (usize, usize),
        domain: Domain,
    ) -> Result<FeatureMap> {
        self.backbone.forward_features(g, &bound.backbone, crop, crop_offset, domain)
    }

    /// Class logits at feature resolution, upsampled to `size`.
    pub fn classify(&self, g: &mut Graph<T>, bound: &BoundStudent, features: Var, size: (usize, usize)) -> Result<Var> {
        let logits = self.head.apply(g, bound.head, features)?;
        Ok(g.upsample_bilinear(logits, size.0, size.1)?)
    }

    /// `[num_classes, h, w]` logits for a `[3, h, w]` crop.
    pub fn forward_segmentation(&self, g: &mut Graph<T>, bound: &BoundStudent, crop: Var) -> Result<Var> {
        let size = (g.shape(crop)[1], g.shape(crop)[2]);
        let fm = self.forward_features(g, bound, crop, (0, 0), Domain::Source)?;
        self.classify(g, bound, fm.features, size)
    }

    /// Per-pixel argmax prediction of a whole image (or tile).
    pub fn predict(&self, image: &RgbImage, offset: (usize, usize), size: (usize, usize)) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let x = g.constant(crop_tensor(image, offset, size)?);
        let logits = self.forward_segmentation(&mut g, &bound, x)?;
        Ok(argmax_channels(g.value(logits)))
    }

    pub fn cast<U: Float>(&self) -> StudentModel<U> {
        StudentModel {
            backbone: self.backbone.cast(),
            head: self.head.cast(),
            num_classes: self.num_classes,
            frozen_prefix_stages: self.frozen_prefix_stages,
        }
    }
}

impl<T: Float> Parameters<T> for StudentModel<T> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.backbone.named();
        v.push(("head.weight".into(), &self.head.weight));
        v.push(("head.bias".into(), &self.head.bias));
        v
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.backbone.named_mut();
        v.push(("head.weight".into(), &mut self.head.weight));
        v.push(("head.bias".into(), &mut self.head.bias));
        v
    }
}

/// Index of the largest channel at every position of a `[K,h,w]` tensor.
/// Ties resolve to the lowest class index.
pub fn argmax_channels<T: Float>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (k, hw) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// A backbone that never changes after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel<T> {
    backbone: Backbone<T>,
}

impl<T: Float> TeacherModel<T> {
    pub fn freeze(backbone: Backbone<T>) -> Self {
        Self { backbone }
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    /// Features with every parameter bound as a constant.
    pub fn forward_features(
        &self,
        g: &mut Graph<T>,
        crop: Var,
        crop_offset: (usize, usize),
        domain: Domain,
    ) -> Result<FeatureMap> {
        let bound = self.backbone.bind(g, |_| false);
        self.backbone.forward_features(g, &bound, crop, crop_offset, domain)
    }

    pub fn checksum(&self) -> String {
        parameter_checksum(&self.backbone)
    }

    pub fn cast<U: Float>(&self) -> TeacherModel<U> {
        TeacherModel { backbone: self.backbone.cast() }
    }
}

/// Two-layer perceptron on channel vectors: `in → hidden → 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<T: Float> MlpHead<T> {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let init = |fan_in: usize, shape: &[usize], rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
        };
        Self {
            w1: init(in_dim, &[in_dim, hidden], rng),
            b1: Tensor::zeros(&[hidden]),
            w2: init(hidden, &[hidden, 2], rng),
            b2: Tensor::zeros(&[2]),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundMlp {
        BoundMlp {
            w1: g.leaf(self.w1.clone(), trainable),
            b1: g.leaf(self.b1.clone(), trainable),
            w2: g.leaf(self.w2.clone(), trainable),
            b2: g.leaf(self.b2.clone(), trainable),
        }
    }

    /// `[N, in]` → `[N, 2]` domain logits.
    pub fn forward(g: &mut Graph<T>, bound: &BoundMlp, x: Var) -> Result<Var> {
        let h = g.affine(x, bound.w1, bound.b1)?;
        let h = g.relu(h);
        Ok(g.affine(h, bound.w2, bound.b2)?)
    }
}

/// One independent domain classifier per spatial region.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifierBank<T> {
    pub heads: Vec<MlpHead<T>>,
}

impl<T: Float> DomainClassifierBank<T> {
    pub const HIDDEN: usize = 32;

    pub fn new(regions: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { heads: (0..regions).map(|_| MlpHead::new(in_dim, Self::HIDDEN, rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Vec<BoundMlp> {
        self.heads.iter().map(|h| h.bind(g, true)).collect()
    }

    pub fn cast<U: Float>(&self) -> DomainClassifierBank<U> {
        DomainClassifierBank {
            heads: self
                .heads
                .iter()
                .map(|h| MlpHead { w1: h.w1.cast(), b1: h.b1.cast(), w2: h.w2.cast(), b2: h.b2.cast() })
                .collect(),
        }
    }
}

pub fn bound_bank_vars(bound: &[BoundMlp]) -> Vec<Var> {
    bound.iter().flat_map(|b| [b.w1, b.b1, b.w2, b.b2]).collect()
}

impl<T: Float> Parameters<T> for DomainClassifierBank<T> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.heads
            .iter()
            .enumerate()
            .flat_map(|(m, h)| {
                [
                    (format!("domain.{m}.w1"), &h.w1),
                    (format!("domain.{m}.b1"), &h.b1),
                    (format!("domain.{m}.w2"), &h.w2),
                    (format!("domain.{m}.b2"), &h.b2),
                ]
            })
            .collect()
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.heads
            .iter_mut()
            .enumerate()
            .flat_map(|(m, h)| {
                [
                    (format!("domain.{m}.w1"), &mut h.w1),
                    (format!("domain.{m}.b1"), &mut h.b1),
                    (format!("domain.{m}.w2"), &mut h.w2),
                    (format!("domain.{m}.b2"), &mut h.b2),
                ]
            })
            .collect()
    }
}

/// Uniform random crop offset aligned to `align`.
pub fn random_offset(rng: &mut ChaCha8Rng, image: (usize, usize), crop: (usize, usize), align: usize) -> (usize, usize) {
    let pick = |extent: usize, size: usize, rng: &mut ChaCha8Rng| {
        let slots = (extent - size) / align;
        rng.gen_range(0..=slots) * align
    };
    let r = pick(image.0, crop.0, rng);
    let c = pick(image.1, crop.1, rng);
    (r, c)
}
