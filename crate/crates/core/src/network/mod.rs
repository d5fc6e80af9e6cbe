//! Toy backbone plus the artifact detection module.
//!
//! ```text
//! image 112x112x3
//!   -> 4 stride-2 3x3 stages (16, 32, 64, 128 ch)      backbone map 7x7x128
//!   -> 1x1 conv to 64 ch                               level 0, 7x7
//!   -> 3x3 valid conv                                  level 1, 5x5
//!   -> 3x3 valid conv                                  level 2, 3x3
//!   -> 3x3 valid conv                                  1x1x64
//! per level: 3x3 heads -> class logits and box offsets for every anchor
//! [1x1 map, global-average-pooled backbone map] -> fully connected -> 2 logits
//! ```
//!
//! Everything runs per image in `f64`; the batch is a loop. Checkpoints
//! store `f32`.

mod checkpoint;
pub mod layers;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, TensorEntry};
pub use layers::{Activation, Conv2d, Linear, Tensor};

use crate::detection::{build_anchors, decode_offsets, top_detection, AnchorConfig, AnchorSet, Corners};
use crate::image_ops::{Image, CHANNELS};
use crate::losses::softmax2;
use crate::rng::Rng;
use crate::{Error, Result};

/// IoU above which lower-scoring detections are suppressed.
pub const NMS_IOU: f64 = 0.45;

/// Spatial sizes of the extra-layer maps.
pub const PYRAMID_SIZES: [usize; 4] = [7, 5, 3, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub backbone_channels: Vec<usize>,
    pub extra_channels: usize,
    pub activation: Activation,
    /// Biases in the backbone stages.
    pub backbone_bias: bool,
    pub anchors: AnchorConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 112,
            backbone_channels: vec![16, 32, 64, 128],
            extra_channels: 64,
            activation: Activation::Relu,
            backbone_bias: true,
            anchors: AnchorConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) || self.extra_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        let final_size = self.input_size >> self.backbone_channels.len();
        if final_size << self.backbone_channels.len() != self.input_size || final_size != PYRAMID_SIZES[0] {
            return Err(Error::invalid(format!(
                "input size {} does not reduce to a {}x{} map over {} stride-2 stages",
                self.input_size,
                PYRAMID_SIZES[0],
                PYRAMID_SIZES[0],
                self.backbone_channels.len()
            )));
        }
        if self.anchors.levels != PYRAMID_SIZES[..3] {
            return Err(Error::invalid(format!(
                "anchor levels must be {:?}, got {:?}",
                &PYRAMID_SIZES[..3],
                self.anchors.levels
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.extra_channels + self.backbone_channels.last().copied().unwrap_or(0)
    }
}

/// Per-channel normalisation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for InputStats {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl InputStats {
    /// Mean and standard deviation of each channel over `images`.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0usize;
        for img in images {
            for p in img.data().chunks_exact(CHANNELS) {
                for c in 0..3 {
                    sum[c] += p[c];
                    sq[c] += p[c] * p[c];
                }
            }
            n += img.height() * img.width();
        }
        if n == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            out.mean[c] = mean;
            out.std[c] = (sq[c] / n as f64 - mean * mean).max(1e-8).sqrt();
        }
        out
    }
}

/// Backbone output plus the four extra-layer maps.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub backbone_map: Tensor,
    pub extra_maps: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `[genuine, fake]` logits per anchor.
    pub anchor_class_logits: Vec<[f64; 2]>,
    pub anchor_offsets: Vec<[f64; 4]>,
    /// `[genuine, fake]` image logits.
    pub image_logits: [f64; 2],
    /// Classifier input: the 1x1 map followed by the pooled backbone map.
    pub embedding: Vec<f64>,
}

impl ModelOutput {
    /// Fake-class probability of the image.
    pub fn fake_probability(&self) -> f64 {
        crate::losses::softmax2(&self.image_logits)[1]
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    backbone: Vec<(layers::ConvCache, Tensor)>,
    extras: Vec<(layers::ConvCache, Tensor)>,
    cls_heads: Vec<layers::ConvCache>,
    loc_heads: Vec<layers::ConvCache>,
}

impl ForwardCache {
    pub fn pyramid(&self) -> FeaturePyramid {
        FeaturePyramid {
            backbone_map: self.backbone.last().expect("stages").1.clone(),
            extra_maps: self.extras.iter().map(|(_, t)| t.clone()).collect(),
        }
    }
}

/// Loss gradients with respect to the model outputs. Missing anchor
/// gradients leave the detection heads untouched.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub image_logits: [f64; 2],
    pub anchor_class: Option<Vec<[f64; 2]>>,
    pub anchor_offsets: Option<Vec<[f64; 4]>>,
}

/// Named view of one parameter tensor and its gradient.
pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut Vec<f64>,
    pub grad: &'a mut Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub stats: InputStats,
    pub anchors: AnchorSet,
    backbone: Vec<Conv2d>,
    extras: Vec<Conv2d>,
    cls_heads: Vec<Conv2d>,
    loc_heads: Vec<Conv2d>,
    classifier: Linear,
}

impl Model {
    /// All-zero weights; see [`Model::init`].
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let anchors = build_anchors(&config.anchors)?;
        let mut backbone = Vec::new();
        let mut in_c = CHANNELS;
        for &c in &config.backbone_channels {
            backbone.push(Conv2d::new(in_c, c, 3, 2, 1, config.backbone_bias));
            in_c = c;
        }
        let e = config.extra_channels;
        let extras = vec![
            Conv2d::new(in_c, e, 1, 1, 0, true),
            Conv2d::new(e, e, 3, 1, 0, true),
            Conv2d::new(e, e, 3, 1, 0, true),
            Conv2d::new(e, e, 3, 1, 0, true),
        ];
        let variants = config.anchors.variants_per_level();
        let cls_heads = variants.iter().map(|v| Conv2d::new(e, v * 2, 3, 1, 1, true)).collect();
        let loc_heads = variants.iter().map(|v| Conv2d::new(e, v * 4, 3, 1, 1, true)).collect();
        let classifier = Linear::new(config.embedding_dim(), 2);
        Ok(Self {
            config,
            stats: InputStats::default(),
            anchors,
            backbone,
            extras,
            cls_heads,
            loc_heads,
            classifier,
        })
    }

    /// Uniform fan-in initialisation: `sqrt(6 / fan_in)` bound ahead of a
    /// ReLU, `sqrt(3 / fan_in)` for the linear outputs; all biases zero.
    pub fn new(config: NetworkConfig, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        m.init(rng);
        Ok(m)
    }

    pub fn init(&mut self, rng: &mut Rng) {
        for l in self.backbone.iter_mut().chain(self.extras.iter_mut()) {
            l.init(6.0, rng);
        }
        for l in self.cls_heads.iter_mut().chain(self.loc_heads.iter_mut()) {
            l.init(3.0, rng);
        }
        self.classifier.init(3.0, rng);
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    /// Normalised channel-major input tensor.
    pub fn prepare(&self, img: &Image) -> Result<Tensor> {
        let s = self.config.input_size;
        if img.height() != s || img.width() != s {
            return Err(Error::ShapeMismatch {
                expected: format!("{s}x{s} input"),
                actual: format!("{}x{}", img.height(), img.width()),
            });
        }
        let mut t = Tensor::zeros(CHANNELS, s, s);
        for (i, p) in img.data().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                t.data[c * s * s + i] = (p[c] - self.stats.mean[c]) / self.stats.std[c];
            }
        }
        Ok(t)
    }

    pub fn backbone_forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.config.input_size;
        if (x.c, x.h, x.w) != (CHANNELS, s, s) {
            return Err(Error::ShapeMismatch {
                expected: format!("{CHANNELS}x{s}x{s}"),
                actual: format!("{}x{}x{}", x.c, x.h, x.w),
            });
        }
        let mut cur = x.clone();
        for l in &self.backbone {
            let (mut y, _) = l.forward(&cur);
            self.config.activation.apply(&mut y.data);
            cur = y;
        }
        Ok(cur)
    }

    pub fn forward_image(&self, img: &Image) -> Result<ModelOutput> {
        let x = self.prepare(img)?;
        Ok(self.forward(&x)?.0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(ModelOutput, ForwardCache)> {
        let s = self.config.input_size;
        if (x.c, x.h, x.w) != (CHANNELS, s, s) {
            return Err(Error::ShapeMismatch {
                expected: format!("{CHANNELS}x{s}x{s}"),
                actual: format!("{}x{}x{}", x.c, x.h, x.w),
            });
        }
        let act = self.config.activation;
        let mut backbone = Vec::with_capacity(self.backbone.len());
        let mut cur = x.clone();
        for l in &self.backbone {
            let (mut y, c) = l.forward(&cur);
            act.apply(&mut y.data);
            cur = y.clone();
            backbone.push((c, y));
        }
        // Extra layers always use ReLU.
        let mut extras = Vec::with_capacity(4);
        for l in &self.extras {
            let (mut y, c) = l.forward(&cur);
            Activation::Relu.apply(&mut y.data);
            cur = y.clone();
            extras.push((c, y));
        }

        let total = self.anchors.len();
        let mut anchor_class_logits = vec![[0.0; 2]; total];
        let mut anchor_offsets = vec![[0.0; 4]; total];
        let mut cls_caches = Vec::with_capacity(3);
        let mut loc_caches = Vec::with_capacity(3);
        let mut offset = 0;
        for (level, variants) in self.config.anchors.variants_per_level().into_iter().enumerate() {
            let map = &extras[level].1;
            let cells = map.h * map.w;
            let (cls, cc) = self.cls_heads[level].forward(map);
            let (loc, lc) = self.loc_heads[level].forward(map);
            for cell in 0..cells {
                for v in 0..variants {
                    let a = offset + cell * variants + v;
                    for k in 0..2 {
                        anchor_class_logits[a][k] = cls.data[(v * 2 + k) * cells + cell];
                    }
                    for m in 0..4 {
                        anchor_offsets[a][m] = loc.data[(v * 4 + m) * cells + cell];
                    }
                }
            }
            offset += cells * variants;
            cls_caches.push(cc);
            loc_caches.push(lc);
        }

        let embedding = self.embedding_from(&extras[3].1, &backbone.last().expect("stages").1);
        let logits = self.classifier.forward(&embedding);
        Ok((
            ModelOutput {
                anchor_class_logits,
                anchor_offsets,
                image_logits: [logits[0], logits[1]],
                embedding,
            },
            ForwardCache {
                backbone,
                extras,
                cls_heads: cls_caches,
                loc_heads: loc_caches,
            },
        ))
    }

    fn embedding_from(&self, top: &Tensor, backbone_map: &Tensor) -> Vec<f64> {
        let mut e = top.data.clone();
        let hw = (backbone_map.h * backbone_map.w) as f64;
        e.extend((0..backbone_map.c).map(|c| backbone_map.plane(c).iter().sum::<f64>() / hw));
        e
    }

    /// Accumulates parameter gradients for one image.
    pub fn backward(&mut self, out: &ModelOutput, cache: &ForwardCache, grads: &OutputGrads) {
        let d_embed = self.classifier.backward(&out.embedding, &grads.image_logits);
        let e = self.config.extra_channels;
        let backbone_map = &cache.backbone.last().expect("stages").1;

        // Gradient at each extra-layer output, filled from the top down.
        let mut d_extra: Vec<Tensor> = cache.extras.iter().map(|(_, t)| Tensor::zeros(t.c, t.h, t.w)).collect();
        d_extra[3].data.copy_from_slice(&d_embed[..e]);

        if let (Some(dc), Some(dl)) = (&grads.anchor_class, &grads.anchor_offsets) {
            let mut offset = 0;
            for (level, variants) in self.config.anchors.variants_per_level().into_iter().enumerate() {
                let map = &cache.extras[level].1;
                let cells = map.h * map.w;
                let mut d_cls = Tensor::zeros(variants * 2, map.h, map.w);
                let mut d_loc = Tensor::zeros(variants * 4, map.h, map.w);
                for cell in 0..cells {
                    for v in 0..variants {
                        let a = offset + cell * variants + v;
                        for k in 0..2 {
                            d_cls.data[(v * 2 + k) * cells + cell] = dc[a][k];
                        }
                        for m in 0..4 {
                            d_loc.data[(v * 4 + m) * cells + cell] = dl[a][m];
                        }
                    }
                }
                offset += cells * variants;
                let a = self.cls_heads[level]
                    .backward(&d_cls, &cache.cls_heads[level], true)
                    .expect("input grad");
                let b = self.loc_heads[level]
                    .backward(&d_loc, &cache.loc_heads[level], true)
                    .expect("input grad");
                for ((d, x), y) in d_extra[level].data.iter_mut().zip(&a.data).zip(&b.data) {
                    *d += x + y;
                }
            }
        }

        let mut d_below = Tensor::zeros(backbone_map.c, backbone_map.h, backbone_map.w);
        for level in (0..4).rev() {
            let mut d = std::mem::replace(&mut d_extra[level], Tensor::zeros(0, 0, 0));
            Activation::Relu.backward(&cache.extras[level].1.data, &mut d.data);
            let dx = self.extras[level]
                .backward(&d, &cache.extras[level].0, true)
                .expect("input grad");
            if level > 0 {
                for (a, b) in d_extra[level - 1].data.iter_mut().zip(&dx.data) {
                    *a += b;
                }
            } else {
                d_below = dx;
            }
        }

        // Global average pooling branch.
        let hw = (backbone_map.h * backbone_map.w) as f64;
        for c in 0..backbone_map.c {
            let g = d_embed[e + c] / hw;
            for v in &mut d_below.data[c * backbone_map.h * backbone_map.w..(c + 1) * backbone_map.h * backbone_map.w] {
                *v += g;
            }
        }

        let act = self.config.activation;
        for stage in (0..self.backbone.len()).rev() {
            act.backward(&cache.backbone[stage].1.data, &mut d_below.data);
            let need = stage > 0;
            match self.backbone[stage].backward(&d_below, &cache.backbone[stage].0, need) {
                Some(dx) => d_below = dx,
                None => break,
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for l in self.layers_mut() {
            l.zero_grad();
        }
        self.classifier.zero_grad();
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.backbone
            .iter_mut()
            .chain(self.extras.iter_mut())
            .chain(self.cls_heads.iter_mut())
            .chain(self.loc_heads.iter_mut())
    }

    /// Parameters in checkpoint order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter_mut().enumerate() {
            push_conv(&mut out, format!("backbone.{i}"), l);
        }
        for (i, l) in self.extras.iter_mut().enumerate() {
            push_conv(&mut out, format!("extra.{i}"), l);
        }
        for (i, l) in self.cls_heads.iter_mut().enumerate() {
            push_conv(&mut out, format!("head.cls.{i}"), l);
        }
        for (i, l) in self.loc_heads.iter_mut().enumerate() {
            push_conv(&mut out, format!("head.loc.{i}"), l);
        }
        let shape = vec![self.classifier.out_f, self.classifier.in_f];
        let Linear {
            weight,
            bias,
            grad_weight,
            grad_bias,
            out_f,
            ..
        } = &mut self.classifier;
        out.push(ParamMut {
            name: "classifier.weight".into(),
            shape,
            value: weight,
            grad: grad_weight,
        });
        out.push(ParamMut {
            name: "classifier.bias".into(),
            shape: vec![*out_f],
            value: bias,
            grad: grad_bias,
        });
        out
    }

    /// `(name, shape, values)` for every parameter tensor, checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut copy = self.clone();
        copy.params_mut()
            .into_iter()
            .map(|p| (p.name, p.shape, p.value.clone()))
            .collect()
    }

    /// The single highest-scoring artifact box after NMS, clipped to the
    /// unit square, or `None` when its fake score is below `threshold`.
    pub fn top_artifact(&self, out: &ModelOutput, threshold: f64) -> Result<Option<(Corners, f64)>> {
        let boxes: Vec<Corners> = self
            .anchors
            .anchors
            .iter()
            .zip(&out.anchor_offsets)
            .map(|(a, o)| decode_offsets(&a.center, o).map(|v| v.clamp(0.0, 1.0)))
            .collect();
        let scores: Vec<f64> = out.anchor_class_logits.iter().map(|l| softmax2(l)[1]).collect();
        Ok(top_detection(&boxes, &scores, NMS_IOU, threshold)?.map(|i| (boxes[i], scores[i])))
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }
}

fn push_conv<'a>(out: &mut Vec<ParamMut<'a>>, prefix: String, l: &'a mut Conv2d) {
    let shape = vec![l.out_c, l.in_c, l.k, l.k];
    let bias_shape = vec![l.out_c];
    let use_bias = l.use_bias;
    let Conv2d {
        weight,
        bias,
        grad_weight,
        grad_bias,
        ..
    } = l;
    out.push(ParamMut {
        name: format!("{prefix}.weight"),
        shape,
        value: weight,
        grad: grad_weight,
    });
    if use_bias {
        out.push(ParamMut {
            name: format!("{prefix}.bias"),
            shape: bias_shape,
            value: bias,
            grad: grad_bias,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng as _;

    fn random_input(rng: &mut Rng) -> Tensor {
        Tensor {
            c: 3,
            h: 112,
            w: 112,
            data: (0..3 * 112 * 112).map(|_| rng.random_range(-2.0..2.0)).collect(),
        }
    }

    #[test]
    fn zero_weights_zero_backbone() {
        let m = Model::zeros(NetworkConfig::default()).unwrap();
        let y = m.backbone_forward(&random_input(&mut stream(1, &[]))).unwrap();
        assert_eq!((y.c, y.h, y.w), (128, 7, 7));
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shapes_and_counts() {
        let m = Model::new(NetworkConfig::default(), &mut stream(2, &[])).unwrap();
        let (out, cache) = m.forward(&random_input(&mut stream(3, &[]))).unwrap();
        assert_eq!(out.anchor_class_logits.len(), m.anchor_count());
        assert_eq!(out.anchor_offsets.len(), m.anchor_count());
        assert_eq!(out.embedding.len(), 64 + 128);
        let p = cache.pyramid();
        assert_eq!((p.backbone_map.c, p.backbone_map.h), (128, 7));
        let sizes: Vec<(usize, usize)> = p.extra_maps.iter().map(|t| (t.h, t.c)).collect();
        assert_eq!(sizes, vec![(7, 64), (5, 64), (3, 64), (1, 64)]);
    }

    #[test]
    fn rejects_wrong_input_size() {
        let m = Model::zeros(NetworkConfig::default()).unwrap();
        assert!(m.forward_image(&Image::constant(64, 64, 0.5)).is_err());
        let bad = NetworkConfig {
            input_size: 100,
            ..NetworkConfig::default()
        };
        assert!(Model::zeros(bad).is_err());
    }

    #[test]
    fn linearized_backbone_is_homogeneous() {
        let cfg = NetworkConfig {
            activation: Activation::Identity,
            backbone_bias: false,
            ..NetworkConfig::default()
        };
        let m = Model::new(cfg, &mut stream(4, &[])).unwrap();
        let x = random_input(&mut stream(5, &[]));
        let mut x2 = x.clone();
        x2.data.iter_mut().for_each(|v| *v *= 2.0);
        let y = m.backbone_forward(&x).unwrap();
        let y2 = m.backbone_forward(&x2).unwrap();
        for (a, b) in y.data.iter().zip(&y2.data) {
            assert!((2.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn zero_heads_give_uniform_anchor_confidence() {
        let mut m = Model::new(NetworkConfig::default(), &mut stream(6, &[])).unwrap();
        for p in m.params_mut() {
            if Model::is_head_param(&p.name) {
                p.value.fill(0.0);
            }
        }
        let (out, _) = m.forward(&random_input(&mut stream(7, &[]))).unwrap();
        for l in &out.anchor_class_logits {
            assert_eq!(*l, [0.0, 0.0]);
            assert_eq!(crate::losses::softmax2(l), [0.5, 0.5]);
        }
    }

    #[test]
    fn deterministic_and_batch_equivariant() {
        let m = Model::new(NetworkConfig::default(), &mut stream(8, &[])).unwrap();
        let xs: Vec<Tensor> = (0..3).map(|i| random_input(&mut stream(9, &[i]))).collect();
        let a: Vec<ModelOutput> = xs.iter().map(|x| m.forward(x).unwrap().0).collect();
        let b: Vec<ModelOutput> = xs.iter().rev().map(|x| m.forward(x).unwrap().0).collect();
        for (i, out) in a.iter().enumerate() {
            assert_eq!(*out, b[2 - i]);
        }
    }

    #[test]
    fn activations_finite_after_init() {
        for trial in 0..20 {
            let m = Model::new(NetworkConfig::default(), &mut stream(10, &[trial])).unwrap();
            let (out, cache) = m.forward(&random_input(&mut stream(11, &[trial]))).unwrap();
            assert!(out.image_logits.iter().all(|v| v.is_finite()));
            assert!(out.anchor_class_logits.iter().flatten().all(|v| v.is_finite()));
            let p = cache.pyramid();
            assert!(p.backbone_map.is_finite() && p.extra_maps.iter().all(Tensor::is_finite));
        }
    }

    #[test]
    fn param_names_unique() {
        let m = Model::zeros(NetworkConfig::default()).unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|p| p.0).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names.first().unwrap(), "backbone.0.weight");
        assert_eq!(names.last().unwrap(), "classifier.bias");
    }
}
