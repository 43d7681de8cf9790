//! Toy fully-convolutional segmentation network with a scale-attention head,
//! and its exponential-moving-average teacher.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output channels of each encoder block.
    pub channels: Vec<usize>,
    /// Stride of each encoder block; their product is the output stride.
    pub strides: Vec<usize>,
    /// Square kernel side of the encoder convolutions.
    pub kernel: usize,
    /// Scale-attention channels: 1 (shared by every class) or `num_classes`.
    pub attention_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 5,
            channels: vec![16, 32, 64],
            strides: vec![2, 2, 1],
            kernel: 3,
            attention_channels: 5,
        }
    }
}

impl ModelConfig {
    pub fn output_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// `(stride, padding)` of every layer: encoder blocks, then both heads.
    pub fn layer_geometry(&self) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|&s| (s, self.kernel / 2))
            .chain([(1, 0), (1, 0)])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::invalid(
                "ModelConfig",
                "channels and strides must be non-empty and of equal length",
            ));
        }
        if self.kernel.is_multiple_of(2) || self.strides.contains(&0) || self.channels.contains(&0)
        {
            return Err(Error::invalid(
                "ModelConfig",
                "odd kernel and positive sizes required",
            ));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::invalid(
                "ModelConfig",
                "need >= 2 classes and >= 1 input channel",
            ));
        }
        if self.attention_channels != 1 && self.attention_channels != self.num_classes {
            return Err(Error::invalid(
                "ModelConfig",
                format!("attention_channels must be 1 or {}", self.num_classes),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn kaiming(rng: &mut impl Rng, co: usize, ci: usize, k: usize, stride: usize) -> Self {
        let fan_in = (ci * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Tensor::from_fn(&[co, ci, k, k], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[co]),
            stride,
            padding: k / 2,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::conv2d(x, &self.weight, &self.bias, self.stride, self.padding)?.0)
    }
}

/// Shared encoder, segmentation head and scale-attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub encoder: Vec<ConvLayer>,
    pub seg_head: ConvLayer,
    pub attn_head: ConvLayer,
}

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Head,
}

impl NetworkParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::new();
        let mut ci = cfg.in_channels;
        for (&co, &s) in cfg.channels.iter().zip(&cfg.strides) {
            encoder.push(ConvLayer::kaiming(rng, co, ci, cfg.kernel, s));
            ci = co;
        }
        let seg_head = ConvLayer::kaiming(rng, cfg.num_classes, ci, 1, 1);
        let attn_head = ConvLayer::kaiming(rng, cfg.attention_channels, ci, 1, 1);
        Ok(Self {
            encoder,
            seg_head,
            attn_head,
        })
    }

    pub fn output_stride(&self) -> usize {
        self.encoder.iter().map(|l| l.stride).product()
    }

    pub fn num_classes(&self) -> usize {
        self.seg_head.bias.len()
    }

    fn layers(&self) -> impl Iterator<Item = (String, &ConvLayer, ParamGroup)> {
        self.encoder
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("encoder.{i}"), l, ParamGroup::Encoder))
            .chain([
                ("seg_head".to_string(), &self.seg_head, ParamGroup::Head),
                ("attn_head".to_string(), &self.attn_head, ParamGroup::Head),
            ])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.encoder
            .iter_mut()
            .chain([&mut self.seg_head, &mut self.attn_head])
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor, ParamGroup)> {
        self.layers()
            .flat_map(|(n, l, g)| {
                [
                    (format!("{n}.weight"), &l.weight, g),
                    (format!("{n}.bias"), &l.bias, g),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Strides and paddings of every layer, in [`Self::named_tensors`] order
    /// (one entry per layer).
    pub fn layer_geometry(&self) -> Vec<(usize, usize)> {
        self.layers()
            .map(|(_, l, _)| (l.stride, l.padding))
            .collect()
    }

    /// Rebuilds parameters from tensors in [`Self::named_tensors`] order.
    pub fn from_parts(geometry: &[(usize, usize)], tensors: Vec<Tensor>) -> Result<Self> {
        if geometry.len() < 3 || tensors.len() != 2 * geometry.len() {
            return Err(Error::invalid(
                "NetworkParams",
                "inconsistent parameter list",
            ));
        }
        let mut it = tensors.into_iter();
        let mut layers: Vec<ConvLayer> = geometry
            .iter()
            .map(|&(stride, padding)| ConvLayer {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
                stride,
                padding,
            })
            .collect();
        let attn_head = layers.pop().unwrap();
        let seg_head = layers.pop().unwrap();
        Ok(Self {
            encoder: layers,
            seg_head,
            attn_head,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4("forward")?;
        let o = self.output_stride();
        let ci = self.encoder[0].weight.shape()[1];
        if c != ci {
            return Err(Error::shape("forward", "input channels", ci, c));
        }
        if h % o != 0 || w % o != 0 {
            return Err(Error::invalid(
                "forward",
                format!("input {h}x{w} not divisible by output stride {o}"),
            ));
        }
        Ok(())
    }

    /// Encoder features, without a tape.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.encoder {
            h = ops::relu(&l.forward(&h)?);
        }
        Ok(h)
    }

    pub fn seg_logits_from(&self, feat: &Tensor) -> Result<Tensor> {
        self.seg_head.forward(feat)
    }

    pub fn seg_probs_from(&self, feat: &Tensor) -> Result<Tensor> {
        ops::softmax_channels(&self.seg_logits_from(feat)?)
    }

    pub fn attention_from(&self, feat: &Tensor) -> Result<Tensor> {
        Ok(ops::sigmoid(&self.attn_head.forward(feat)?))
    }

    /// Segmentation logits at output-stride resolution.
    pub fn forward_seg(&self, x: &Tensor) -> Result<Tensor> {
        self.seg_logits_from(&self.features(x)?)
    }

    /// Per-class scale attention in `(0, 1)`, predicted from a context crop.
    pub fn forward_attention(&self, x: &Tensor) -> Result<Tensor> {
        self.attention_from(&self.features(x)?)
    }

    /// Records every parameter as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let bind_layer = |g: &mut Graph, l: &ConvLayer| BoundLayer {
            weight: g.param(l.weight.clone()),
            bias: g.param(l.bias.clone()),
            stride: l.stride,
            padding: l.padding,
        };
        BoundParams {
            encoder: self.encoder.iter().map(|l| bind_layer(g, l)).collect(),
            seg_head: bind_layer(g, &self.seg_head),
            attn_head: bind_layer(g, &self.attn_head),
            output_stride: self.output_stride(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn same_shapes(&self, other: &NetworkParams) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.1.shape() == y.1.shape())
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundLayer {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl BoundLayer {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, self.stride, self.padding)
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    encoder: Vec<BoundLayer>,
    seg_head: BoundLayer,
    attn_head: BoundLayer,
    output_stride: usize,
}

impl BoundParams {
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4("forward")?;
        let o = self.output_stride;
        if h % o != 0 || w % o != 0 {
            return Err(Error::invalid(
                "forward",
                format!("input {h}x{w} not divisible by output stride {o}"),
            ));
        }
        let mut h = x;
        for l in &self.encoder {
            let c = l.forward(g, h)?;
            h = g.relu(c);
        }
        Ok(h)
    }

    pub fn seg_logits(&self, g: &mut Graph, feat: Var) -> Result<Var> {
        self.seg_head.forward(g, feat)
    }

    pub fn seg_probs(&self, g: &mut Graph, feat: Var) -> Result<Var> {
        let l = self.seg_logits(g, feat)?;
        g.softmax(l)
    }

    pub fn attention(&self, g: &mut Graph, feat: Var) -> Result<Var> {
        let l = self.attn_head.forward(g, feat)?;
        Ok(g.sigmoid(l))
    }

    /// Gradients in the layout of `like`; parameters that did not influence
    /// the loss get zeros.
    pub fn gradients(&self, grads: &Gradients, like: &NetworkParams) -> NetworkParams {
        let take = |b: &BoundLayer, l: &ConvLayer| ConvLayer {
            weight: grads.get_or_zeros(b.weight, &l.weight),
            bias: grads.get_or_zeros(b.bias, &l.bias),
            stride: l.stride,
            padding: l.padding,
        };
        NetworkParams {
            encoder: self
                .encoder
                .iter()
                .zip(&like.encoder)
                .map(|(b, l)| take(b, l))
                .collect(),
            seg_head: take(&self.seg_head, &like.seg_head),
            attn_head: take(&self.attn_head, &like.attn_head),
        }
    }
}

/// EMA copy of the student used to produce pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: NetworkParams,
    pub alpha: f64,
}

impl TeacherState {
    pub fn new(params: NetworkParams, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid(
                "TeacherState",
                format!("alpha {alpha} not in [0, 1)"),
            ));
        }
        Ok(Self { params, alpha })
    }

    /// `teacher <- alpha * teacher + (1 - alpha) * student`, element-wise.
    pub fn ema_update(&mut self, student: &NetworkParams) -> Result<()> {
        self.ema_update_with(student, self.alpha)
    }

    /// EMA update with an explicit rate, e.g. a ramped `min(1 - 1/(t+1), alpha)`.
    pub fn ema_update_with(&mut self, student: &NetworkParams, a: f64) -> Result<()> {
        if !self.params.same_shapes(student) {
            return Err(Error::invalid(
                "ema_update",
                "teacher/student shape mismatch",
            ));
        }
        if !(0.0..1.0).contains(&a) {
            return Err(Error::invalid(
                "ema_update",
                format!("rate {a} not in [0, 1)"),
            ));
        }
        let src: Vec<&Tensor> = student
            .named_tensors()
            .into_iter()
            .map(|(_, t, _)| t)
            .collect();
        for (dst, s) in self.params.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.data_mut().iter_mut().zip(s.data()) {
                *d = a * *d + (1.0 - a) * v;
            }
        }
        Ok(())
    }
}
