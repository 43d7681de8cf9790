//! Full-image inference: outer sliding windows of the context extent, HRDA
//! fusion inside each, overlap averaging, final upsample and argmax.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crop::{extract_context, CropBox, CropConfig};
use crate::error::{Error, Result};
use crate::model::NetworkParams;
use crate::ops::{self, Factor};
use crate::pseudo::{self, argmax_channels, plan_windows, plan_windows_disjoint, WindowPlan};
use crate::tensor::Tensor;

/// Which resolutions a model was trained with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Context and detail crops with scale-attention fusion.
    #[default]
    Hrda,
    /// Low-resolution context crops only.
    ContextOnly,
    /// Full-resolution detail crops only.
    DetailOnly,
}

/// How context and detail predictions are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Sigmoid output of the attention head.
    #[default]
    Learned,
    /// Constant 0.5 wherever a detail prediction exists.
    Average,
    /// Constant 1 wherever a detail prediction exists.
    None,
}

/// Window stride policy for both the inner and the outer sliding window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideMode {
    /// Stride of half the window size.
    #[default]
    Overlapping,
    /// Stride equal to the window size.
    NonOverlapping,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub crop: CropConfig,
    pub arch: Architecture,
    pub attention: AttentionMode,
    pub mode: SlideMode,
}

/// Work done by one [`infer_image`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostEstimate {
    pub outer_windows: usize,
    /// Inner windows summed over all outer windows.
    pub inner_windows: usize,
    /// Distinct inner windows; shared ones are evaluated once.
    pub unique_inner_windows: usize,
    /// Pixels pushed through the encoder.
    pub forward_pixels: usize,
}

pub struct InferenceOutput {
    pub height: usize,
    pub width: usize,
    /// Class per pixel, row-major.
    pub classes: Vec<u8>,
    /// Full-resolution probabilities `[1,C,H,W]`.
    pub probs: Tensor,
    /// Full-resolution effective attention (HRDA only).
    pub attention: Option<Vec<f64>>,
    pub cost: CostEstimate,
}

impl InferenceOutput {
    /// Difference between the two largest class probabilities per pixel.
    pub fn margin(&self) -> Vec<f64> {
        let (_, c, h, w) = self.probs.dims4("margin").expect("NCHW");
        let d = self.probs.data();
        (0..h * w)
            .map(|p| {
                let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for ch in 0..c {
                    let v = d[ch * h * w + p];
                    if v > a {
                        b = a;
                        a = v;
                    } else if v > b {
                        b = v;
                    }
                }
                if c == 1 {
                    a
                } else {
                    a - b
                }
            })
            .collect()
    }
}

fn plan(mode: SlideMode, rh: usize, rw: usize, wh: usize, ww: usize) -> Result<WindowPlan> {
    match mode {
        SlideMode::Overlapping => plan_windows(rh, rw, wh, ww),
        SlideMode::NonOverlapping => plan_windows_disjoint(rh, rw, wh, ww),
    }
}

struct Plans {
    outer: Option<WindowPlan>,
    inner: Option<WindowPlan>,
    unique: Vec<(usize, usize)>,
}

fn make_plans(cfg: &InferenceConfig, h: usize, w: usize) -> Result<Plans> {
    let c = &cfg.crop;
    c.validate()?;
    let (chr, cwr) = c.context_hr();
    if !h.is_multiple_of(c.stride) || !w.is_multiple_of(c.stride) {
        return Err(Error::invalid(
            "infer_image",
            format!("image {h}x{w} not divisible by output stride {}", c.stride),
        ));
    }
    match cfg.arch {
        Architecture::DetailOnly => {
            let inner = plan(cfg.mode, h, w, c.detail_h, c.detail_w).map_err(|_| {
                Error::invalid(
                    "infer_image",
                    format!("image {h}x{w} smaller than detail window"),
                )
            })?;
            let unique = inner.windows.iter().map(|b| (b.top, b.left)).collect();
            Ok(Plans {
                outer: None,
                inner: Some(inner),
                unique,
            })
        }
        arch => {
            if h < chr || w < cwr {
                return Err(Error::invalid(
                    "infer_image",
                    format!("image {h}x{w} smaller than outer window {chr}x{cwr}"),
                ));
            }
            let outer = plan(cfg.mode, h, w, chr, cwr)?;
            if arch == Architecture::ContextOnly {
                return Ok(Plans {
                    outer: Some(outer),
                    inner: None,
                    unique: Vec::new(),
                });
            }
            let inner = plan(cfg.mode, chr, cwr, c.detail_h, c.detail_w)?;
            let mut set = BTreeMap::new();
            for o in &outer.windows {
                for i in &inner.windows {
                    set.insert((o.top + i.top, o.left + i.left), ());
                }
            }
            Ok(Plans {
                outer: Some(outer),
                inner: Some(inner),
                unique: set.into_keys().collect(),
            })
        }
    }
}

/// Window and pixel counts of [`infer_image`] for an `h x w` image.
pub fn estimate_cost(cfg: &InferenceConfig, h: usize, w: usize) -> Result<CostEstimate> {
    let p = make_plans(cfg, h, w)?;
    let c = &cfg.crop;
    let outer = p.outer.as_ref().map_or(0, WindowPlan::len);
    let inner_per = p.inner.as_ref().map_or(0, WindowPlan::len);
    let inner = if p.outer.is_some() {
        outer * inner_per
    } else {
        inner_per
    };
    Ok(CostEstimate {
        outer_windows: outer,
        inner_windows: inner,
        unique_inner_windows: p.unique.len(),
        forward_pixels: outer * c.context_h * c.context_w
            + p.unique.len() * c.detail_h * c.detail_w,
    })
}

/// Accumulates prediction pieces on a grid and averages overlaps.
struct Canvas {
    c: usize,
    h: usize,
    w: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Canvas {
    fn new(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            sum: vec![0.0; c * h * w],
            count: vec![0; h * w],
        }
    }

    /// Adds item `item` of `piece` at grid offset `(top, left)`.
    fn add(&mut self, piece: &Tensor, item: usize, top: usize, left: usize) {
        let (_, c, ph, pw) = piece.dims4("canvas").expect("NCHW");
        debug_assert_eq!(c, self.c);
        let src = &piece.data()[item * c * ph * pw..][..c * ph * pw];
        for ch in 0..c {
            for y in 0..ph {
                let d = &mut self.sum[(ch * self.h + top + y) * self.w + left..][..pw];
                for (a, b) in d.iter_mut().zip(&src[(ch * ph + y) * pw..][..pw]) {
                    *a += b;
                }
            }
        }
        for y in 0..ph {
            for v in &mut self.count[(top + y) * self.w + left..][..pw] {
                *v += 1;
            }
        }
    }

    fn finish(self) -> Result<Tensor> {
        let plane = self.h * self.w;
        if self.count.contains(&0) {
            return Err(Error::invalid(
                "infer_image",
                "window plan left pixels uncovered",
            ));
        }
        let data = self
            .sum
            .iter()
            .enumerate()
            .map(|(i, v)| v / f64::from(self.count[i % plane]))
            .collect();
        Tensor::new(vec![1, self.c, self.h, self.w], data)
    }
}

const CHUNK: usize = 32;

/// Runs `f` over `inputs` in batches, returning per-input results.
fn batched<T>(inputs: &[Tensor], mut f: impl FnMut(&Tensor) -> Result<T>) -> Result<Vec<T>> {
    inputs
        .chunks(CHUNK)
        .map(|ch| f(&Tensor::concat_batch(&ch.iter().collect::<Vec<_>>())?))
        .collect()
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.ndim() {
        3 => x
            .clone()
            .reshape(&[1, x.shape()[0], x.shape()[1], x.shape()[2]]),
        4 if x.shape()[0] == 1 => Ok(x.clone()),
        _ => Err(Error::shape(
            "infer_image",
            "input",
            "[3,H,W] or [1,3,H,W]",
            format!("{:?}", x.shape()),
        )),
    }
}

/// Segments one image `[3,H,W]` (or `[1,3,H,W]`).
pub fn infer_image(
    params: &NetworkParams,
    x: &Tensor,
    cfg: &InferenceConfig,
) -> Result<InferenceOutput> {
    let x = as_batch(x)?;
    let (_, _, h, w) = x.dims4("infer_image")?;
    let c = &cfg.crop;
    if params.output_stride() != c.stride {
        return Err(Error::invalid(
            "infer_image",
            format!(
                "network stride {} differs from configured {}",
                params.output_stride(),
                c.stride
            ),
        ));
    }
    let plans = make_plans(cfg, h, w)?;
    let o = c.stride;
    let ncls = params.num_classes();
    let mut cost = CostEstimate {
        unique_inner_windows: plans.unique.len(),
        ..Default::default()
    };

    // detail predictions, one per distinct window position
    let det_inputs = plans
        .unique
        .iter()
        .map(|&(t, l)| ops::crop(&x, t, l, c.detail_h, c.detail_w))
        .collect::<Result<Vec<_>>>()?;
    cost.forward_pixels += det_inputs.len() * c.detail_h * c.detail_w;
    let det_batches = batched(&det_inputs, |b| {
        ops::softmax_channels(&params.forward_seg(b)?)
    })?;
    let det_probs: BTreeMap<(usize, usize), (usize, usize)> = plans
        .unique
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, (i / CHUNK, i % CHUNK)))
        .collect();

    let mut global = Canvas::new(ncls, h / o, w / o);
    let mut att_canvas = None;

    match (&plans.outer, cfg.arch) {
        (None, _) => {
            let inner = plans.inner.as_ref().unwrap();
            cost.inner_windows = inner.len();
            for b in &inner.windows {
                let (bi, ii) = det_probs[&(b.top, b.left)];
                global.add(&det_batches[bi], ii, b.top / o, b.left / o);
            }
        }
        (Some(outer), arch) => {
            cost.outer_windows = outer.len();
            let ctx_inputs = outer
                .windows
                .iter()
                .map(|b| extract_context(&x, b, c))
                .collect::<Result<Vec<_>>>()?;
            cost.forward_pixels += ctx_inputs.len() * c.context_h * c.context_w;
            let ctx_out = batched(&ctx_inputs, |b| {
                let f = params.features(b)?;
                let probs = params.seg_probs_from(&f)?;
                let att = if arch == Architecture::Hrda {
                    Some(params.attention_from(&f)?)
                } else {
                    None
                };
                Ok((probs, att))
            })?;
            let (chr, cwr) = c.context_hr();
            if arch == Architecture::Hrda {
                att_canvas = Some(Canvas::new(1, h / o, w / o));
            }
            for (wi, ob) in outer.windows.iter().enumerate() {
                let (probs, att) = &ctx_out[wi / CHUNK];
                let lr = probs.batch_slice(wi % CHUNK, 1)?;
                let up_lr = ops::resize_bilinear(&lr, Factor::up(c.scale))?;
                let Some(att) = att else {
                    global.add(&up_lr, 0, ob.top / o, ob.left / o);
                    continue;
                };
                let inner = plans.inner.as_ref().unwrap();
                cost.inner_windows += inner.len();
                let mut local = Canvas::new(ncls, chr / o, cwr / o);
                for ib in &inner.windows {
                    let (bi, ii) = det_probs[&(ob.top + ib.top, ob.left + ib.left)];
                    local.add(&det_batches[bi], ii, ib.top / o, ib.left / o);
                }
                let hr = local.finish()?;
                let a = match cfg.attention {
                    AttentionMode::Learned => att.batch_slice(wi % CHUNK, 1)?,
                    AttentionMode::Average => {
                        Tensor::full(&[1, 1, c.context_h / o, c.context_w / o], 0.5)
                    }
                    AttentionMode::None => Tensor::ones(&[1, 1, c.context_h / o, c.context_w / o]),
                };
                let frame = CropBox::new(0, 0, chr, cwr);
                let fused = pseudo::fuse_full(
                    &crate::fusion::Prediction::probabilities(lr, frame),
                    &crate::fusion::Prediction::probabilities(hr, frame),
                    &a,
                    c.scale,
                )?;
                global.add(&fused.scores, 0, ob.top / o, ob.left / o);
                let eff = effective_attention(
                    &ops::resize_bilinear(&a, Factor::up(c.scale))?,
                    &fused.scores,
                )?;
                att_canvas
                    .as_mut()
                    .unwrap()
                    .add(&eff, 0, ob.top / o, ob.left / o);
            }
        }
    }

    let grid = global.finish()?;
    let probs = ops::resize_bilinear(&grid, Factor::up(o))?;
    let classes = argmax_channels(&probs);
    let attention = match att_canvas {
        Some(cv) => Some(ops::resize_bilinear(&cv.finish()?, Factor::up(o))?.into_data()),
        None => None,
    };
    Ok(InferenceOutput {
        height: h,
        width: w,
        classes,
        probs,
        attention,
        cost,
    })
}

/// Single-channel attention; per-class attention is weighted by the fused
/// class probabilities.
pub fn effective_attention(att: &Tensor, probs: &Tensor) -> Result<Tensor> {
    let (n, a, h, w) = att.dims4("effective_attention")?;
    if a == 1 {
        return Ok(att.clone());
    }
    let weighted = ops::mul_channels(att, probs)?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    for b in 0..n {
        for ch in 0..a {
            for p in 0..plane {
                out.data_mut()[b * plane + p] += weighted.data()[(b * a + ch) * plane + p];
            }
        }
    }
    Ok(out)
}
