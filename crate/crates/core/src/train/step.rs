//! One optimization step: crops, teacher pseudo-labels, student losses,
//! AdamW update, EMA update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::TrainConfig;
use crate::autograd::{Graph, Var};
use crate::crop::{sample_context_box, sample_detail_box, CropBox, CropConfig};
use crate::error::{Error, Result};
use crate::fusion::{detail_mask, fused_offsets, tape, Prediction};
use crate::inference::{Architecture, AttentionMode};
use crate::model::{BoundParams, NetworkParams, TeacherState};
use crate::ops::{self, Factor};
use crate::optim::AdamW;
use crate::pseudo::{
    fuse_full, make_pseudo_label, plan_windows, plan_windows_disjoint, sliding_hr_prediction,
    PseudoLabel,
};
use crate::tensor::Tensor;

/// Batched images `[B,3,H,W]`, source one-hot labels `[B,C,H,W]`.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub source_images: Tensor,
    pub source_labels: Tensor,
    pub target_images: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub source: f64,
    pub target: f64,
    /// `source + lambda_t * target`.
    pub total: f64,
    /// Mean pseudo-label weight.
    pub confidence: f64,
}

/// Student, teacher and optimizer state of a run.
pub struct TrainState {
    pub student: NetworkParams,
    pub teacher: TeacherState,
    pub optimizer: AdamW,
    pub step: usize,
}

impl TrainState {
    /// Student initialized from `rng`; the teacher starts as a copy.
    pub fn new(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let student = NetworkParams::init(&cfg.model, rng)?;
        let teacher = TeacherState::new(student.clone(), cfg.alpha)?;
        let optimizer = AdamW::new(cfg.optim.clone(), &student);
        Ok(Self {
            student,
            teacher,
            optimizer,
            step: 0,
        })
    }
}

/// Crop boxes of one domain: context box and detail box per item. For
/// single-resolution variants only the relevant box is meaningful.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainCrops {
    pub pairs: Vec<(CropBox, CropBox)>,
}

fn detail_only_crop(c: &CropConfig) -> CropConfig {
    CropConfig {
        scale: 1,
        context_h: c.detail_h,
        context_w: c.detail_w,
        ..*c
    }
}

/// Draws crop boxes for `n` items of an `h x w` domain.
pub fn sample_crops(
    arch: Architecture,
    crop: &CropConfig,
    n: usize,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> Result<DomainCrops> {
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let p = match arch {
            Architecture::Hrda => {
                let c = sample_context_box(h, w, crop, rng)?;
                (c, sample_detail_box(&c, crop, rng)?)
            }
            Architecture::ContextOnly => {
                let c = sample_context_box(h, w, crop, rng)?;
                (c, c)
            }
            Architecture::DetailOnly => {
                let d = sample_context_box(h, w, &detail_only_crop(crop), rng)?;
                (d, d)
            }
        };
        pairs.push(p);
    }
    Ok(DomainCrops { pairs })
}

impl DomainCrops {
    fn ctx_offsets(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|(c, _)| (c.top, c.left)).collect()
    }

    fn det_offsets(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|(_, d)| (d.top, d.left)).collect()
    }

    /// Detail offsets relative to the context box, in image pixels.
    fn det_in_ctx(&self) -> Vec<(usize, usize)> {
        self.pairs
            .iter()
            .map(|(c, d)| (d.top - c.top, d.left - c.left))
            .collect()
    }
}

/// Student target view: per-item, per-channel gain and offset plus noise,
/// clamped to `[0, 1]`.
pub fn augment(
    x: &Tensor,
    cfg: &super::config::AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("augment")?;
    let mut out = x.clone();
    let plane = h * w;
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("valid std"));
    for b in 0..n {
        for ch in 0..c {
            let gain = 1.0
                + if cfg.gain > 0.0 {
                    rng.random_range(-cfg.gain..cfg.gain)
                } else {
                    0.0
                };
            let off = if cfg.offset > 0.0 {
                rng.random_range(-cfg.offset..cfg.offset)
            } else {
                0.0
            };
            for v in &mut out.data_mut()[(b * c + ch) * plane..][..plane] {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                *v = (*v * gain + off + n).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn context_views(x: &Tensor, crops: &DomainCrops, crop: &CropConfig) -> Result<Tensor> {
    let (ch, cw) = crop.context_hr();
    let region = ops::crop_each(x, &crops.ctx_offsets(), ch, cw)?;
    ops::resize_bilinear(&region, Factor::down(crop.scale))
}

fn detail_views(x: &Tensor, crops: &DomainCrops, crop: &CropConfig) -> Result<Tensor> {
    ops::crop_each(x, &crops.det_offsets(), crop.detail_h, crop.detail_w)
}

/// Teacher pseudo-labels over each item's training crop, at full image
/// resolution. For HRDA the label covers the context box.
pub fn teacher_pseudo_label(
    teacher: &NetworkParams,
    target: &Tensor,
    crops: &DomainCrops,
    cfg: &TrainConfig,
) -> Result<PseudoLabel> {
    let crop = &cfg.crop;
    let o = crop.stride;
    let probs = match cfg.architecture()? {
        Architecture::Hrda => {
            let (ch, cw) = crop.context_hr();
            let region = ops::crop_each(target, &crops.ctx_offsets(), ch, cw)?;
            let lr_in = ops::resize_bilinear(&region, Factor::down(crop.scale))?;
            let feat = teacher.features(&lr_in)?;
            let lr = teacher.seg_probs_from(&feat)?;
            let n = lr.shape()[0];
            let (gh, gw) = (crop.context_h / o, crop.context_w / o);
            let att = match cfg.attention {
                AttentionMode::Learned => teacher.attention_from(&feat)?,
                AttentionMode::Average => Tensor::full(&[n, 1, gh, gw], 0.5),
                AttentionMode::None => Tensor::ones(&[n, 1, gh, gw]),
            };
            let plan = if cfg.overlapping_pseudolabel {
                plan_windows(ch, cw, crop.detail_h, crop.detail_w)?
            } else {
                plan_windows_disjoint(ch, cw, crop.detail_h, crop.detail_w)?
            };
            let hr = sliding_hr_prediction(teacher, &region, &plan)?;
            let frame = hr.frame;
            let fused = fuse_full(&Prediction::probabilities(lr, frame), &hr, &att, crop.scale)?;
            ops::resize_bilinear(&fused.scores, Factor::up(o))?
        }
        Architecture::ContextOnly => {
            let lr =
                ops::softmax_channels(&teacher.forward_seg(&context_views(target, crops, crop)?)?)?;
            ops::resize_bilinear(&lr, Factor::up(crop.scale * o))?
        }
        Architecture::DetailOnly => {
            let hr =
                ops::softmax_channels(&teacher.forward_seg(&detail_views(target, crops, crop)?)?)?;
            ops::resize_bilinear(&hr, Factor::up(o))?
        }
    };
    make_pseudo_label(&probs, cfg.tau, cfg.confidence)
}

/// Encoder features of several inputs; inputs of equal shape share one
/// batched forward pass.
fn batched_features(g: &mut Graph, p: &BoundParams, inputs: &[&Tensor]) -> Result<Vec<Var>> {
    let mut out: Vec<Option<Var>> = vec![None; inputs.len()];
    let mut done = vec![false; inputs.len()];
    for i in 0..inputs.len() {
        if done[i] {
            continue;
        }
        let group: Vec<usize> = (i..inputs.len())
            .filter(|&j| !done[j] && inputs[j].shape()[1..] == inputs[i].shape()[1..])
            .collect();
        let parts: Vec<&Tensor> = group.iter().map(|&j| inputs[j]).collect();
        let x = g.constant(Tensor::concat_batch(&parts)?);
        let f = p.features(g, x)?;
        let mut start = 0;
        for &j in &group {
            let n = inputs[j].shape()[0];
            out[j] = Some(if group.len() == 1 {
                f
            } else {
                g.batch_slice(f, start, n)?
            });
            start += n;
            done[j] = true;
        }
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Labels and weights supervising one domain, at image resolution.
struct Supervision {
    ctx: (Tensor, Tensor),
    det: (Tensor, Tensor),
}

fn source_supervision(
    labels: &Tensor,
    crops: &DomainCrops,
    cfg: &TrainConfig,
) -> Result<Supervision> {
    let crop = &cfg.crop;
    let n = labels.shape()[0];
    let (ch, cw) = match cfg.architecture()? {
        Architecture::DetailOnly => (crop.detail_h, crop.detail_w),
        _ => crop.context_hr(),
    };
    let yc = ops::crop_each(labels, &crops.ctx_offsets(), ch, cw)?;
    let yd = ops::crop_each(labels, &crops.det_offsets(), crop.detail_h, crop.detail_w)?;
    Ok(Supervision {
        ctx: (yc, Tensor::ones(&[n, ch, cw])),
        det: (yd, Tensor::ones(&[n, crop.detail_h, crop.detail_w])),
    })
}

fn target_supervision(
    pl: PseudoLabel,
    crops: &DomainCrops,
    cfg: &TrainConfig,
) -> Result<Supervision> {
    let crop = &cfg.crop;
    let det = if cfg.architecture()? == Architecture::Hrda {
        pl.crop_each(&crops.det_in_ctx(), crop.detail_h, crop.detail_w)?
    } else {
        pl.clone()
    };
    Ok(Supervision {
        ctx: (pl.labels, pl.weights),
        det: (det.labels, det.weights),
    })
}

/// Loss of one domain on the tape. `ctx_feat` / `det_feat` are the
/// features of the context and detail views (only one is used by the
/// single-resolution variants).
fn domain_loss(
    g: &mut Graph,
    p: &BoundParams,
    ctx_feat: Option<Var>,
    det_feat: Option<Var>,
    crops: &DomainCrops,
    sup: &Supervision,
    cfg: &TrainConfig,
) -> Result<Var> {
    let crop = &cfg.crop;
    match cfg.architecture()? {
        Architecture::ContextOnly => {
            let probs = p.seg_probs(g, ctx_feat.unwrap())?;
            tape::weighted_cross_entropy(g, probs, &sup.ctx.0, &sup.ctx.1)
        }
        Architecture::DetailOnly => {
            let probs = p.seg_probs(g, det_feat.unwrap())?;
            tape::weighted_cross_entropy(g, probs, &sup.det.0, &sup.det.1)
        }
        Architecture::Hrda => {
            let (fc, fd) = (ctx_feat.unwrap(), det_feat.unwrap());
            let pc = p.seg_probs(g, fc)?;
            let pd = p.seg_probs(g, fd)?;
            let mask = detail_mask(&crops.pairs, crop)?;
            let att = match cfg.attention {
                AttentionMode::Learned => {
                    let a = p.attention(g, fc)?;
                    let m = g.constant(mask);
                    g.mul_channels(m, a)?
                }
                AttentionMode::Average => g.constant(mask.map(|v| 0.5 * v)),
                AttentionMode::None => g.constant(mask),
            };
            let (ch, cw) = crop.context_hr();
            let o = crop.stride;
            let padded = g.pad_each(pd, ch / o, cw / o, &fused_offsets(&crops.pairs, crop)?)?;
            let fused = tape::fuse(g, pc, padded, att, crop.scale)?;
            tape::hrda_loss(
                g,
                fused,
                pd,
                (&sup.ctx.0, &sup.ctx.1),
                (&sup.det.0, &sup.det.1),
                cfg.effective_lambda_d(),
            )
        }
    }
}

/// Losses and student gradients for one batch. Draws crops, then the
/// target augmentation, from `rng`.
pub fn compute_gradients(
    student: &NetworkParams,
    teacher: &NetworkParams,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(StepLosses, NetworkParams)> {
    let arch = cfg.architecture()?;
    let crop = &cfg.crop;
    let (n, _, h, w) = batch.source_images.dims4("train_step")?;
    if batch.source_labels.shape()[0] != n || batch.source_labels.shape()[2..] != [h, w] {
        return Err(Error::shape(
            "train_step",
            "source labels",
            format!("[{n},C,{h},{w}]"),
            format!("{:?}", batch.source_labels.shape()),
        ));
    }
    let use_target = cfg.lambda_t > 0.0;
    let src = sample_crops(arch, crop, n, h, w, rng)?;
    let tgt = if use_target {
        let (nt, _, ht, wt) = batch.target_images.dims4("train_step")?;
        Some((
            sample_crops(arch, crop, nt, ht, wt, rng)?,
            augment(&batch.target_images, &cfg.augment, rng)?,
        ))
    } else {
        None
    };

    let mut views: Vec<Tensor> = Vec::new();
    let mut slot = |t: Tensor| {
        views.push(t);
        views.len() - 1
    };
    let uses_ctx = arch != Architecture::DetailOnly;
    let uses_det = arch != Architecture::ContextOnly;
    let s_ctx = uses_ctx
        .then(|| context_views(&batch.source_images, &src, crop))
        .transpose()?
        .map(&mut slot);
    let t_ctx = match (&tgt, uses_ctx) {
        (Some((c, x)), true) => Some(slot(context_views(x, c, crop)?)),
        _ => None,
    };
    let s_det = uses_det
        .then(|| detail_views(&batch.source_images, &src, crop))
        .transpose()?
        .map(&mut slot);
    let t_det = match (&tgt, uses_det) {
        (Some((c, x)), true) => Some(slot(detail_views(x, c, crop)?)),
        _ => None,
    };

    let target_sup = match &tgt {
        Some((c, _)) => {
            let pl = teacher_pseudo_label(teacher, &batch.target_images, c, cfg)?;
            Some(target_supervision(pl, c, cfg)?)
        }
        None => None,
    };
    let source_sup = source_supervision(&batch.source_labels, &src, cfg)?;

    let mut g = Graph::new();
    let bound = student.bind(&mut g);
    let feats = batched_features(&mut g, &bound, &views.iter().collect::<Vec<_>>())?;
    let f = |i: Option<usize>| i.map(|i| feats[i]);
    let ls = domain_loss(&mut g, &bound, f(s_ctx), f(s_det), &src, &source_sup, cfg)?;
    let mut losses = StepLosses {
        source: g.value(ls).item(),
        ..Default::default()
    };
    let root = match (&tgt, &target_sup) {
        (Some((c, _)), Some(sup)) => {
            let lt = domain_loss(&mut g, &bound, f(t_ctx), f(t_det), c, sup, cfg)?;
            losses.target = g.value(lt).item();
            losses.confidence = sup.ctx.1.mean();
            let scaled = g.affine(lt, cfg.lambda_t, 0.0);
            g.add(ls, scaled)?
        }
        _ => ls,
    };
    losses.total = g.value(root).item();
    let grads = g.backward(root)?;
    Ok((losses, bound.gradients(&grads, student)))
}

/// Gradient step on the student followed by the teacher EMA update.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepLosses> {
    let (losses, grads) =
        compute_gradients(&state.student, &state.teacher.params, batch, cfg, rng)?;
    if !losses.total.is_finite() {
        return Err(Error::invalid(
            "train_step",
            format!("non-finite loss at step {}", state.step),
        ));
    }
    let lr = cfg.optim.lr_factor(state.step, cfg.steps);
    state.optimizer.step(&mut state.student, &grads, lr)?;
    let alpha = cfg.ema_rate(state.step);
    state.teacher.ema_update_with(&state.student, alpha)?;
    state.step += 1;
    Ok(losses)
}

/// Deterministic per-step random stream.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::data::scene::derive_seed(
        seed,
        &[0x5354_4550, step as u64],
    ))
}
