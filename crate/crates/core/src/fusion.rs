//! Scale-attention fusion of context and detail predictions.
//!
//! Fusion works on probability maps: the context prediction lives on the
//! `h_c/o x w_c/o` grid, the padded detail prediction and the fused result
//! on the `s` times finer `s*h_c/o x s*w_c/o` grid.

use crate::autograd::{Graph, Var};
use crate::crop::{CropBox, CropConfig};
use crate::error::{Error, Result};
use crate::ops::{self, Factor};
use crate::pseudo::PseudoLabel;
use crate::tensor::Tensor;

/// Whether a score map holds raw logits or per-pixel class probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreForm {
    Logits,
    Probabilities,
}

/// Per-pixel class scores at output-stride resolution over `frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Tensor,
    pub form: ScoreForm,
    pub frame: CropBox,
}

impl Prediction {
    pub fn probabilities(scores: Tensor, frame: CropBox) -> Self {
        Self {
            scores,
            form: ScoreForm::Probabilities,
            frame,
        }
    }

    pub fn logits(scores: Tensor, frame: CropBox) -> Self {
        Self {
            scores,
            form: ScoreForm::Logits,
            frame,
        }
    }

    /// Converts logits to probabilities; probabilities pass through.
    pub fn into_probabilities(self) -> Result<Self> {
        match self.form {
            ScoreForm::Probabilities => Ok(self),
            ScoreForm::Logits => Ok(Self::probabilities(
                ops::softmax_channels(&self.scores)?,
                self.frame,
            )),
        }
    }

    fn require_probabilities(&self, op: &'static str) -> Result<()> {
        if self.form != ScoreForm::Probabilities {
            return Err(Error::invalid(
                op,
                "expected a probability-form prediction, got logits",
            ));
        }
        Ok(())
    }

    /// Largest per-pixel deviation of the channel sum from 1.
    pub fn normalization_error(&self) -> Result<f64> {
        max_channel_sum_error(&self.scores)
    }
}

pub(crate) fn max_channel_sum_error(t: &Tensor) -> Result<f64> {
    let (n, c, h, w) = t.dims4("normalization")?;
    let plane = h * w;
    let d = t.data();
    let mut worst: f64 = 0.0;
    for b in 0..n {
        for p in 0..plane {
            let s: f64 = (0..c).map(|ch| d[(b * c + ch) * plane + p]).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Detail box expressed on the context prediction grid:
/// `(top, left, h, w)` in cells of `s * o` full-resolution pixels.
pub fn detail_cells_on_context_grid(
    ctx: &CropBox,
    det: &CropBox,
    cfg: &CropConfig,
) -> Result<(usize, usize, usize, usize)> {
    cells(ctx, det, cfg.align(), "mask_attention")
}

/// Detail box on the fused grid, in cells of `o` full-resolution pixels.
pub fn detail_cells_on_fused_grid(
    ctx: &CropBox,
    det: &CropBox,
    cfg: &CropConfig,
) -> Result<(usize, usize, usize, usize)> {
    cells(ctx, det, cfg.stride, "pad_detail")
}

fn cells(
    ctx: &CropBox,
    det: &CropBox,
    unit: usize,
    op: &'static str,
) -> Result<(usize, usize, usize, usize)> {
    if !ctx.contains(det) {
        return Err(Error::invalid(
            op,
            format!("detail {det:?} not inside context {ctx:?}"),
        ));
    }
    let dy = det.top - ctx.top;
    let dx = det.left - ctx.left;
    if [dy, dx, det.height(), det.width()]
        .iter()
        .any(|v| v % unit != 0)
    {
        return Err(Error::invalid(
            op,
            format!("detail {det:?} not aligned to {unit} within {ctx:?}"),
        ));
    }
    Ok((
        dy / unit,
        dx / unit,
        det.height() / unit,
        det.width() / unit,
    ))
}

/// Single-channel indicator of the detail region on the context grid, one
/// plane per `(ctx, det)` pair.
pub fn detail_mask(pairs: &[(CropBox, CropBox)], cfg: &CropConfig) -> Result<Tensor> {
    let (gh, gw) = (cfg.context_h / cfg.stride, cfg.context_w / cfg.stride);
    let mut mask = Tensor::zeros(&[pairs.len(), 1, gh, gw]);
    for (b, (ctx, det)) in pairs.iter().enumerate() {
        let (t, l, h, w) = detail_cells_on_context_grid(ctx, det, cfg)?;
        if t + h > gh || l + w > gw {
            return Err(Error::invalid("detail_mask", "detail exceeds context grid"));
        }
        let m = mask.data_mut();
        for y in t..t + h {
            for x in l..l + w {
                m[(b * gh + y) * gw + x] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// Zeroes the attention outside the detail region.
pub fn mask_attention(
    att: &Tensor,
    ctx: &CropBox,
    det: &CropBox,
    cfg: &CropConfig,
) -> Result<Tensor> {
    let (n, _, h, w) = att.dims4("mask_attention")?;
    if (h, w) != (cfg.context_h / cfg.stride, cfg.context_w / cfg.stride) {
        return Err(Error::shape(
            "mask_attention",
            "grid",
            format!(
                "{}x{}",
                cfg.context_h / cfg.stride,
                cfg.context_w / cfg.stride
            ),
            format!("{h}x{w}"),
        ));
    }
    let mask = detail_mask(&vec![(*ctx, *det); n], cfg)?;
    ops::mul_channels(&mask, att)
}

/// Places the detail prediction into a zero canvas covering the context
/// region on the fused grid.
pub fn pad_detail(
    det_pred: &Prediction,
    ctx: &CropBox,
    det: &CropBox,
    cfg: &CropConfig,
) -> Result<Tensor> {
    let (t, l, h, w) = detail_cells_on_fused_grid(ctx, det, cfg)?;
    let (_, _, ph, pw) = det_pred.scores.dims4("pad_detail")?;
    if (ph, pw) != (h, w) {
        return Err(Error::shape(
            "pad_detail",
            "detail grid",
            format!("{h}x{w}"),
            format!("{ph}x{pw}"),
        ));
    }
    let (ch, cw) = cfg.context_hr();
    ops::zero_pad(&det_pred.scores, ch / cfg.stride, cw / cfg.stride, t, l)
}

/// `up((1 - a) * ctx, s) + up(a, s) * detail`, with `a` either shared by
/// every class (one channel) or per class.
pub fn fuse_probabilities(
    ctx_probs: &Tensor,
    detail: &Tensor,
    att: &Tensor,
    scale: usize,
) -> Result<Tensor> {
    let one_minus = att.map(|v| 1.0 - v);
    let lr = ops::resize_bilinear(
        &ops::mul_channels(&one_minus, ctx_probs)?,
        Factor::up(scale),
    )?;
    let up_att = ops::resize_bilinear(att, Factor::up(scale))?;
    let hr = ops::mul_channels(&up_att, detail)?;
    lr.zip_map(&hr, "fuse", |a, b| a + b)
}

/// Pixels of the upsampled attention where every class carries the same
/// weight; there the fused scores are already a convex combination.
pub fn shared_weight_pixels(up_att: &Tensor) -> Result<Vec<bool>> {
    let (n, c, h, w) = up_att.dims4("renormalize")?;
    let plane = h * w;
    let d = up_att.data();
    Ok((0..n * plane)
        .map(|i| {
            let (b, p) = (i / plane, i % plane);
            let first = d[b * c * plane + p];
            (1..c).all(|ch| d[(b * c + ch) * plane + p] == first)
        })
        .collect())
}

/// Per-class attention mixes each class with its own weight, so the fused
/// scores no longer sum to one; they are divided by their channel sum
/// wherever the class weights differ. Single-channel attention leaves the
/// scores untouched.
pub fn renormalize(fused: Tensor, att: &Tensor, scale: usize) -> Result<Tensor> {
    if att.dims4("renormalize")?.1 == 1 {
        return Ok(fused);
    }
    let keep = shared_weight_pixels(&ops::resize_bilinear(att, Factor::up(scale))?)?;
    ops::normalize_channels_except(&fused, Some(&keep))
}

/// Attention-weighted fusion of a context prediction with a padded detail
/// prediction.
pub fn fuse(
    ctx_pred: &Prediction,
    detail_padded: &Tensor,
    att_masked: &Tensor,
    cfg: &CropConfig,
) -> Result<Prediction> {
    ctx_pred.require_probabilities("fuse")?;
    let scores = fuse_probabilities(&ctx_pred.scores, detail_padded, att_masked, cfg.scale)?;
    Ok(Prediction::probabilities(
        renormalize(scores, att_masked, cfg.scale)?,
        ctx_pred.frame,
    ))
}

/// Rejects anything that is not an exact one-hot map over the channel axis.
pub fn check_one_hot(y: &Tensor) -> Result<()> {
    let (n, c, h, w) = y.dims4("cross_entropy")?;
    let plane = h * w;
    let d = y.data();
    for b in 0..n {
        for p in 0..plane {
            let mut ones = 0;
            for ch in 0..c {
                let v = d[(b * c + ch) * plane + p];
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::invalid(
                        "cross_entropy",
                        format!("label value {v} is not 0/1"),
                    ));
                }
            }
            if ones != 1 {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("pixel {p} of item {b} has {ones} active classes"),
                ));
            }
        }
    }
    Ok(())
}

fn label_factor(pred: &Tensor, y: &Tensor) -> Result<Factor> {
    let (_, _, ph, pw) = pred.dims4("cross_entropy")?;
    let (_, _, yh, yw) = y.dims4("cross_entropy")?;
    if yh % ph != 0 || yw % pw != 0 || yh / ph != yw / pw {
        return Err(Error::shape(
            "cross_entropy",
            "label/prediction ratio",
            "equal integer factor",
            format!("{yh}/{ph}, {yw}/{pw}"),
        ));
    }
    Ok(Factor::up(yh / ph))
}

/// Weighted cross-entropy of a probability prediction, upsampled to the
/// label size, normalized by the number of label pixels.
pub fn weighted_cross_entropy(pred: &Prediction, y: &Tensor, q: &Tensor) -> Result<f64> {
    pred.require_probabilities("cross_entropy")?;
    check_one_hot(y)?;
    if q.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(
            "cross_entropy",
            "weights must lie in [0, 1]",
        ));
    }
    let up = ops::resize_bilinear(&pred.scores, label_factor(&pred.scores, y)?)?;
    ops::nll_probabilities(&up, y, q)
}

fn check_lambda(lambda_d: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_d) {
        return Err(Error::invalid(
            "hrda_loss",
            format!("detail weight {lambda_d} not in [0, 1]"),
        ));
    }
    Ok(())
}

fn unit_weights(y: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = y.dims4("cross_entropy")?;
    Ok(Tensor::ones(&[n, h, w]))
}

/// `(1 - l) * CE(fused, y_ctx) + l * CE(detail, y_det)` with unit weights.
pub fn hrda_source_loss(
    fused: &Prediction,
    detail: &Prediction,
    y_ctx: &Tensor,
    y_det: &Tensor,
    lambda_d: f64,
) -> Result<f64> {
    check_lambda(lambda_d)?;
    let lc = weighted_cross_entropy(fused, y_ctx, &unit_weights(y_ctx)?)?;
    let ld = weighted_cross_entropy(detail, y_det, &unit_weights(y_det)?)?;
    Ok((1.0 - lambda_d) * lc + lambda_d * ld)
}

/// Target counterpart of [`hrda_source_loss`] with pseudo-labels and their
/// confidence weights.
pub fn hrda_target_loss(
    fused: &Prediction,
    detail: &Prediction,
    p_ctx: &PseudoLabel,
    p_det: &PseudoLabel,
    lambda_d: f64,
) -> Result<f64> {
    check_lambda(lambda_d)?;
    let lc = weighted_cross_entropy(fused, &p_ctx.labels, &p_ctx.weights)?;
    let ld = weighted_cross_entropy(detail, &p_det.labels, &p_det.weights)?;
    Ok((1.0 - lambda_d) * lc + lambda_d * ld)
}

/// Projects a full-resolution box pair list onto fused-grid pad offsets.
pub fn fused_offsets(
    pairs: &[(CropBox, CropBox)],
    cfg: &CropConfig,
) -> Result<Vec<(usize, usize)>> {
    pairs
        .iter()
        .map(|(c, d)| detail_cells_on_fused_grid(c, d, cfg).map(|(t, l, _, _)| (t, l)))
        .collect()
}

/// Tape versions of the fusion operations, used by the training step.
pub mod tape {
    use super::*;

    /// Fusion on the tape; `att` already masked to the detail region.
    pub fn fuse(
        g: &mut Graph,
        ctx_probs: Var,
        detail_padded: Var,
        att: Var,
        scale: usize,
    ) -> Result<Var> {
        let one_minus = g.affine(att, -1.0, 1.0);
        let weighted = g.mul_channels(one_minus, ctx_probs)?;
        let lr = g.resize_bilinear(weighted, Factor::up(scale))?;
        let up_att = g.resize_bilinear(att, Factor::up(scale))?;
        let hr = g.mul_channels(up_att, detail_padded)?;
        let fused = g.add(lr, hr)?;
        if g.value(att).dims4("fuse")?.1 == 1 {
            Ok(fused)
        } else {
            let keep = shared_weight_pixels(g.value(up_att))?;
            g.normalize_channels_except(fused, Some(keep))
        }
    }

    pub fn weighted_cross_entropy(
        g: &mut Graph,
        probs: Var,
        y: &Tensor,
        q: &Tensor,
    ) -> Result<Var> {
        check_one_hot(y)?;
        let f = label_factor(g.value(probs), y)?;
        let up = g.resize_bilinear(probs, f)?;
        g.nll(up, y, q)
    }

    /// Two-term HRDA loss. A term whose weight is exactly zero is skipped.
    pub fn hrda_loss(
        g: &mut Graph,
        fused: Var,
        detail: Var,
        ctx_target: (&Tensor, &Tensor),
        det_target: (&Tensor, &Tensor),
        lambda_d: f64,
    ) -> Result<Var> {
        check_lambda(lambda_d)?;
        let mut terms = Vec::new();
        if lambda_d < 1.0 {
            let l = weighted_cross_entropy(g, fused, ctx_target.0, ctx_target.1)?;
            terms.push(g.affine(l, 1.0 - lambda_d, 0.0));
        }
        if lambda_d > 0.0 {
            let l = weighted_cross_entropy(g, detail, det_target.0, det_target.1)?;
            terms.push(g.affine(l, lambda_d, 0.0));
        }
        match terms[..] {
            [a] => Ok(a),
            [a, b] => g.add(a, b),
            _ => unreachable!(),
        }
    }
}
