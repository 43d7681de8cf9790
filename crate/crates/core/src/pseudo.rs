//! Teacher pseudo-labels: sliding-window HR prediction over the context
//! region, full-attention fusion, argmax and confidence weighting.

use serde::{Deserialize, Serialize};

use crate::crop::CropBox;
use crate::error::{Error, Result};
use crate::fusion::{self, Prediction};
use crate::model::NetworkParams;
use crate::ops;
use crate::tensor::Tensor;

/// Default confidence threshold for pseudo-label weighting.
pub const DEFAULT_TAU: f64 = 0.968;

/// Tolerance on per-pixel channel sums for probability inputs.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// One-hot labels `[N,C,H,W]` with weights `[N,H,W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub labels: Tensor,
    pub weights: Tensor,
}

impl PseudoLabel {
    pub fn new(labels: Tensor, weights: Tensor) -> Result<Self> {
        let (n, _, h, w) = labels.dims4("PseudoLabel")?;
        if weights.shape() != [n, h, w] {
            return Err(Error::shape(
                "PseudoLabel",
                "weights",
                format!("{:?}", [n, h, w]),
                format!("{:?}", weights.shape()),
            ));
        }
        fusion::check_one_hot(&labels)?;
        if weights.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("PseudoLabel", "weights must lie in [0, 1]"));
        }
        Ok(Self { labels, weights })
    }

    /// Per-item spatial crop of both labels and weights.
    pub fn crop_each(&self, offsets: &[(usize, usize)], h: usize, w: usize) -> Result<Self> {
        let (n, _, ih, iw) = self.labels.dims4("PseudoLabel::crop")?;
        let labels = ops::crop_each(&self.labels, offsets, h, w)?;
        let weights = ops::crop_each(
            &self.weights.clone().reshape(&[n, 1, ih, iw])?,
            offsets,
            h,
            w,
        )?
        .reshape(&[n, h, w])?;
        Ok(Self { labels, weights })
    }

    /// Class index per pixel, `[N,H,W]`.
    pub fn class_map(&self) -> Vec<u8> {
        one_hot_to_classes(&self.labels)
    }
}

pub(crate) fn one_hot_to_classes(t: &Tensor) -> Vec<u8> {
    argmax_channels(t)
}

/// First-maximum argmax over the channel axis, `[N,H,W]` flattened.
pub fn argmax_channels(t: &Tensor) -> Vec<u8> {
    let [n, c, h, w] = t.shape()[..] else {
        panic!("argmax_channels expects NCHW");
    };
    let plane = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut bv = d[b * c * plane + p];
            for ch in 1..c {
                let v = d[(b * c + ch) * plane + p];
                if v > bv {
                    bv = v;
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Windows tiling a region, in region-relative coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub region_h: usize,
    pub region_w: usize,
    pub windows: Vec<CropBox>,
}

fn starts(region: usize, win: usize, stride: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&v| v + win <= region)
        .collect();
    if *s.last().unwrap() + win < region {
        s.push(region - win);
    }
    s
}

/// Half-window stride with a final flush window.
pub fn plan_windows(
    region_h: usize,
    region_w: usize,
    win_h: usize,
    win_w: usize,
) -> Result<WindowPlan> {
    plan_windows_strided(
        region_h,
        region_w,
        win_h,
        win_w,
        (win_h / 2).max(1),
        (win_w / 2).max(1),
    )
}

/// Stride equal to the window size, with a final flush window.
pub fn plan_windows_disjoint(
    region_h: usize,
    region_w: usize,
    win_h: usize,
    win_w: usize,
) -> Result<WindowPlan> {
    plan_windows_strided(region_h, region_w, win_h, win_w, win_h, win_w)
}

pub fn plan_windows_strided(
    region_h: usize,
    region_w: usize,
    win_h: usize,
    win_w: usize,
    stride_h: usize,
    stride_w: usize,
) -> Result<WindowPlan> {
    if win_h == 0 || win_w == 0 || stride_h == 0 || stride_w == 0 {
        return Err(Error::invalid(
            "plan_windows",
            "window and stride must be positive",
        ));
    }
    if win_h > region_h || win_w > region_w {
        return Err(Error::invalid(
            "plan_windows",
            format!("window {win_h}x{win_w} larger than region {region_h}x{region_w}"),
        ));
    }
    let rows = starts(region_h, win_h, stride_h);
    let cols = starts(region_w, win_w, stride_w);
    let windows = rows
        .iter()
        .flat_map(|&t| cols.iter().map(move |&l| CropBox::new(t, l, win_h, win_w)))
        .collect();
    Ok(WindowPlan {
        region_h,
        region_w,
        windows,
    })
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Number of windows covering each region pixel, row-major.
    pub fn overlap_counts(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.region_h * self.region_w];
        for b in &self.windows {
            for y in b.top..b.bottom {
                for x in b.left..b.right {
                    c[y * self.region_w + x] += 1;
                }
            }
        }
        c
    }

    fn check_stride(&self, o: usize) -> Result<()> {
        let ok = self.region_h.is_multiple_of(o)
            && self.region_w.is_multiple_of(o)
            && self.windows.iter().all(|b| {
                [b.top, b.left, b.height(), b.width()]
                    .iter()
                    .all(|v| v % o == 0)
            });
        if !ok {
            return Err(Error::invalid(
                "sliding_prediction",
                format!("window plan not aligned to output stride {o}"),
            ));
        }
        Ok(())
    }
}

/// Windows evaluated per call of the predictor.
const WINDOW_CHUNK: usize = 32;

/// Sliding-window prediction with an arbitrary window predictor that maps
/// `[M,3,h,w]` inputs to `[M,C,h/o,w/o]` probabilities. Overlaps are
/// averaged.
pub fn sliding_prediction_with(
    predict: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    plan: &WindowPlan,
    o: usize,
) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4("sliding_prediction")?;
    if (h, w) != (plan.region_h, plan.region_w) {
        return Err(Error::shape(
            "sliding_prediction",
            "region",
            format!("{}x{}", plan.region_h, plan.region_w),
            format!("{h}x{w}"),
        ));
    }
    plan.check_stride(o)?;
    let (gh, gw) = (h / o, w / o);
    let mut acc: Option<Tensor> = None;
    let mut counts = vec![0u32; gh * gw];
    for b in &plan.windows {
        for y in b.top / o..b.bottom / o {
            for xx in b.left / o..b.right / o {
                counts[y * gw + xx] += 1;
            }
        }
    }

    // items ordered window-major within each chunk
    for chunk in plan.windows.chunks(WINDOW_CHUNK) {
        let (wh, ww) = (chunk[0].height(), chunk[0].width());
        let crops = chunk
            .iter()
            .map(|b| ops::crop(x, b.top, b.left, wh, ww))
            .collect::<Result<Vec<_>>>()?;
        let batch = Tensor::concat_batch(&crops.iter().collect::<Vec<_>>())?;
        let probs = predict(&batch)?;
        let (m, c, ph, pw) = probs.dims4("sliding_prediction")?;
        if m != chunk.len() * n || (ph, pw) != (wh / o, ww / o) {
            return Err(Error::shape(
                "sliding_prediction",
                "window prediction",
                format!("{}x{}", wh / o, ww / o),
                format!("{ph}x{pw}"),
            ));
        }
        let acc = acc.get_or_insert_with(|| Tensor::zeros(&[n, c, gh, gw]));
        let (a, p) = (acc.data_mut(), probs.data());
        for (wi, bx) in chunk.iter().enumerate() {
            let (t0, l0) = (bx.top / o, bx.left / o);
            for item in 0..n {
                let src_item = wi * n + item;
                for ch in 0..c {
                    let src = &p[(src_item * c + ch) * ph * pw..][..ph * pw];
                    let dst = &mut a[(item * c + ch) * gh * gw..][..gh * gw];
                    for y in 0..ph {
                        let row = &mut dst[(t0 + y) * gw + l0..][..pw];
                        for (d, s) in row.iter_mut().zip(&src[y * pw..][..pw]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    let mut acc = acc.ok_or_else(|| Error::invalid("sliding_prediction", "empty plan"))?;
    let plane = gh * gw;
    for (i, v) in acc.data_mut().iter_mut().enumerate() {
        *v /= f64::from(counts[i % plane]);
    }
    Ok(acc)
}

/// Teacher sliding-window HR prediction over a context region `x`.
/// No gradient tape is built.
pub fn sliding_hr_prediction(
    params: &NetworkParams,
    x: &Tensor,
    plan: &WindowPlan,
) -> Result<Prediction> {
    let o = params.output_stride();
    let scores = sliding_prediction_with(
        |b| ops::softmax_channels(&params.forward_seg(b)?),
        x,
        plan,
        o,
    )?;
    Ok(Prediction::probabilities(
        scores,
        CropBox::new(0, 0, plan.region_h, plan.region_w),
    ))
}

/// `up((1 - a) * lr, s) + up(a, s) * hr` with unmasked attention.
pub fn fuse_full(
    lr: &Prediction,
    hr: &Prediction,
    att: &Tensor,
    scale: usize,
) -> Result<Prediction> {
    require_probs(lr, "fuse_full")?;
    require_probs(hr, "fuse_full")?;
    let scores = fusion::fuse_probabilities(&lr.scores, &hr.scores, att, scale)?;
    Ok(Prediction::probabilities(
        fusion::renormalize(scores, att, scale)?,
        lr.frame,
    ))
}

fn require_probs(p: &Prediction, op: &'static str) -> Result<()> {
    if p.form != fusion::ScoreForm::Probabilities {
        return Err(Error::invalid(
            op,
            "expected a probability-form prediction, got logits",
        ));
    }
    Ok(())
}

/// How pseudo-label weights are derived from teacher confidence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// One weight per image: the fraction of pixels with max probability above τ.
    #[default]
    PerImage,
    /// Binary per-pixel weight: max probability above τ.
    PerPixel,
}

/// Argmax pseudo-label (lowest index wins ties) with confidence weights.
pub fn make_pseudo_label(probs: &Tensor, tau: f64, mode: ConfidenceMode) -> Result<PseudoLabel> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(
            "make_pseudo_label",
            format!("threshold {tau} not in (0, 1)"),
        ));
    }
    let (n, c, h, w) = probs.dims4("make_pseudo_label")?;
    let err = fusion::max_channel_sum_error(probs)?;
    if err > NORMALIZATION_TOL || probs.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid(
            "make_pseudo_label",
            format!("input not normalized (channel-sum error {err:.3e})"),
        ));
    }
    let plane = h * w;
    let classes = argmax_channels(probs);
    let mut labels = Tensor::zeros(&[n, c, h, w]);
    let mut weights = Tensor::zeros(&[n, h, w]);
    let d = probs.data();
    for b in 0..n {
        let mut confident = 0usize;
        for p in 0..plane {
            let k = classes[b * plane + p] as usize;
            labels.data_mut()[(b * c + k) * plane + p] = 1.0;
            let hit = d[(b * c + k) * plane + p] > tau;
            confident += usize::from(hit);
            if mode == ConfidenceMode::PerPixel {
                weights.data_mut()[b * plane + p] = f64::from(u8::from(hit));
            }
        }
        if mode == ConfidenceMode::PerImage {
            let q = confident as f64 / plane as f64;
            weights.data_mut()[b * plane..(b + 1) * plane].fill(q);
        }
    }
    PseudoLabel::new(labels, weights)
}
