//! Nested context/detail crop sampling and extraction.
//!
//! A context crop covers `s*h_c x s*w_c` pixels of the full-resolution
//! image and is downscaled by `s`; a detail crop of `h_d x w_d` pixels is
//! taken at full resolution from inside it. Every box coordinate is a
//! multiple of `k = s * o` so the two prediction grids line up exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Factor};
use crate::tensor::Tensor;

/// Crop geometry. Context sizes are in downscaled pixels, detail sizes in
/// full-resolution pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    /// Context downscale factor.
    pub scale: usize,
    /// Output stride of the segmentation network.
    pub stride: usize,
    pub context_h: usize,
    pub context_w: usize,
    pub detail_h: usize,
    pub detail_w: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            stride: 4,
            context_h: 32,
            context_w: 32,
            detail_h: 32,
            detail_w: 32,
        }
    }
}

impl CropConfig {
    /// Alignment unit `k = s * o`.
    pub fn align(&self) -> usize {
        self.scale * self.stride
    }

    /// Full-resolution extent of the context crop.
    pub fn context_hr(&self) -> (usize, usize) {
        (self.scale * self.context_h, self.scale * self.context_w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("CropConfig", msg));
        if self.scale == 0 || self.stride == 0 {
            return bad("scale and stride must be >= 1".into());
        }
        let k = self.align();
        let (chr, cwr) = self.context_hr();
        for (name, v) in [
            ("context height (full-res)", chr),
            ("context width (full-res)", cwr),
            ("detail height", self.detail_h),
            ("detail width", self.detail_w),
        ] {
            if v == 0 || v % k != 0 {
                return bad(format!("{name} {v} is not a positive multiple of k={k}"));
            }
        }
        if self.detail_h > chr || self.detail_w > cwr {
            return bad(format!(
                "detail {}x{} exceeds context extent {chr}x{cwr}",
                self.detail_h, self.detail_w
            ));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[top, bottom) x [left, right)` in the
/// full-resolution image frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropBox {
    pub fn new(top: usize, left: usize, h: usize, w: usize) -> Self {
        Self {
            top,
            bottom: top + h,
            left,
            right: left + w,
        }
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn contains(&self, other: &CropBox) -> bool {
        self.top <= other.top
            && other.bottom <= self.bottom
            && self.left <= other.left
            && other.right <= self.right
    }

    /// Checks bounds against an `h x w` image and alignment to `k`.
    pub fn validate(&self, h: usize, w: usize, k: usize) -> Result<()> {
        if self.top >= self.bottom || self.left >= self.right {
            return Err(Error::invalid("CropBox", format!("empty box {self:?}")));
        }
        if self.bottom > h || self.right > w {
            return Err(Error::invalid(
                "CropBox",
                format!("box {self:?} exceeds image {h}x{w}"),
            ));
        }
        if [self.top, self.left, self.height(), self.width()]
            .iter()
            .any(|v| v % k != 0)
        {
            return Err(Error::invalid(
                "CropBox",
                format!("box {self:?} is not aligned to k={k}"),
            ));
        }
        Ok(())
    }
}

/// Uniform `u * k` for `u` in `{0, ..., floor(span / k)}`.
fn aligned_offset(span: usize, k: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(0..=span / k) * k
}

/// Samples a context box inside an `h x w` image.
pub fn sample_context_box(
    h: usize,
    w: usize,
    cfg: &CropConfig,
    rng: &mut impl Rng,
) -> Result<CropBox> {
    let (ch, cw) = cfg.context_hr();
    if h < ch || w < cw {
        return Err(Error::invalid(
            "sample_context_box",
            format!("image {h}x{w} is smaller than the context crop {ch}x{cw}"),
        ));
    }
    let k = cfg.align();
    let top = aligned_offset(h - ch, k, rng);
    let left = aligned_offset(w - cw, k, rng);
    Ok(CropBox::new(top, left, ch, cw))
}

/// Samples a detail box inside `ctx`, returned in the absolute image frame.
pub fn sample_detail_box(ctx: &CropBox, cfg: &CropConfig, rng: &mut impl Rng) -> Result<CropBox> {
    let k = cfg.align();
    if ctx.height() < cfg.detail_h || ctx.width() < cfg.detail_w {
        return Err(Error::invalid(
            "sample_detail_box",
            format!("context {ctx:?} smaller than detail crop"),
        ));
    }
    let dy = aligned_offset(ctx.height() - cfg.detail_h, k, rng);
    let dx = aligned_offset(ctx.width() - cfg.detail_w, k, rng);
    Ok(CropBox::new(
        ctx.top + dy,
        ctx.left + dx,
        cfg.detail_h,
        cfg.detail_w,
    ))
}

fn check_box(x: &Tensor, b: &CropBox, op: &'static str) -> Result<()> {
    let (_, _, h, w) = x.dims4(op)?;
    if b.bottom > h || b.right > w || b.top >= b.bottom || b.left >= b.right {
        return Err(Error::invalid(
            op,
            format!("box {b:?} out of bounds for {h}x{w}"),
        ));
    }
    Ok(())
}

/// Crops `b` from an NCHW image at full resolution.
pub fn extract_detail(x: &Tensor, b: &CropBox) -> Result<Tensor> {
    check_box(x, b, "extract_detail")?;
    ops::crop(x, b.top, b.left, b.height(), b.width())
}

/// Crops `b` and bilinearly downsamples by the context scale.
pub fn extract_context(x: &Tensor, b: &CropBox, cfg: &CropConfig) -> Result<Tensor> {
    check_box(x, b, "extract_context")?;
    let region = ops::crop(x, b.top, b.left, b.height(), b.width())?;
    ops::resize_bilinear(&region, Factor::down(cfg.scale))
}
