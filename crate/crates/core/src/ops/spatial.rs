use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn offsets_for(
    n: usize,
    offsets: &[(usize, usize)],
    op: &'static str,
) -> Result<Vec<(usize, usize)>> {
    match offsets.len() {
        1 => Ok(vec![offsets[0]; n]),
        m if m == n => Ok(offsets.to_vec()),
        m => Err(Error::shape(op, "offset count", format!("1 or {n}"), m)),
    }
}

/// Spatial window `[top, top + h) x [left, left + w)` of an NCHW tensor.
pub fn crop(input: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    crop_each(input, &[(top, left)], h, w)
}

/// Like [`crop`], with one `(top, left)` per batch item (or one shared).
pub fn crop_each(input: &Tensor, offsets: &[(usize, usize)], h: usize, w: usize) -> Result<Tensor> {
    let (n, c, ih, iw) = input.dims4("crop")?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("crop", "empty window"));
    }
    let offs = offsets_for(n, offsets, "crop")?;
    for &(top, left) in &offs {
        if top + h > ih {
            return Err(Error::shape("crop", "height", format!("<= {ih}"), top + h));
        }
        if left + w > iw {
            return Err(Error::shape("crop", "width", format!("<= {iw}"), left + w));
        }
    }
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for (b, &(top, left)) in offs.iter().enumerate() {
        for ch in 0..c {
            let plane = &src[(b * c + ch) * ih * iw..][..ih * iw];
            for y in top..top + h {
                out.extend_from_slice(&plane[y * iw + left..][..w]);
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Places an NCHW tensor at `(top, left)` inside a zero canvas of size
/// `h x w`. Adjoint of [`crop`].
pub fn zero_pad(input: &Tensor, h: usize, w: usize, top: usize, left: usize) -> Result<Tensor> {
    pad_each(input, h, w, &[(top, left)])
}

/// Like [`zero_pad`], with one `(top, left)` per batch item (or one shared).
pub fn pad_each(input: &Tensor, h: usize, w: usize, offsets: &[(usize, usize)]) -> Result<Tensor> {
    let (n, c, ih, iw) = input.dims4("zero_pad")?;
    let offs = offsets_for(n, offsets, "zero_pad")?;
    for &(top, left) in &offs {
        if top + ih > h {
            return Err(Error::shape(
                "zero_pad",
                "height",
                format!(">= {}", top + ih),
                h,
            ));
        }
        if left + iw > w {
            return Err(Error::shape(
                "zero_pad",
                "width",
                format!(">= {}", left + iw),
                w,
            ));
        }
    }
    let src = input.data();
    let mut out = vec![0.0; n * c * h * w];
    for (b, &(top, left)) in offs.iter().enumerate() {
        for ch in 0..c {
            let p = b * c + ch;
            let plane = &src[p * ih * iw..][..ih * iw];
            let dst = &mut out[p * h * w..][..h * w];
            for y in 0..ih {
                dst[(top + y) * w + left..][..iw].copy_from_slice(&plane[y * iw..][..iw]);
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
