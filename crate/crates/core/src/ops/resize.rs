use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rational resize factor `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Factor {
    pub num: usize,
    pub den: usize,
}

impl Factor {
    pub const ONE: Factor = Factor { num: 1, den: 1 };

    pub fn up(k: usize) -> Self {
        Factor { num: k, den: 1 }
    }

    pub fn down(k: usize) -> Self {
        Factor { num: 1, den: k }
    }

    fn apply(&self, len: usize, op: &'static str) -> Result<usize> {
        if self.num == 0 || self.den == 0 {
            return Err(Error::invalid(op, "factor must be positive"));
        }
        let scaled = len * self.num;
        if !scaled.is_multiple_of(self.den) {
            return Err(Error::invalid(
                op,
                format!("size {len} times {}/{} is not integral", self.num, self.den),
            ));
        }
        Ok(scaled / self.den)
    }
}

fn plane_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, "rank", ">= 2", s.len()));
    }
    let h = s[s.len() - 2];
    let w = s[s.len() - 1];
    Ok((t.len() / (h * w), h, w))
}

fn with_spatial(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = h;
    s[r - 1] = w;
    s
}

/// Per-output-index interpolation taps under the half-pixel
/// (align-corners = false) convention: `(i0, i1, lambda)`.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|j| {
            // src = (j + 0.5) * input / output - 0.5, computed from integers
            // so dyadic factors stay exact.
            let num = (2 * j + 1) as i64 * input as i64 - output as i64;
            if num <= 0 {
                return (0, 0, 0.0);
            }
            let src = num as f64 / (2 * output) as f64;
            let i0 = (src.floor() as usize).min(input - 1);
            if i0 + 1 >= input {
                (i0, i0, 0.0)
            } else {
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

/// Bilinear resize of the two trailing axes.
///
/// Uses the half-pixel convention without antialiasing; interpolation is
/// evaluated as `v0 + t * (v1 - v0)` so constant fields are reproduced
/// bit-exactly for every factor.
pub fn resize_bilinear(input: &Tensor, factor: Factor) -> Result<Tensor> {
    let (_, h, w) = plane_dims(input, "resize_bilinear")?;
    let oh = factor.apply(h, "resize_bilinear")?;
    let ow = factor.apply(w, "resize_bilinear")?;
    resize_bilinear_to(input, oh, ow)
}

/// Bilinear resize of the two trailing axes to an explicit size.
pub fn resize_bilinear_to(input: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(input, "resize_bilinear")?;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("resize_bilinear", "empty output size"));
    }
    if (oh, ow) == (h, w) {
        return Ok(input.clone());
    }
    let tw = taps(w, ow);
    let th = taps(h, oh);
    let src = input.data();
    let mut tmp = vec![0.0; planes * h * ow];
    for p in 0..planes * h {
        let row = &src[p * w..][..w];
        let out = &mut tmp[p * ow..][..ow];
        for (o, &(i0, i1, t)) in out.iter_mut().zip(&tw) {
            *o = row[i0] + t * (row[i1] - row[i0]);
        }
    }
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let plane = &tmp[p * h * ow..][..h * ow];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (j, &(i0, i1, t)) in th.iter().enumerate() {
            let r0 = &plane[i0 * ow..][..ow];
            let r1 = &plane[i1 * ow..][..ow];
            for ((d, &a), &b) in dst[j * ow..][..ow].iter_mut().zip(r0).zip(r1) {
                *d = a + t * (b - a);
            }
        }
    }
    Tensor::new(with_spatial(input.shape(), oh, ow), out)
}

/// Adjoint of [`resize_bilinear_to`]: maps an output gradient back to the
/// input shape `input_shape`.
pub fn resize_bilinear_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (planes, oh, ow) = plane_dims(grad_out, "resize_bilinear_backward")?;
    let h = input_shape[input_shape.len() - 2];
    let w = input_shape[input_shape.len() - 1];
    if (oh, ow) == (h, w) {
        return Ok(grad_out.clone());
    }
    let tw = taps(w, ow);
    let th = taps(h, oh);
    let g = grad_out.data();
    let mut tmp = vec![0.0; planes * h * ow];
    for p in 0..planes {
        let src = &g[p * oh * ow..][..oh * ow];
        let dst = &mut tmp[p * h * ow..][..h * ow];
        for (j, &(i0, i1, t)) in th.iter().enumerate() {
            for x in 0..ow {
                let v = src[j * ow + x];
                dst[i0 * ow + x] += (1.0 - t) * v;
                dst[i1 * ow + x] += t * v;
            }
        }
    }
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes * h {
        let src = &tmp[p * ow..][..ow];
        let dst = &mut out[p * w..][..w];
        for (&v, &(i0, i1, t)) in src.iter().zip(&tw) {
            dst[i0] += (1.0 - t) * v;
            dst[i1] += t * v;
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Nearest-neighbour resize of the two trailing axes.
///
/// Output index `j` reads input index `floor(j * in / out)`: downscaling by
/// an integer factor keeps the top-left pixel of every block.
pub fn resize_nearest(input: &Tensor, factor: Factor) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(input, "resize_nearest")?;
    let oh = factor.apply(h, "resize_nearest")?;
    let ow = factor.apply(w, "resize_nearest")?;
    let src = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &src[p * h * w..][..h * w];
        for j in 0..oh {
            let sy = j * h / oh;
            for i in 0..ow {
                out.push(plane[sy * w + i * w / ow]);
            }
        }
    }
    Tensor::new(with_spatial(input.shape(), oh, ow), out)
}
