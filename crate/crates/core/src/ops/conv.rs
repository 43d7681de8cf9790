use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intermediates kept for the convolution adjoint.
#[derive(Clone, Debug)]
pub struct ConvSaved {
    /// im2col matrix, `K x (N * Ho * Wo)` row-major with `K = Ci * kh * kw`.
    cols: Vec<f64>,
    geom: Geom,
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl Geom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }
    fn np(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`.
/// `ta`/`tb` read the operand transposed from its stored layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given the
    // strides computed for the requested layout.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn geometry(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Geom> {
    let (n, ci, h, w) = input.dims4("conv2d")?;
    let (co, wci, kh, kw) = weight.dims4("conv2d")?;
    if wci != ci {
        return Err(Error::shape("conv2d", "input channels", wci, ci));
    }
    if bias.shape() != [co] {
        return Err(Error::shape(
            "conv2d",
            "bias",
            format!("[{co}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} must have odd sides"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    if h + 2 * padding < kh {
        return Err(Error::shape(
            "conv2d",
            "height",
            format!(">= {kh}"),
            h + 2 * padding,
        ));
    }
    if w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            "width",
            format!(">= {kw}"),
            w + 2 * padding,
        ));
    }
    Ok(Geom {
        n,
        ci,
        h,
        w,
        co,
        kh,
        kw,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
        stride,
        padding,
    })
}

fn im2col(x: &[f64], g: &Geom) -> Vec<f64> {
    let np = g.np();
    let plane = g.ho * g.wo;
    let mut cols = vec![0.0; g.k() * np];
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for b in 0..g.n {
                    let src = &x[(b * g.ci + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[b * plane + oy * g.wo..][..g.wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geom) -> Vec<f64> {
    let np = g.np();
    let plane = g.ho * g.wo;
    let mut x = vec![0.0; g.n * g.ci * g.h * g.w];
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.ci + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[b * plane + oy * g.wo..][..g.wo];
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation over an NCHW batch with zero padding.
///
/// Returns the output together with what the adjoint needs; callers that
/// never differentiate simply drop the second element.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvSaved)> {
    let g = geometry(input, weight, bias, stride, padding)?;
    let cols = im2col(input.data(), &g);
    let np = g.np();
    let plane = g.ho * g.wo;
    let mut out_mat = vec![0.0; g.co * np];
    gemm(
        g.co,
        g.k(),
        np,
        weight.data(),
        false,
        &cols,
        false,
        0.0,
        &mut out_mat,
    );

    let mut out = vec![0.0; g.n * g.co * plane];
    for b in 0..g.n {
        for o in 0..g.co {
            let bo = bias.data()[o];
            let src = &out_mat[o * np + b * plane..][..plane];
            let dst = &mut out[(b * g.co + o) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bo;
            }
        }
    }
    let out = Tensor::new(vec![g.n, g.co, g.ho, g.wo], out)?;
    Ok((out, ConvSaved { cols, geom: g }))
}

/// Adjoint of [`conv2d`]: returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    saved: &ConvSaved,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = saved.geom;
    let plane = g.ho * g.wo;
    let np = g.np();
    if grad_out.shape() != [g.n, g.co, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            "grad_out",
            format!("{:?}", [g.n, g.co, g.ho, g.wo]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let go = grad_out.data();
    let mut dmat = vec![0.0; g.co * np];
    let mut dbias = vec![0.0; g.co];
    for b in 0..g.n {
        for o in 0..g.co {
            let src = &go[(b * g.co + o) * plane..][..plane];
            dmat[o * np + b * plane..][..plane].copy_from_slice(src);
            dbias[o] += src.iter().sum::<f64>();
        }
    }
    let k = g.k();
    let mut dweight = vec![0.0; g.co * k];
    gemm(
        g.co,
        np,
        k,
        &dmat,
        false,
        &saved.cols,
        true,
        0.0,
        &mut dweight,
    );
    let mut dcols = vec![0.0; k * np];
    gemm(
        k,
        g.co,
        np,
        weight.data(),
        true,
        &dmat,
        false,
        0.0,
        &mut dcols,
    );
    let dinput = col2im(&dcols, &g);
    Ok((
        Tensor::new(vec![g.n, g.ci, g.h, g.w], dinput)?,
        Tensor::new(vec![g.co, g.ci, g.kh, g.kw], dweight)?,
        Tensor::new(vec![g.co], dbias)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, ci, h, wd) = x.dims4("t").unwrap();
        let (co, _, kh, kw) = w.dims4("t").unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for bi in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x.at4(bi, c, iy as usize, ix as usize)
                                            * w.at4(o, c, ky, kx);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let (y, _) = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 2, 2), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let x = Tensor::from_fn(&[2, 3, 5, 5], |i| (i as f64).sin());
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.25]).unwrap();
        let (y, _) = conv2d(&x, &w, &b, 1, 1).unwrap();
        for bi in 0..2 {
            for o in 0..4 {
                for i in 0..5 {
                    for j in 0..5 {
                        assert_eq!(y.at4(bi, o, i, j), b.data()[o]);
                    }
                }
            }
        }
    }

    #[test]
    fn matches_naive_loop() {
        let x = Tensor::from_fn(&[2, 3, 8, 7], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13) % 7) as f64 / 3.0 - 1.0);
        let b = Tensor::from_fn(&[4], |i| i as f64 * 0.1);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (3, 1)] {
            let (y, _) = conv2d(&x, &w, &b, stride, pad).unwrap();
            let r = naive(&x, &w, &b, stride, pad);
            assert_eq!(y.shape(), r.shape());
            assert!(y.max_abs_diff(&r) < 1e-12);
        }
    }

    #[test]
    fn stride_two_output_shape() {
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let (y, _) = conv2d(&x, &w, &Tensor::zeros(&[4]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn rejects_even_kernel_and_small_input() {
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(
            &Tensor::zeros(&[1, 1, 4, 4]),
            &w,
            &Tensor::zeros(&[1]),
            1,
            0
        )
        .is_err());
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        let err = conv2d(
            &Tensor::zeros(&[1, 1, 2, 2]),
            &w,
            &Tensor::zeros(&[1]),
            1,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }
}
