use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied before taking logarithms of probabilities.
pub const LOG_CLAMP: f64 = 1e-12;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("softmax")?;
    let plane = h * w;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(src[base + ch * plane + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (src[base + ch * plane + p] - m).exp();
                out[base + ch * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Adjoint of [`softmax_channels`] given its output `y`.
pub fn softmax_channels_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = y.dims4("softmax_backward")?;
    y.expect_same_shape(grad_out, "softmax_backward")?;
    let plane = h * w;
    let (ys, gs) = (y.data(), grad_out.data());
    let mut out = vec![0.0; ys.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let dot: f64 = (0..c)
                .map(|ch| ys[base + ch * plane + p] * gs[base + ch * plane + p])
                .sum();
            for ch in 0..c {
                let i = base + ch * plane + p;
                out[i] = ys[i] * (gs[i] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Divides every pixel by its channel sum, `y_c = x_c / sum_k x_k`.
/// Inputs must be non-negative with positive channel sums.
pub fn normalize_channels(x: &Tensor) -> Result<Tensor> {
    normalize_channels_except(x, None)
}

/// [`normalize_channels`] that leaves the pixels flagged in `keep`
/// (indexed `item * h * w + pixel`) unchanged.
pub fn normalize_channels_except(x: &Tensor, keep: Option<&[bool]>) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("normalize_channels")?;
    let plane = h * w;
    check_keep(keep, n * plane)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            if keep.is_some_and(|k| k[b * plane + p]) {
                continue;
            }
            let z: f64 = (0..c).map(|ch| d[base + ch * plane + p]).sum();
            if z.is_nan() || z <= 0.0 {
                return Err(Error::invalid(
                    "normalize_channels",
                    format!("channel sum {z} at pixel {p} of item {b}"),
                ));
            }
            for ch in 0..c {
                d[base + ch * plane + p] /= z;
            }
        }
    }
    Ok(out)
}

fn check_keep(keep: Option<&[bool]>, len: usize) -> Result<()> {
    match keep {
        Some(k) if k.len() != len => Err(Error::shape(
            "normalize_channels",
            "keep mask",
            len.to_string(),
            k.len().to_string(),
        )),
        _ => Ok(()),
    }
}

/// Adjoint of [`normalize_channels`] given its input `x` and output `y`:
/// `dx_c = (g_c - sum_k g_k y_k) / sum_k x_k`.
pub fn normalize_channels_backward(x: &Tensor, y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    normalize_channels_except_backward(x, y, grad_out, None)
}

/// Adjoint of [`normalize_channels_except`]; kept pixels pass the gradient
/// through.
pub fn normalize_channels_except_backward(
    x: &Tensor,
    y: &Tensor,
    grad_out: &Tensor,
    keep: Option<&[bool]>,
) -> Result<Tensor> {
    let (n, c, h, w) = y.dims4("normalize_channels_backward")?;
    y.expect_same_shape(grad_out, "normalize_channels_backward")?;
    let plane = h * w;
    check_keep(keep, n * plane)?;
    let (xs, ys, gs) = (x.data(), y.data(), grad_out.data());
    let mut out = gs.to_vec();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            if keep.is_some_and(|k| k[b * plane + p]) {
                continue;
            }
            let z: f64 = (0..c).map(|ch| xs[base + ch * plane + p]).sum();
            let dot: f64 = (0..c)
                .map(|ch| ys[base + ch * plane + p] * gs[base + ch * plane + p])
                .sum();
            for ch in 0..c {
                let i = base + ch * plane + p;
                out[i] = (gs[i] - dot) / z;
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

fn check_bcast(a: &Tensor, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4("mul_channels")?;
    let (an, ac, ah, aw) = a.dims4("mul_channels")?;
    if (an, ah, aw) != (n, h, w) || (ac != 1 && ac != c) {
        return Err(Error::shape(
            "mul_channels",
            "weight",
            format!("[{n}, 1 or {c}, {h}, {w}]"),
            format!("{:?}", a.shape()),
        ));
    }
    Ok((n, c, h * w, ac))
}

/// `a * x` where `a` has either the channels of `x` or a single channel
/// broadcast over all of them.
pub fn mul_channels(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (n, c, plane, ac) = check_bcast(a, x)?;
    let (ad, xd) = (a.data(), x.data());
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let xo = (b * c + ch) * plane;
            let ao = (b * ac + if ac == 1 { 0 } else { ch }) * plane;
            for i in 0..plane {
                out[xo + i] = ad[ao + i] * xd[xo + i];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Adjoint of [`mul_channels`]: `(d_a, d_x)`.
pub fn mul_channels_backward(
    a: &Tensor,
    x: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, c, plane, ac) = check_bcast(a, x)?;
    let (ad, xd, g) = (a.data(), x.data(), grad_out.data());
    let mut da = vec![0.0; ad.len()];
    let mut dx = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let xo = (b * c + ch) * plane;
            let ao = (b * ac + if ac == 1 { 0 } else { ch }) * plane;
            for i in 0..plane {
                da[ao + i] += g[xo + i] * xd[xo + i];
                dx[xo + i] = g[xo + i] * ad[ao + i];
            }
        }
    }
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(x.shape().to_vec(), dx)?,
    ))
}

fn check_nll_operands(
    probs: &Tensor,
    target: &Tensor,
    weights: &Tensor,
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = probs.dims4("cross_entropy")?;
    probs.expect_same_shape(target, "cross_entropy")?;
    if weights.shape() != [n, h, w] {
        return Err(Error::shape(
            "cross_entropy",
            "weights",
            format!("{:?}", [n, h, w]),
            format!("{:?}", weights.shape()),
        ));
    }
    Ok((n, c, h * w))
}

/// Weighted negative log-likelihood of probability maps against one-hot
/// targets, averaged over all `N * H * W` pixels.
pub fn nll_probabilities(probs: &Tensor, target: &Tensor, weights: &Tensor) -> Result<f64> {
    let (n, c, plane) = check_nll_operands(probs, target, weights)?;
    let (p, t, q) = (probs.data(), target.data(), weights.data());
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in 0..plane {
                let y = t[off + i];
                if y != 0.0 {
                    total -= q[b * plane + i] * y * p[off + i].max(LOG_CLAMP).ln();
                }
            }
        }
    }
    Ok(total / (n * plane) as f64)
}

/// Gradient of [`nll_probabilities`] with respect to `probs`, scaled by
/// the upstream scalar gradient.
pub fn nll_backward(
    probs: &Tensor,
    target: &Tensor,
    weights: &Tensor,
    upstream: f64,
) -> Result<Tensor> {
    let (n, c, plane) = check_nll_operands(probs, target, weights)?;
    let (p, t, q) = (probs.data(), target.data(), weights.data());
    let norm = upstream / (n * plane) as f64;
    let mut out = vec![0.0; p.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in 0..plane {
                let y = t[off + i];
                let pi = p[off + i];
                if y != 0.0 && pi > LOG_CLAMP {
                    out[off + i] = -norm * q[b * plane + i] * y / pi;
                }
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_and_extremes() {
        let s = sigmoid(&Tensor::new(vec![3], vec![0.0, 800.0, -800.0]).unwrap());
        assert_eq!(s.data()[0], 0.5);
        assert_eq!(s.data()[1], 1.0);
        assert_eq!(s.data()[2], 0.0);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_normalizes_and_is_stable() {
        let x = Tensor::from_fn(&[2, 4, 3, 3], |i| (i as f64 * 1.7).sin() * 500.0);
        let y = softmax_channels(&x).unwrap();
        assert!(y.is_finite());
        for b in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..4).map(|c| y.data()[(b * 4 + c) * 9 + p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_channels_sums_to_one() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| 0.1 + ((i * 7) % 5) as f64);
        let y = normalize_channels(&x).unwrap();
        for b in 0..2 {
            for p in 0..4 {
                let s: f64 = (0..3).map(|c| y.data()[(b * 3 + c) * 4 + p]).sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
        // [1, 3] -> [0.25, 0.75]
        let t =
            normalize_channels(&Tensor::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(t.data(), &[0.25, 0.75]);
        assert!(normalize_channels(&Tensor::zeros(&[1, 2, 1, 1])).is_err());
    }

    #[test]
    fn kept_pixels_are_untouched_in_both_directions() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![0.3, 1.0, 0.6, 3.0]).unwrap();
        let keep = [true, false];
        let y = normalize_channels_except(&x, Some(&keep)).unwrap();
        assert_eq!(y.data(), &[0.3, 0.25, 0.6, 0.75]);
        let g = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, -1.0, 4.0]).unwrap();
        let dx = normalize_channels_except_backward(&x, &y, &g, Some(&keep)).unwrap();
        let full = normalize_channels_backward(&x, &normalize_channels(&x).unwrap(), &g).unwrap();
        assert_eq!((dx.data()[0], dx.data()[2]), (1.0, -1.0));
        assert_eq!(
            (dx.data()[1], dx.data()[3]),
            (full.data()[1], full.data()[3])
        );
        assert!(normalize_channels_except(&x, Some(&[true])).is_err());
    }

    #[test]
    fn nll_closed_forms() {
        let uniform = Tensor::full(&[1, 2, 2, 2], 0.5);
        let target = Tensor::from_fn(&[1, 2, 2, 2], |i| {
            f64::from(u8::from(i % 5 == 0 || i == 6 || i == 7))
        });
        let ones = Tensor::ones(&[1, 2, 2]);
        let l = nll_probabilities(&uniform, &target, &ones).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(
            nll_probabilities(&uniform, &target, &Tensor::zeros(&[1, 2, 2])).unwrap(),
            0.0
        );
        assert!(nll_probabilities(&target, &target, &ones).unwrap().abs() < 1e-9);
    }
}
