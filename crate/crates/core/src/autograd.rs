//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every primitive in execution order. [`Graph::backward`]
//! walks the record in exact reverse order and accumulates (`+=`) adjoints, so
//! a value consumed twice receives the sum of both contributions.

use crate::error::{Error, Result};
use crate::ops::{self, ConvSaved, Factor};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        saved: Box<ConvSaved>,
    },
    Resize {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Normalize {
        x: Var,
        keep: Option<Vec<bool>>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulChannels {
        a: Var,
        x: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Square {
        x: Var,
    },
    Crop {
        x: Var,
        offsets: Vec<(usize, usize)>,
    },
    Pad {
        x: Var,
        offsets: Vec<(usize, usize)>,
    },
    BatchSlice {
        x: Var,
        start: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Nll {
        p: Var,
        target: Tensor,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints of the trainable leaves produced by [`Graph::backward`].
/// Intermediate adjoints are released as soon as they have been propagated.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` did not influence
    /// the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (out, saved) =
            ops::conv2d(self.value(x), self.value(w), self.value(b), stride, padding)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                saved: Box::new(saved),
            },
            rg,
        ))
    }

    pub fn resize_bilinear(&mut self, x: Var, factor: Factor) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(x), factor)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Channel-sum normalization, see [`ops::normalize_channels`].
    pub fn normalize_channels(&mut self, x: Var) -> Result<Var> {
        self.normalize_channels_except(x, None)
    }

    /// Channel-sum normalization that skips the flagged pixels, see
    /// [`ops::normalize_channels_except`].
    pub fn normalize_channels_except(&mut self, x: Var, keep: Option<Vec<bool>>) -> Result<Var> {
        let out = ops::normalize_channels_except(self.value(x), keep.as_deref())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Normalize { x, keep }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Channel-broadcasting product; see [`ops::mul_channels`].
    pub fn mul_channels(&mut self, a: Var, x: Var) -> Result<Var> {
        let out = ops::mul_channels(self.value(a), self.value(x))?;
        let rg = self.rg(a) || self.rg(x);
        Ok(self.push(out, Op::MulChannels { a, x }, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square { x }, rg)
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        self.crop_each(x, &[(top, left)], h, w)
    }

    /// Crop with one offset per batch item.
    pub fn crop_each(
        &mut self,
        x: Var,
        offsets: &[(usize, usize)],
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let out = ops::crop_each(self.value(x), offsets, h, w)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Crop {
                x,
                offsets: offsets.to_vec(),
            },
            rg,
        ))
    }

    pub fn zero_pad(&mut self, x: Var, h: usize, w: usize, top: usize, left: usize) -> Result<Var> {
        self.pad_each(x, h, w, &[(top, left)])
    }

    /// Zero padding with one offset per batch item.
    pub fn pad_each(
        &mut self,
        x: Var,
        h: usize,
        w: usize,
        offsets: &[(usize, usize)],
    ) -> Result<Var> {
        let out = ops::pad_each(self.value(x), h, w, offsets)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Pad {
                x,
                offsets: offsets.to_vec(),
            },
            rg,
        ))
    }

    /// Items `start..start + count` of an NCHW value.
    pub fn batch_slice(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let out = self.value(x).batch_slice(start, count)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::BatchSlice { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(out, Op::Mean { x }, rg)
    }

    /// Weighted NLL of probability maps; see [`ops::nll_probabilities`].
    pub fn nll(&mut self, p: Var, target: &Tensor, weights: &Tensor) -> Result<Var> {
        let loss = ops::nll_probabilities(self.value(p), target, weights)?;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                p,
                target: target.clone(),
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Adjoints of the scalar `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::shape("backward", "root elements", 1, root_val.len()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_val.shape()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let give = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, saved } => {
                    let (dx, dw, db) = ops::conv2d_backward(saved, self.value(*w), &g)?;
                    give(*x, dx, &mut grads);
                    give(*w, dw, &mut grads);
                    give(*b, db, &mut grads);
                }
                Op::Resize { x } => {
                    let dx = ops::resize_bilinear_backward(&g, self.value(*x).shape())?;
                    give(*x, dx, &mut grads);
                }
                Op::Relu { x } => {
                    let dx =
                        self.value(*x)
                            .zip_map(&g, "relu", |v, d| if v > 0.0 { d } else { 0.0 })?;
                    give(*x, dx, &mut grads);
                }
                Op::Sigmoid { x } => {
                    let dx = node
                        .value
                        .zip_map(&g, "sigmoid", |s, d| d * s * (1.0 - s))?;
                    give(*x, dx, &mut grads);
                }
                Op::Softmax { x } => {
                    let dx = ops::softmax_channels_backward(&node.value, &g)?;
                    give(*x, dx, &mut grads);
                }
                Op::Normalize { x, keep } => {
                    let dx = ops::normalize_channels_except_backward(
                        &self.nodes[x.0].value,
                        &node.value,
                        &g,
                        keep.as_deref(),
                    )?;
                    give(*x, dx, &mut grads);
                }
                Op::Add { a, b } => {
                    give(*a, g.clone(), &mut grads);
                    give(*b, g, &mut grads);
                }
                Op::Sub { a, b } => {
                    give(*b, g.map(|v| -v), &mut grads);
                    give(*a, g, &mut grads);
                }
                Op::Mul { a, b } => {
                    let da = g.zip_map(self.value(*b), "mul", |d, v| d * v)?;
                    let db = g.zip_map(self.value(*a), "mul", |d, v| d * v)?;
                    give(*a, da, &mut grads);
                    give(*b, db, &mut grads);
                }
                Op::MulChannels { a, x } => {
                    let (da, dx) = ops::mul_channels_backward(self.value(*a), self.value(*x), &g)?;
                    give(*a, da, &mut grads);
                    give(*x, dx, &mut grads);
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    give(*x, g.map(|v| v * s), &mut grads);
                }
                Op::Square { x } => {
                    let dx = self.value(*x).zip_map(&g, "square", |v, d| 2.0 * v * d)?;
                    give(*x, dx, &mut grads);
                }
                Op::Crop { x, offsets } => {
                    let (_, _, h, w) = self.value(*x).dims4("crop")?;
                    give(*x, ops::pad_each(&g, h, w, offsets)?, &mut grads);
                }
                Op::Pad { x, offsets } => {
                    let (_, _, h, w) = self.value(*x).dims4("zero_pad")?;
                    give(*x, ops::crop_each(&g, offsets, h, w)?, &mut grads);
                }
                Op::BatchSlice { x, start } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let per = g.len() / g.shape()[0];
                    dx.data_mut()[start * per..][..g.len()].copy_from_slice(g.data());
                    give(*x, dx, &mut grads);
                }
                Op::Sum { x } => {
                    let d = g.item();
                    give(*x, Tensor::full(self.value(*x).shape(), d), &mut grads);
                }
                Op::Mean { x } => {
                    let xv = self.value(*x);
                    let d = g.item() / xv.len() as f64;
                    give(*x, Tensor::full(xv.shape(), d), &mut grads);
                }
                Op::Nll { p, target, weights } => {
                    let dp = ops::nll_backward(self.value(*p), target, weights, g.item())?;
                    give(*p, dp, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
