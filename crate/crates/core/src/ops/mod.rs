//! Forward kernels and their adjoints.
//!
//! Everything here is a pure function on [`Tensor`]s. The tape in
//! [`crate::autograd`] records these calls and replays the adjoints; the
//! teacher and the inference paths call them directly without a tape.

mod conv;
mod elementwise;
mod resize;
mod spatial;

pub use conv::{conv2d, conv2d_backward, ConvSaved};
pub use elementwise::{
    mul_channels, mul_channels_backward, nll_backward, nll_probabilities, normalize_channels,
    normalize_channels_backward, normalize_channels_except, normalize_channels_except_backward,
    relu, sigmoid, softmax_channels, softmax_channels_backward, LOG_CLAMP,
};
pub use resize::{
    resize_bilinear, resize_bilinear_backward, resize_bilinear_to, resize_nearest, Factor,
};
pub use spatial::{crop, crop_each, pad_each, zero_pad};
