//! Multi-resolution domain-adaptive semantic segmentation on a synthetic
//! benchmark: nested context/detail crops, learned scale attention, EMA
//! teacher self-training with sliding-window pseudo-labels.

pub mod autograd;
pub mod checkpoint;
pub mod crop;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pseudo;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use checkpoint::Checkpoint;
pub use crop::{CropBox, CropConfig};
pub use error::{Error, Result};
pub use fusion::{Prediction, ScoreForm};
pub use inference::{
    estimate_cost, infer_image, Architecture, AttentionMode, CostEstimate, InferenceConfig,
    InferenceOutput, SlideMode,
};
pub use model::{ModelConfig, NetworkParams, TeacherState};
pub use optim::{AdamW, OptimConfig};
pub use pseudo::{make_pseudo_label, plan_windows, ConfidenceMode, PseudoLabel, WindowPlan};
pub use tensor::Tensor;
pub use train::{run_experiment, TrainConfig};
