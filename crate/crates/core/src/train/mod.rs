//! Training loop, experiment runner and ablation sweeps.

pub mod ablation;
pub mod config;
pub mod experiment;
pub mod step;

pub use config::{AugmentConfig, EvalModel, TrainConfig};
pub use experiment::{
    csv_header, evaluate, run_experiment, EvalResult, MetricsRow, PreparedData, RunResult,
};
pub use step::{compute_gradients, train_step, StepLosses, TrainBatch, TrainState};
