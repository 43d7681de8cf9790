//! Synthetic benchmark: scene generation, dataset I/O and metrics.

pub mod io;
pub mod metrics;
pub mod scene;

pub use io::{load_dataset, save_dataset, PALETTE};
pub use metrics::{iou_metrics, ConfusionMatrix};
pub use scene::{
    generate, generate_benchmark, BenchmarkSpec, Dataset, Domain, Image, LabelMap, Sample,
    SceneSpec, Split, CLASS_NAMES, NUM_CLASSES,
};
