//! Datasets and transfer-learning experiments.

pub mod data;
pub mod experiment;
pub mod study;

pub use data::{gen_synthetic, load_idx, Dataset, Split, Task};
pub use experiment::{
    accuracy, run_experiment, Augmentation, MetricsLog, MetricsRow, RunOutput, Schedule, TrainConfig,
};
