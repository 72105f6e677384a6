//! Synthetic task, training and experiment drivers for the toy decoder.

pub mod config;
pub mod experiment;
pub mod task;
pub mod train;

pub use config::{ExperimentConfig, Split};
pub use experiment::{run_experiment, saliency_stats, sweep, ReportRow, SweepAxis};
pub use task::{generate_task, Dataset, Sample, TaskSpec};
pub use train::{train_toy, TrainConfig, TrainOutcome};
