//! Optimization, metrics, checkpoints and the epoch loop.

pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod metrics;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use config::{OptimizerKind, TrainConfig};
pub use engine::{evaluate, metrics_csv, run_training, EpochLog, LossReport, Trainer, TrainingOutcome};
pub use metrics::{cumulative_score, mean_predictor_mae, Metrics};
pub use optim::Optimizer;

#[cfg(test)]
pub(crate) mod tests;
