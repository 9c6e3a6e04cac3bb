//! Experiment configuration, metrics, result files and the CLI.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use metrics::{detection_accuracy, linear_probe, MetricsRow};
pub use report::emit_reports;
