//! Metrics, toy datasets and experiment orchestration.

pub mod checks;
pub mod datasets;
pub mod experiment;
pub mod metrics;

pub use datasets::{builtin_dataset, Builtin};
pub use metrics::{energy_distance, energy_distance_unbiased, metric_report, sliced_w2, MetricReport};
