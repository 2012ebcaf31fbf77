//! Training loop, evaluation, run persistence, reports and plots.

pub mod config;
pub mod metrics;
pub mod plot;
pub mod record;
pub mod report;
pub mod train;

pub use config::{KeyValues, Method, OuterOptimizer, TrainConfig};
pub use metrics::{evaluate, rank_trajectory, EpochMetrics};
pub use plot::{emit_plot, render_svg};
pub use record::RunRecord;
pub use report::{compare, sweep_k, ComparisonReport, SweepResult};
pub use train::{train, train_observed, BatchEvent, Phase, StepDetail, TrainObserver};
