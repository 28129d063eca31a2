//! Compression error statistics, Pareto frontiers and experiment
//! aggregation.

mod convergence;
mod error_stats;
mod pareto;
mod sweep;

pub use convergence::{convergence_vs_compressibility, ConvergenceRow};
pub use error_stats::{compression_error_stats, weight_differences, whole_model_error_stats, ErrorStats};
pub use pareto::{dominates, pareto_frontier, CompressionPoint, Frontier, MemoryMetric, MetricMode};
pub use sweep::{first_crossing, sweep_aggregate, LabeledCurve, TargetCrossing};
