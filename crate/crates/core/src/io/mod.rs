//! Checkpoints, configuration files, CSV tables and SVG plots.

mod binary;
mod checkpoint;
mod config;
mod svg;
mod tables;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Progress, TensorPayload, TensorRecord, MAGIC, VERSION,
};
pub use config::{
    model_config_from_text, model_config_to_text, parse_grid_entry, parse_key_values, Budget, DownstreamConfig,
    ExperimentConfig, KeyValue, Precision,
};
pub use svg::{axis_range, curve_plot, frontier_plot, CurveAxis, Plot, Series, SeriesKind, AXIS_MARGIN};
pub use tables::*;
