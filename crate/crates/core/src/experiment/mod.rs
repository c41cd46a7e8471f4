//! Experiment configs and presets, the training loop, metrics files, seed
//! sweeps and plots.

mod config;
mod metrics;
mod plot;
mod runner;

pub use config::{DiagnosticsConfig, ExperimentConfig, InnerConfig, MetaConfig, OuterConfig, OuterSource, PRESET_NAMES};
pub use metrics::{
    aggregate, read_table, read_table_file, rows_from_table, write_metrics, write_table, MetricsRow, Table, AGGREGATED,
    METRICS_COLUMNS, METRICS_VERSION_LINE,
};
pub use plot::{emit_plot, Quantity};
pub use runner::{
    aggregate_path, check_meta_gradient, metrics_path, run_experiment, run_to_dir, summary_path, sweep, tail_mean, RunOutput, RunSummary,
    SweepReport,
};

#[cfg(test)]
mod tests;
