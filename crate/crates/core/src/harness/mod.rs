//! Experiment harness: configuration and presets, trial execution, metric
//! aggregation and output files.

mod config;
mod report;
mod run;

pub use config::{
    preset, BuiltModel, ExperimentConfig, FilterKind, FilterSpec, ModelKind, MseConvention, PfpfCovariance, Preset, TruthStart,
    PRESETS,
};
pub use report::{
    compute_mse_and_lost_tracks, emit_outputs, format_table, read_summary_csv, read_trajectory, summarize, FilterSummary,
    LoadedRun, LogzRow, MseSummary, RunMetadata, SummaryRow,
};
pub use run::{
    generate_trajectory, run_experiment, run_filter, run_trial, trial_trajectory, FailureRecord, FilterRun, RunReport, StepRecord,
    Trajectory,
};
