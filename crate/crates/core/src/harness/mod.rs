//! Experiment plumbing: JSON configuration, synthetic tasks, the end-to-end
//! pipeline and its reports.

pub mod config;
pub mod pipeline;
pub mod synthetic;

pub use config::{
    apply_override, parse_overrides, DataConfig, ExperimentConfig, FileData, NoiseLayer, NoiseSpec,
    SyntheticSpec,
};
pub use pipeline::{run_pipeline, run_stage, score_dataset, Report, ReportRow, Stage};
pub use synthetic::{generate_task, principal_leak, OodSet, SyntheticTask};
