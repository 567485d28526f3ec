//! Dataset ingestion, sweep orchestration and reporting on top of
//! `scalessl_core`.

pub mod ingest;
pub mod report;
pub mod sweep;

use thiserror::Error;

pub use ingest::{ingest_dataset, read_dataset, resolve_patch_size, Dataset, NormStats};
pub use report::{emit_report, ReportFiles};
pub use sweep::{
    aggregate, run_sweep, run_sweep_with, AggregateRow, Cell, RunRecord, RunStatus, SweepAxes, SweepOptions, SweepSpec,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("format: {0}")]
    Format(String),
    #[error("record {0} has no mask but its split requires labels")]
    MissingMask(String),
    #[error("inconsistent shape: {0}")]
    InconsistentShape(String),
    #[error("patch size {0} is below the minimum of 8")]
    TooSmall(usize),
    #[error("no finished runs to report")]
    NothingToReport,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Shape(#[from] scalessl_core::ShapeError),
    #[error(transparent)]
    Config(#[from] scalessl_core::ConfigError),
    #[error(transparent)]
    Train(#[from] scalessl_core::train::TrainError),
    #[error(transparent)]
    Eval(#[from] scalessl_core::evalkit::EvalError),
    #[error(transparent)]
    Synth(#[from] scalessl_core::synth::SynthError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
