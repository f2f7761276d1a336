//! Experiment driver: builds per-scenario datasets, runs local, union,
//! baseline, cross-channel and federated experiments, and writes results
//! directories and reports.

mod record;
mod run;
mod spec;

use std::path::PathBuf;

use thiserror::Error;

pub use record::{
    confusion_csv, emit_report, load_result, run_suite, CrossMatrix, CurvePoint, LoadedResult, ResultsRecord, Summary,
    SuiteOutcome, CONFUSION_FILE, CROSS_FILE, CURVES_FILE, ERROR_FILE, MODEL_FILE, REPORT_FILE, SPEC_FILE, SUMMARY_FILE,
    TIMING_FILE,
};
pub use run::{
    arch_for, build_datasets, check_no_leakage, compute_baseline, compute_union, load_catalog, run_cross_matrix,
    run_experiment, run_federated, run_local, run_on, train_central, ScenarioData, Trained,
};
pub use spec::{ExperimentSpec, Mode, Suite, SPEC_FIELDS};

use crate::augment::AugmentError;
use crate::datapipe::DataError;
use crate::fedavg::FedError;
use crate::neuralnet::NnError;
use crate::signalgen::SignalError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("results record is missing fields: {0}")]
    MissingFields(String),
    #[error("invalid results record: {0}")]
    InvalidRecord(String),
    #[error("a communication appears in more than one partition")]
    Leakage,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}
