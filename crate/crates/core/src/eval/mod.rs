//! Evaluation metrics and experiment pipelines.

mod experiments;
mod metrics;
mod report;

use thiserror::Error;

use crate::influence::InfluenceError;
use crate::lab::LabError;
use crate::store::StoreError;

pub use experiments::{
    prepare_run, run_class_detection_experiment, run_correlation_experiment,
    run_mislabel_experiment, run_selection_experiment, select_most_beneficial, ExperimentConfig,
    PreparedRun,
};
pub use metrics::{
    auc, average_ranks, class_detection, pearson, spearman, summarize, ClassDetection, Summary,
};
pub use report::{ExperimentReport, Record, Status, SummaryRow, Timing, VERSION};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("inputs have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least two values, got {0}")]
    TooShort(usize),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("one of the inputs has zero variance")]
    DegenerateVariance,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("query class {0} has no training points")]
    UnknownClass(usize),
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Store(#[from] StoreError),
}
