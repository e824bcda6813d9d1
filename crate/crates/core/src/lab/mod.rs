//! Model lab: synthetic classification tasks, small adapter-tuned
//! classifiers, gradient extraction and ground-truth helpers.

mod bartlett;
mod model;
mod synthetic;
mod task;
mod train;

use thiserror::Error;

use crate::store::StoreError;

pub use bartlett::{bartlett_check, BartlettReport, LabelSource, BARTLETT_Z_THRESHOLD};
pub use model::{
    nll, Activation, Adapter, AdapterKind, Architecture, DenseLayer, LabModel, ModelSpec, Trace,
};
pub use synthetic::{random_factored_store, random_store};
pub use task::{flip_labels, generate_task, SyntheticTask, TaskSpec};
pub use train::{
    build_model, extract_factored, extract_gradients, test_accuracy, test_loss, train,
    train_subset, LabSubsetTrainer, LocationTask, Pretraining, TrainConfig, TrainReport,
};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
}
