//! Synthetic data, the five-term training loss, two-stage optimisation and
//! the evaluation metrics.

mod checkpoint;
mod dist;
mod eval;
mod loss;
mod report;
mod train;

pub use checkpoint::{load_model, save_model, TrainedModel};
pub use dist::{generate_dataset, uniform_rotation, GenSpec, PoseDistribution, RootMode, BETA_BOUND};
pub use eval::{
    evaluate, mpjpe_cm, predicted_body, rotate_by_group, seg_accuracy_percent, v2v_cm, EvalReport, Metrics,
};
pub use loss::{LossContext, LossInputs, LossTerms, LossVars, LossWeights};
pub use report::{epoch_csv, metrics_csv, plot_csv, summary_table, EPOCH_CSV_HEADER, METRICS_CSV_HEADER};
pub use train::{train_stage, EpochRecord, Stage, TrainConfig};

use thiserror::Error;

use crate::bodymodel::BodyError;
use crate::equinet::EquinetError;
use crate::group60::GroupError;
use crate::microtensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss in stage {stage}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss { stage: u8, epoch: usize, batch: usize },
    #[error("checkpoint does not match the current rotation group")]
    HashMismatch,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Network(#[from] EquinetError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::HashMismatch => TrainError::HashMismatch,
            TensorError::Malformed(m) => TrainError::Checkpoint(m),
            other => TrainError::Tensor(other),
        }
    }
}
