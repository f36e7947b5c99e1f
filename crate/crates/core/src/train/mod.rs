//! Layer regeneration by feature-map regression.
//!
//! A slim layer is fitted so that, on the activations it will see, it
//! reproduces the feature maps of the original sub-network it replaces:
//! minimise `(1/B) * sum_i ||Y_i - conv(X_i)||^2` by momentum SGD from a
//! Xavier start.

mod data;
mod finetune;
mod grad;
mod init;
mod sgd;

use thiserror::Error;

use crate::graph::GraphError;
use crate::tensor::ShapeError;

pub use data::{gather, record_activations, sample_pairs, segment_source, traffic, InputSource, PairDataset};
pub use finetune::{finetune_records, retrain_jobs, FinetuneFailure, FinetuneOptions, JobReport, RetrainJob};
pub use grad::{gradient_check, loss_and_grads, reconstruction_loss, Gradients};
pub use init::{xavier_bound, xavier_conv, xavier_init};
pub use sgd::{curvature, sgd_fit, FitReport, LrScaling, TrainConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("layer '{layer}': {reason}")]
    Job { layer: String, reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}
