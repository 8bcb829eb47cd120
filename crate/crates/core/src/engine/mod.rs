//! A small differentiable network engine: convolution, linear, max-pool,
//! ReLU, batch-norm and flatten layers with residual blocks, trained with
//! hard-label and distillation losses.

mod layers;
pub mod loss;
mod net;
mod scalar;
pub mod tensorfile;
mod train;

pub use loss::{kd_loss, loss_and_grad, softmax_cross_entropy, LossMode, LossSpec};
pub use net::{build_network, Grads, LayerParams, Tape, TrainableNet, BN_MOMENTUM};
pub use scalar::{gemm, Scalar};
pub use train::{evaluate_accuracy, predict_logits, train, Optimizer, TrainConfig, TrainStats};

use thiserror::Error;

use crate::arch::{ArchError, DegeneracyClass};

#[derive(Debug, Clone, Error)]
pub enum EngineError {
    #[error("cannot build a network for a {0:?} architecture")]
    NotValid(DegeneracyClass),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("input has {got} values, expected {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("distillation loss requested without teacher logits")]
    MissingTeacher,
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("empty dataset")]
    EmptyData,
    #[error("{0}")]
    DataMismatch(String),
}
