//! Contrastive training: negative queues, momentum towers, the
//! cross-projection objective, and the training loop.

pub mod loss;
pub mod momentum;
pub mod queue;
pub mod trainer;

pub use loss::{
    apply_head, cx_loss, cx_loss_on_tape, info_nce, info_nce_in_batch, info_nce_in_batch_on_tape,
    info_nce_on_tape, CxLossConfig, CxTapeInputs, LossMode,
};
pub use momentum::{momentum_update, MomentumPair};
pub use queue::NegativeQueue;
pub use trainer::{EpochStats, StepReport, TrainState};

use thiserror::Error;

use crate::encoders::EncoderError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("embedding row norm {norm} deviates from 1")]
    NotNormalized { norm: f32 },
    #[error("batch of {batch} exceeds queue capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("queue expects dim {expected}, got shape {got:?}")]
    QueueDim { expected: usize, got: Vec<usize> },
    #[error("batch of {batch} is too small for contrastive training (need >= 2)")]
    BatchTooSmall { batch: usize },
    #[error("tower structures do not match: {detail}")]
    StructureMismatch { detail: String },
    #[error("contrastive configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ContrastiveError>;
