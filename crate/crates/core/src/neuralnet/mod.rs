//! A small 1-D CNN written from scratch: conv → LeakyReLU → max-pool blocks
//! followed by one dense layer, trained with cross-entropy and Adam.

mod adam;
mod checkpoint;
mod layers;
mod model;
mod tensor;
mod train;

use thiserror::Error;

pub use adam::{adam_update, AdamConfig, AdamState, ModelState};
pub use checkpoint::{
    checkpoint_len, decode_checkpoint, encode_checkpoint, header_len, load_checkpoint, network_from_checkpoint,
    save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use layers::{
    conv1d_backward, conv1d_forward, cross_entropy, dense_backward, dense_forward, leaky_relu, leaky_relu_backward,
    maxpool1d, maxpool1d_backward, Conv1d, ConvGeometry, ConvGrads, Dense, DenseGrads, LeakyRelu, MaxPool1d,
};
pub use model::{ArchConfig, Network};
pub use tensor::{Scalar, Tensor3};
pub use train::{
    evaluate, fit, make_batch, predict_labels, train_epoch, ConfusionMatrix, EpochRecord, EvalReport, FitConfig,
    FitResult,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called on {0} before forward")]
    MissingCache(&'static str),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
