//! Small video masked autoencoder: encoder, reconstruction decoder,
//! classification head, losses and checkpoints.

mod checkpoint;
mod config;
mod loss;
mod mae;

pub use checkpoint::{restore_strict, Checkpoint, CHECKPOINT_VERSION};
pub use config::{
    ClassifierHead, DecoderConfig, EncoderConfig, InputGeometry, ModelConfig, Pooling,
};
pub use loss::{
    bce, mse_masked_graph, reconstruction_loss, squash, BatchLoss, ReconLoss, ReconMode, Squash,
};
pub use mae::{count_parameters, Encoded, MaeModel, TokenInput};
