//! Minimal CPU neural-network stack: tensors, layers with hand-written
//! backward passes, the SSL and segmentation models, and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod models;
pub mod tensor;

use thiserror::Error;

use crate::types::ShapeError;

pub use checkpoint::{Checkpoint, CheckpointManifest, CheckpointWriter, StoredTensor};
pub use layers::{Layer, Param};
pub use models::{
    copy_params, ema_update, encode, logits_to_probs, param_checksum, project, segment_patch, sigmoid, Decoder,
    DecoderSpec, Encoder, EncoderSpec, Head, HeadKind, HeadSpec, Nonlinearity, SegmentationModel, SslForward, SslModel,
};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}
