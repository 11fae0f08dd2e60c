//! Deep latent-substrate model.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod substrate;
pub mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DlmConfig, ElboTerms, LabelKind, LatentMode};
pub use model::{Batch, Dlm, LossTerms, Readout};
pub use substrate::{
    calibrate_threshold, infer_substrate, reconstruct, reconstruct_binary, InferredSubstrate,
};
pub use train::{batch_of, train, train_model, EpochRecord, TrainedDlm, TrainingLog};

#[derive(Debug, Error)]
pub enum DlmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model state mismatch at {0}")]
    State(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Io(String),
}
