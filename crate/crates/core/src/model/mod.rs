//! The audio-visual assessment network and its losses.

mod align;
pub mod check;
mod config;
mod loss;
mod net;
mod params;

pub use align::{fuse, interpolation_matrix, upsample_time};
pub use config::{Modality, ModelConfig, TaskMode};
pub use loss::{loss_task, loss_total, pool_utterance, task_loss_graph};
pub use net::{Batch, ForwardOutput, HeadOutput, Mode, Model, VideoBatch};
pub use params::{fan_in_uniform, orthogonal, ParamEntry, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("video format: {0}")]
    VideoFormat(String),
    #[error("modality mismatch: {0}")]
    Modality(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
