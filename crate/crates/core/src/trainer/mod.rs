//! Optimization loop, checkpoints, evaluation and prediction.

mod checkpoint;
mod config;
mod data;
mod eval;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, EpochMetrics, NamedTensor, CHECKPOINT_MAGIC};
pub use config::TrainConfig;
pub use data::{epoch_batches, log_spectrogram, sequential_batches, Dataset, Example};
pub use eval::{
    attention_csv, clamp_to_range, evaluate, mean_frame_score, predict_batch, predict_waveform, Evaluation,
    HeadPrediction, PredictionRow, TaskScore,
};
pub use optim::{global_norm, Adam, EarlyStopping, PlateauScheduler, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{mean_loss, metrics_csv, overfit, resume, train, EpochEvent, TrainOutcome};

use thiserror::Error;

use crate::datagen::DatagenError;
use crate::dsp::DspError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, step {step}: non-finite value {value}")]
    Divergence { epoch: usize, step: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
