//! Training harness: configuration, optimizer, schedule, loop, checkpoints,
//! and metrics.

mod checkpoint;
mod config;
mod metrics;
mod optimizer;
mod schedule;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{FileConfig, Objectives, TrainConfig};
pub use metrics::{read_metrics, timings_path, DiagRecord, MetricsRecord, MetricsWriter};
pub use optimizer::{adamw_step, clip_global_norm, decays, AdamState};
pub use schedule::lr_at;
pub use trainer::{
    compute_losses, dataset_for, draw_step_randomness, run, train_step, RunSummary, StepDraws,
    TrainState,
};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("numeric abort: {msg}{}", last_checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    NumericAbort {
        msg: String,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint corruption: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(crate::model::ModelError::Tensor(e))
    }
}

impl TrainError {
    /// Process exit code: 2 for configuration problems, 3 for numeric
    /// aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) => 2,
            TrainError::Data(crate::data::DataError::Config(_)) => 2,
            TrainError::Model(crate::model::ModelError::Config(_)) => 2,
            TrainError::Numeric(_) | TrainError::NumericAbort { .. } => 3,
            _ => 1,
        }
    }
}
