//! Dataset assembly, training, video-level evaluation and multi-shot inference.

mod config;
mod data;
mod dataset;
mod eval;
mod multishot;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::media_io::MediaError;
use crate::model::ModelError;
use crate::numerics::{CheckpointError, NumericsError};
use crate::synthesis::SynthesisError;
use crate::vulnerability::VulnerabilityError;

pub use config::TrainConfig;
pub use data::{build_batch, color_jitter, make_sample, stack_samples, Batch, ColorJitter, Sample, TrainClip};
pub use dataset::{gen_synthetic_dataset, DatasetSpec};
pub use eval::{auc, evaluate, evaluate_manifest, load_model, score_clip, window_starts, ClipScore, EvalReport};
pub use multishot::{multi_shot_infer, MultiShotResult, ShotPlan, ShotRecord};
pub use train::{gradcheck_model, lr_at, train, train_clips, StepLog, TrainOutcome, Trainer};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("AUC needs both classes, only label {label} present")]
    DegenerateLabels { label: u8 },
    #[error("non-finite value at step {step}: {source}")]
    NonFinite { step: usize, source: NumericsError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Vulnerability(#[from] VulnerabilityError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// Errors caused by user input rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::BadConfig(_) | HarnessError::DegenerateLabels { .. } => true,
            HarnessError::Model(ModelError::InvalidConfig(_) | ModelError::ShapeMismatch(_)) => true,
            HarnessError::Media(m) => matches!(
                m,
                MediaError::BadManifest(_) | MediaError::InvalidDimensions(_) | MediaError::LandmarkMismatch(_) | MediaError::OutOfRangeCoordinate { .. }
            ),
            HarnessError::Numerics(NumericsError::InvalidArgument(_)) => true,
            HarnessError::Checkpoint(CheckpointError::BadIndex(_)) => true,
            _ => false,
        }
    }
}

pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.into(), source }
}
