//! Dense tensors, reverse-mode differentiation, optimizers and gradient
//! verification.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_index, save_checkpoint, CheckpointError, CheckpointIndex, CheckpointItem, INDEX_FILE};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, WorstCoordinate};
pub use graph::{BatchNormMode, BatchStats, Conv3dSpec, Gradients, Graph, PadMode, Var, BATCH_NORM_EPS, LAYER_NORM_EPS};
pub use optim::{Evaluation, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Bound, ParamEntry, ParamGroup, ParamId, ParamKind, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value detected in {op} ({phase})")]
    NonFiniteDetected { op: &'static str, phase: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
}
