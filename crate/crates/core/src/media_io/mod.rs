//! Frames, landmarks, tensor files, manifests, seeds and synthetic clips.

mod clip;
mod manifest;
mod seed;
mod synthetic;
mod tensor_file;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use clip::{load_clip, load_frames, read_landmarks, save_clip, write_landmarks, FrameClip, LandmarkTrack, CHANNELS};
pub use manifest::{ClipManifest, ManifestEntry, Split};
pub use seed::SeedPolicy;
pub use synthetic::{gen_copy_paste_fake, gen_swap_donor, gen_synthetic_clip, gen_synthetic_scene, Ellipse, SyntheticScene};
pub use tensor_file::{read_tensor, write_tensor, TensorBlob};

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt tensor header: {0}")]
    CorruptHeader(String),
    #[error("tensor payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("tensor payload has trailing bytes: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("tensor shape must be nonempty with positive extents, got {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("missing frame {index} in {dir}")]
    MissingFrame { dir: PathBuf, index: usize },
    #[error("landmark mismatch: {0}")]
    LandmarkMismatch(String),
    #[error("landmark {index} of frame {frame} at ({x}, {y}) is outside the {width}x{height} frame")]
    OutOfRangeCoordinate { frame: usize, index: usize, x: f64, y: f64, width: usize, height: usize },
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("landmark csv error: {0}")]
    Csv(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid manifest: {0}")]
    BadManifest(String),
}

impl MediaError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        MediaError::Io { path: path.to_path_buf(), source }
    }
}
