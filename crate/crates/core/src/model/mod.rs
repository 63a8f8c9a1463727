//! Divided space-time transformer with a temporal regression head, a
//! per-frame soft-label head and a clip classifier.

mod layers;
mod losses;
mod network;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

pub use layers::{linear, multi_head_attention, AttentionRecord};
pub use losses::{losses, LossValues, LossVars, LossWeights, Targets};
pub use network::{patchify, BlockIds, ForwardMode, ForwardOutput, ForwardTrace, GridLayout, HeadOutputs, Model};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameter {0:?} missing from store")]
    MissingParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `dim`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Channels between the two temporal-head conv blocks; `None` means
    /// `max(dim / 4, 8)`.
    #[serde(default)]
    pub head_mid: Option<usize>,
}

fn default_mlp_ratio() -> usize {
    4
}

pub const CHANNELS: usize = crate::media_io::CHANNELS;

impl ModelConfig {
    /// The smallest configuration used for gradient verification.
    pub fn tiny() -> Self {
        Self { frames: 2, height: 16, width: 16, patch: 8, dim: 16, depth: 1, heads: 2, mlp_ratio: 2, head_mid: None }
    }

    /// Default desk-scale configuration.
    pub fn desk() -> Self {
        Self { frames: 4, height: 32, width: 32, patch: 8, dim: 32, depth: 2, heads: 2, mlp_ratio: 2, head_mid: None }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.frames < 2 {
            return bad(format!("frames must be >= 2, got {}", self.frames));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("{}x{} is not divisible by patch {}", self.width, self.height, self.patch));
        }
        if self.height != self.width {
            return bad(format!("the patch grid must be square, got {}x{}", self.width, self.height));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.dim < 2 {
            return bad("dim must be at least 2".into());
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        if self.head_mid == Some(0) {
            return bad("head_mid must be >= 1".into());
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.height / self.patch
    }

    /// Patches per frame.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    pub fn head_mid_channels(&self) -> usize {
        self.head_mid.unwrap_or((self.dim / 4).max(8))
    }

    pub fn head_hidden(&self) -> usize {
        (self.dim / 2).max(1)
    }

    /// Score entries one block builds per clip: `N (T+1)^2 + T (N+1)^2`.
    pub fn attention_entries_per_block(&self) -> usize {
        let (t, n) = (self.frames, self.num_patches());
        n * (t + 1) * (t + 1) + t * (n + 1) * (n + 1)
    }
}
