use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::InterpolationConfig;
use crate::model::{LossWeights, ModelConfig};
use crate::numerics::OptimizerConfig;
use crate::vulnerability::NormMode;

/// Everything a training run depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` means one pass over the train split.
    pub steps_per_epoch: Option<usize>,
    /// Constant for the first quarter of all steps, then linear decay to 0.
    pub lr_start: f64,
    /// Epochs during which only head parameters are updated.
    pub freeze_epochs: usize,
    pub weights: LossWeights,
    /// `optimizer.lr` is ignored; the schedule starts at `lr_start`.
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Chance that a pseudo-fake gets vulnerability-driven cutout.
    pub cutout_probability: f64,
    /// Chance that a sampled real clip is replaced by its pseudo-fake.
    pub fake_probability: f64,
    pub norm_mode: NormMode,
    pub interpolation: InterpolationConfig,
    /// Half-width of the video-level color jitter ranges; 0 disables it.
    pub jitter: f64,
    pub windows_per_video: usize,
    /// Weight on the old running statistic in batch-norm updates.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            epochs: 10,
            batch_size: 8,
            steps_per_epoch: None,
            lr_start: 5e-4,
            freeze_epochs: 1,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            cutout_probability: 0.5,
            fake_probability: 0.5,
            norm_mode: NormMode::Meanstd,
            interpolation: InterpolationConfig::default(),
            jitter: 0.1,
            windows_per_video: 4,
            bn_momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::BadConfig(m));
        self.model.validate()?;
        self.weights.validate()?;
        self.interpolation.validate().map_err(|e| HarnessError::BadConfig(format!("interpolation: {e}")))?;
        self.optimizer.validate().map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2 for batch norm, got {}", self.batch_size));
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be >= 1".into());
        }
        if !(self.lr_start >= 0.0 && self.lr_start.is_finite()) {
            return bad(format!("lr_start must be finite and >= 0, got {}", self.lr_start));
        }
        for (name, v) in [("cutout_probability", self.cutout_probability), ("fake_probability", self.fake_probability)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad(format!("jitter must be in [0, 0.5), got {}", self.jitter));
        }
        if self.windows_per_video == 0 {
            return bad("windows_per_video must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must be in [0, 1), got {}", self.bn_momentum));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
