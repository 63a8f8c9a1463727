use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::eval::{clip_input, sigmoid};
use super::HarnessError;
use crate::media_io::{FrameClip, SeedPolicy};
use crate::model::Model;
use crate::numerics::{ParamStore, Real, Tensor};
use crate::vulnerability::{apply_cutout, normalize, sample_tau_cutout, select_cutout, CutoutSet, NormMode};

/// Iterated inference where each shot cuts out the patches the previous
/// shot's temporal head marked most vulnerable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotPlan {
    pub num_shots: usize,
    /// Frame of the temporal-head map that selects the next cutout; the
    /// default 1 is the second frame, the first with a nonzero derivative.
    pub frame: usize,
}

impl ShotPlan {
    pub fn new(num_shots: usize) -> Self {
        Self { num_shots, frame: 1 }
    }

    pub fn validate(&self, frames: usize) -> Result<(), HarnessError> {
        if self.num_shots == 0 {
            return Err(HarnessError::BadConfig("shots must be >= 1".into()));
        }
        if self.frame >= frames {
            return Err(HarnessError::BadConfig(format!("shot frame {} out of range for {frames} frames", self.frame)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShotRecord {
    pub shot: usize,
    pub probability: f64,
    pub y_logit: f64,
    /// Threshold that produced this shot's input; `None` on the first shot.
    pub tau_cutout: Option<f64>,
    /// Patches zeroed in this shot's input, accumulated over earlier shots.
    pub masked: Vec<(usize, usize)>,
    /// Temporal-head map of the selection frame, min-max rescaled.
    pub selection_map: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiShotResult {
    pub clip_id: String,
    pub shots: Vec<ShotRecord>,
    /// Mean of the shot probabilities.
    pub probability: f64,
}

/// Runs `plan.num_shots` forward passes on a T-frame clip. Thresholds come
/// from the clip's `multishot` seed stream, one per shot after the first.
pub fn multi_shot_infer<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    clip: &FrameClip,
    plan: &ShotPlan,
    seeds: &SeedPolicy,
) -> Result<MultiShotResult, HarnessError> {
    let cfg = model.config();
    plan.validate(cfg.frames)?;
    if clip.num_frames() != cfg.frames {
        return Err(HarnessError::BadConfig(format!("clip has {} frames, model takes {}", clip.num_frames(), cfg.frames)));
    }
    let gs = cfg.grid();
    let mut rng = seeds.rng(&clip.clip_id, "multishot");
    let zeros = Tensor::zeros(&[cfg.frames, gs, gs]);
    let mut masked: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut input = clip.clone();
    let mut tau = None;
    let mut shots = Vec::with_capacity(plan.num_shots);
    for shot in 0..plan.num_shots {
        let out = model.infer(store, &clip_input::<F>(&input))?.remove(0);
        let y = out.y_logit.as_f64();
        let map: Vec<f64> = out.d_tilde.data()[plan.frame * gs * gs..(plan.frame + 1) * gs * gs].iter().map(|v| v.as_f64()).collect();
        let map = normalize(&Tensor::new(vec![1, gs, gs], map)?, NormMode::Minmax);
        shots.push(ShotRecord {
            shot,
            probability: sigmoid(y),
            y_logit: y,
            tau_cutout: tau,
            masked: masked.iter().copied().collect(),
            selection_map: map.data().to_vec(),
        });
        if shot + 1 == plan.num_shots {
            break;
        }
        let t = sample_tau_cutout(&mut rng);
        masked.extend(select_cutout(&map, t, 0)?.patches);
        let set = CutoutSet { patches: masked.clone(), tau_cutout: t };
        input = apply_cutout(clip, &zeros, &set)?.0;
        tau = Some(t);
    }
    let probability = shots.iter().map(|s| s.probability).sum::<f64>() / shots.len() as f64;
    Ok(MultiShotResult { clip_id: clip.clip_id.clone(), shots, probability })
}
