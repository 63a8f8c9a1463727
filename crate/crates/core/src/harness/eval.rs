use std::path::Path;

use serde::Serialize;

use super::HarnessError;
use crate::media_io::{ClipManifest, FrameClip, Split};
use crate::model::{Model, ModelConfig};
use crate::numerics::{load_checkpoint, ParamStore, Real, Tensor};

/// Area under the ROC curve via the rank-sum statistic, tied scores
/// sharing their average rank. Label 1 is the positive class.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, HarnessError> {
    if scores.len() != labels.len() {
        return Err(HarnessError::BadConfig(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(HarnessError::BadConfig("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(HarnessError::DegenerateLabels { label: labels.first().copied().unwrap_or(0) });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank, to stay in integers.
    let mut pos_rank2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64;
        pos_rank2 += rank2 * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        i = j + 1;
    }
    let u2 = pos_rank2 - (pos * (pos + 1)) as u64;
    Ok(u2 as f64 / 2.0 / (pos * neg) as f64)
}

/// `count` evenly spaced window starts for `len`-frame windows of a
/// `total`-frame clip, from the first frame to the last full window.
pub fn window_starts(total: usize, len: usize, count: usize) -> Vec<usize> {
    if total < len || count == 0 {
        return Vec::new();
    }
    let span = total - len;
    if count == 1 {
        return vec![0];
    }
    (0..count).map(|i| ((i * span) as f64 / (count - 1) as f64).round() as usize).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub label: u8,
    /// Mean fake probability over the windows.
    pub score: f64,
    pub window_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub clips: Vec<ClipScore>,
    pub auc: f64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[1, 3, T, H, W]` network input from a T-frame clip.
pub(crate) fn clip_input<F: Real>(clip: &FrameClip) -> Tensor<F> {
    let px = clip.pixels();
    let shape: Vec<usize> = std::iter::once(1).chain(px.shape().iter().copied()).collect();
    Tensor::new(shape, px.data().iter().map(|&v| F::lit(v as f64)).collect()).expect("clip shape")
}

/// Fake probability per evenly spaced window and their mean.
pub fn score_clip<F: Real>(model: &Model, store: &ParamStore<F>, clip: &FrameClip, windows: usize) -> Result<(f64, Vec<f64>), HarnessError> {
    let tn = model.config().frames;
    let starts = window_starts(clip.num_frames(), tn, windows);
    if starts.is_empty() {
        return Err(HarnessError::BadConfig(format!("clip {:?} has {} frames, need {tn}", clip.clip_id, clip.num_frames())));
    }
    let mut data = Vec::new();
    for &s in &starts {
        data.extend(clip_input::<F>(&clip.window(s, tn)?).into_data());
    }
    let c = model.config();
    let input = Tensor::new(vec![starts.len(), 3, tn, c.height, c.width], data)?;
    let out = model.infer(store, &input)?;
    let scores: Vec<f64> = out.iter().map(|o| sigmoid(o.y_logit.as_f64())).collect();
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, scores))
}

pub fn evaluate<F: Real>(model: &Model, store: &ParamStore<F>, clips: &[(FrameClip, u8)], windows: usize) -> Result<EvalReport, HarnessError> {
    let mut out = Vec::with_capacity(clips.len());
    for (clip, label) in clips {
        let (score, window_scores) = score_clip(model, store, clip, windows)?;
        out.push(ClipScore { clip_id: clip.clip_id.clone(), label: *label, score, window_scores });
    }
    let scores: Vec<f64> = out.iter().map(|c| c.score).collect();
    let labels: Vec<u8> = out.iter().map(|c| c.label).collect();
    Ok(EvalReport { auc: auc(&scores, &labels)?, clips: out })
}

/// Model and `f32` parameters from a checkpoint written by training.
pub fn load_model(dir: impl AsRef<Path>) -> Result<(Model, ParamStore<f32>), HarnessError> {
    let (store, index) = load_checkpoint::<f32>(dir.as_ref())?;
    let cfg: ModelConfig = serde_json::from_value(index.metadata.get("model").cloned().unwrap_or_default())
        .map_err(|e| HarnessError::BadConfig(format!("checkpoint metadata.model: {e}")))?;
    let model = Model::from_store(cfg, &store)?;
    Ok((model, store))
}

pub fn evaluate_manifest(manifest: &ClipManifest, split: Split, checkpoint: impl AsRef<Path>, windows: usize) -> Result<EvalReport, HarnessError> {
    let (model, store) = load_model(checkpoint)?;
    let clips = manifest
        .split(split)
        .map(|e| Ok((manifest.load_entry(e)?.0, e.label)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    evaluate(&model, &store, &clips, windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_and_tied_scores() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.5, 0.5, 0.9], &[0, 1, 0, 1]).unwrap(), 0.875);
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(HarnessError::DegenerateLabels { label: 1 })));
    }

    #[test]
    fn windows_cover_the_clip_evenly() {
        assert_eq!(window_starts(8, 4, 4), vec![0, 1, 3, 4]);
        assert_eq!(window_starts(4, 4, 4), vec![0, 0, 0, 0]);
        assert_eq!(window_starts(10, 4, 1), vec![0]);
        assert_eq!(window_starts(10, 4, 3), vec![0, 3, 6]);
        assert!(window_starts(3, 4, 2).is_empty());
    }
}
