//! Self-blended pseudo-fake videos: blend a transformed copy of each frame
//! into itself with one parameter set shared by all frames and temporally
//! smoothed landmarks.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{deform_mask, interpolate_frame, rasterize_hull, GeometryError, HullMaskParams, HullMode, InterpolationConfig, LandmarkFrame};
use crate::media_io::{save_clip, write_tensor, FrameClip, LandmarkTrack, MediaError, TensorBlob, CHANNELS};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error("invalid blend parameters: {0}")]
    InvalidParams(String),
    #[error("clip and landmarks disagree: {0}")]
    Misaligned(String),
}

/// Photometric and geometric change applied to the source copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTransform {
    pub brightness: f64,
    /// Gain around mid-gray 0.5.
    pub contrast: f64,
    pub rgb_shift: [f64; 3],
    /// Fractions of (W, H).
    pub translation: (f64, f64),
}

impl SourceTransform {
    pub const IDENTITY: SourceTransform = SourceTransform { brightness: 0.0, contrast: 1.0, rgb_shift: [0.0; 3], translation: (0.0, 0.0) };

    pub fn validate(&self) -> Result<(), SynthesisError> {
        let within = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo && v <= hi;
        let ok = within(self.brightness, -0.2, 0.2)
            && within(self.contrast, 0.8, 1.2)
            && self.rgb_shift.iter().all(|&s| within(s, -0.1, 0.1))
            && within(self.translation.0, -0.03, 0.03)
            && within(self.translation.1, -0.03, 0.03);
        if ok {
            Ok(())
        } else {
            Err(SynthesisError::InvalidParams(format!("source transform out of range: {self:?}")))
        }
    }
}

/// The blending parameter set, fixed for every frame of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendParams {
    pub hull: HullMaskParams,
    pub blend_ratio: f64,
    pub source_transform: SourceTransform,
    /// Seeds the mask deformation field.
    pub seed: u64,
}

impl BlendParams {
    pub const DEFORM_KERNELS: [usize; 3] = [1, 3, 5];

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hull = HullMaskParams {
            hull_mode: HullMode::ALL[rng.random_range(0..HullMode::ALL.len())],
            deform_kernel: Self::DEFORM_KERNELS[rng.random_range(0..Self::DEFORM_KERNELS.len())],
            blur_sigma: rng.random_range(0.5..=2.0),
        };
        let blend_ratio = rng.random_range(0.25..=1.0);
        let source_transform = SourceTransform {
            brightness: rng.random_range(-0.2..=0.2),
            contrast: rng.random_range(0.8..=1.2),
            rgb_shift: [rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1)],
            translation: (rng.random_range(-0.03..=0.03), rng.random_range(-0.03..=0.03)),
        };
        Self { hull, blend_ratio, source_transform, seed: rng.random() }
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        self.hull.validate()?;
        if !(self.blend_ratio > 0.0 && self.blend_ratio <= 1.0) {
            return Err(SynthesisError::InvalidParams(format!("blend_ratio {} not in (0, 1]", self.blend_ratio)));
        }
        self.source_transform.validate()
    }
}

fn check_frame(frame: &Tensor<f32>) -> Result<(usize, usize), SynthesisError> {
    match frame.shape() {
        &[CHANNELS, h, w] => Ok((h, w)),
        s => Err(SynthesisError::Misaligned(format!("expected a [3, H, W] frame, got {s:?}"))),
    }
}

/// Contrast, brightness and per-channel shift (clamped to `[0, 1]`), then a
/// bilinear translation with clamp-to-edge sampling.
pub fn apply_source_transform(frame: &Tensor<f32>, st: &SourceTransform) -> Tensor<f32> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let hw = h * w;
    let src = frame.data();
    let mut color = vec![0f32; src.len()];
    for c in 0..CHANNELS {
        for i in 0..hw {
            let v = src[c * hw + i] as f64;
            let v = (v - 0.5) * st.contrast + 0.5 + st.brightness + st.rgb_shift[c];
            color[c * hw + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let (dx, dy) = (st.translation.0 * w as f64, st.translation.1 * h as f64);
    if dx == 0.0 && dy == 0.0 {
        return Tensor::new(vec![CHANNELS, h, w], color).expect("frame shape");
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        let sy = (y as f64 - dy).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, (sy - sy.floor()) as f32);
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..w {
            let sx = (x as f64 - dx).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, (sx - sx.floor()) as f32);
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..CHANNELS {
                let p = &color[c * hw..(c + 1) * hw];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[c * hw + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![CHANNELS, h, w], out).expect("frame shape")
}

/// `source * M + frame * (1 - M)` for a `[3, H, W]` frame and `[H, W]` mask.
pub fn blend(frame: &Tensor<f32>, source: &Tensor<f32>, mask: &Tensor<f32>) -> Tensor<f32> {
    let hw = mask.numel();
    Tensor::from_fn(frame.shape(), |i| {
        let m = mask.data()[i % hw];
        (source.data()[i] * m + frame.data()[i] * (1.0 - m)).clamp(0.0, 1.0)
    })
}

#[derive(Debug, Clone)]
pub struct SbiOutput {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub params: BlendParams,
}

/// Blends one frame with itself. Fresh parameters are sampled from `seed`
/// unless `params` is given.
pub fn sbi_frame(frame: &Tensor<f32>, landmarks: &[crate::geometry::Point], params: Option<&BlendParams>, seed: u64) -> Result<SbiOutput, SynthesisError> {
    let (h, w) = check_frame(frame)?;
    let params = match params {
        Some(p) => *p,
        None => BlendParams::sample(seed),
    };
    params.validate()?;
    let source = apply_source_transform(frame, &params.source_transform);
    let raw = rasterize_hull(landmarks, h, w, &params.hull)?;
    let ratio = params.blend_ratio as f32;
    let mask = deform_mask(&raw, &params.hull, params.seed).map(|m| m * ratio);
    let image = blend(frame, &source, &mask);
    Ok(SbiOutput { image, mask, params })
}

#[derive(Debug, Clone)]
pub struct PseudoFakeClip {
    pub clip: FrameClip,
    /// `[T, H, W]` blending masks.
    pub masks: Tensor<f32>,
    pub params: BlendParams,
    pub source_clip_id: String,
    /// Landmarks actually used per frame, after interpolation.
    pub landmarks: Vec<LandmarkFrame>,
    /// Parameters handed to the per-frame blend, one per frame.
    pub audit: Vec<BlendParams>,
}

impl PseudoFakeClip {
    pub fn mask(&self, t: usize) -> Tensor<f32> {
        let (h, w) = (self.masks.shape()[1], self.masks.shape()[2]);
        let hw = h * w;
        Tensor::new(vec![h, w], self.masks.data()[t * hw..(t + 1) * hw].to_vec()).expect("mask shape")
    }

    /// Frames directory, `mask.bin` and `params.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SynthesisError> {
        let dir = dir.as_ref();
        save_clip(&self.clip, None, dir.join("frames"), None)?;
        write_tensor(&TensorBlob::from_tensor(&self.masks)?, dir.join("mask.bin"))?;
        let sidecar = serde_json::json!({
            "source_clip_id": self.source_clip_id,
            "params": self.params,
        });
        let path = dir.join("params.json");
        fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("params serialize"))
            .map_err(|e| MediaError::Io { path, source: e })?;
        Ok(())
    }
}

/// Landmark smoothing and fixed parameters; `interpolation = None` turns the
/// smoothing off.
pub fn generate_sbv_with(
    clip: &FrameClip,
    track: &LandmarkTrack,
    interpolation: Option<&InterpolationConfig>,
    seed: u64,
) -> Result<PseudoFakeClip, SynthesisError> {
    let tn = clip.num_frames();
    if track.num_frames() != tn {
        return Err(SynthesisError::Misaligned(format!("{tn} frames but {} landmark frames", track.num_frames())));
    }
    if let Some(cfg) = interpolation {
        cfg.validate()?;
    }
    let (h, w) = (clip.height(), clip.width());
    let mut frames = Vec::with_capacity(tn);
    let mut masks = Vec::with_capacity(tn * h * w);
    let mut landmarks: Vec<LandmarkFrame> = Vec::with_capacity(tn);
    let mut audit = Vec::with_capacity(tn);
    let mut theta: Option<BlendParams> = None;
    for t in 0..tn {
        let lm = match (interpolation, landmarks.last()) {
            (Some(cfg), Some(prev)) => interpolate_frame(prev, track.frame(t), cfg)?,
            _ => track.frame(t).to_vec(),
        };
        let out = sbi_frame(&clip.frame(t), &lm, theta.as_ref(), seed)?;
        theta.get_or_insert(out.params);
        audit.push(out.params);
        frames.push(out.image);
        masks.extend_from_slice(out.mask.data());
        landmarks.push(lm);
    }
    let params = theta.expect("at least two frames");
    Ok(PseudoFakeClip {
        clip: FrameClip::from_frames(&frames, format!("{}_sbv", clip.clip_id), clip.fps)?,
        masks: Tensor::new(vec![tn, h, w], masks).expect("mask shape"),
        params,
        source_clip_id: clip.clip_id.clone(),
        landmarks,
        audit,
    })
}

/// Frame 0 samples the parameters from `seed`; every later frame reuses
/// them on landmarks interpolated against the previous smoothed frame.
pub fn generate_sbv(clip: &FrameClip, track: &LandmarkTrack, cfg: &InterpolationConfig, seed: u64) -> Result<PseudoFakeClip, SynthesisError> {
    generate_sbv_with(clip, track, Some(cfg), seed)
}
