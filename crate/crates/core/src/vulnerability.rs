//! Ground truths for the three heads: blending boundary, patch
//! vulnerability, cutout, temporal derivative and per-frame soft labels.
//!
//! Targets are kept in `f64`: `4m(1 - m)` evaluated in `f32` rounds to 1
//! for masks one ulp away from 0.5.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media_io::{write_tensor, FrameClip, MediaError, TensorBlob, CHANNELS};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum VulnerabilityError {
    #[error("mask value {value} at index {index} is outside [0, 1]")]
    RangeViolation { index: usize, value: f64 },
    #[error("frame {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleDimensions { height: usize, width: usize, patch: usize },
    #[error("tau_cutout must lie in (0.5, 1.0], got {0}")]
    ThresholdOutOfRange(f64),
    #[error("patch ({row}, {col}) is outside the {rows}x{cols} grid")]
    IndexOutOfGrid { row: usize, col: usize, rows: usize, cols: usize },
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("expected a {expected} tensor, got shape {shape:?}")]
    BadShape { expected: &'static str, shape: Vec<usize> },
    #[error(transparent)]
    Media(#[from] MediaError),
}

fn dims3(t: &Tensor<f64>, expected: &'static str) -> Result<(usize, usize, usize), VulnerabilityError> {
    match t.shape() {
        &[a, b, c] => Ok((a, b, c)),
        s => Err(VulnerabilityError::BadShape { expected, shape: s.to_vec() }),
    }
}

/// `4 M (1 - M)` elementwise for a `[T, H, W]` mask.
pub fn boundary(masks: &Tensor<f32>) -> Result<Tensor<f64>, VulnerabilityError> {
    if masks.ndim() != 3 {
        return Err(VulnerabilityError::BadShape { expected: "[T, H, W] mask", shape: masks.shape().to_vec() });
    }
    if let Some((index, &v)) = masks.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(VulnerabilityError::RangeViolation { index, value: v as f64 });
    }
    Ok(masks.cast::<f64>().map(|m| 4.0 * m * (1.0 - m)))
}

/// Non-overlapping `patch x patch` max per frame: `[T, H, W] -> [T, H/P, W/P]`.
pub fn pool_patches(b: &Tensor<f64>, patch: usize) -> Result<Tensor<f64>, VulnerabilityError> {
    let (tn, h, w) = dims3(b, "[T, H, W] boundary")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(VulnerabilityError::IndivisibleDimensions { height: h, width: w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = b.data();
    let mut out = vec![f64::NEG_INFINITY; tn * gh * gw];
    for t in 0..tn {
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(t * gh + y / patch) * gw + x / patch];
                *o = o.max(src[(t * h + y) * w + x]);
            }
        }
    }
    Ok(Tensor::new(vec![tn, gh, gw], out).expect("pooled shape"))
}

/// Patches masked in every frame of a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoutSet {
    pub patches: BTreeSet<(usize, usize)>,
    pub tau_cutout: f64,
}

impl CutoutSet {
    pub fn empty(tau_cutout: f64) -> Self {
        Self { patches: BTreeSet::new(), tau_cutout }
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Uniform draw from `(0.5, 1.0]`.
pub fn sample_tau_cutout<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - 0.5 * rng.random::<f64>()
}

pub fn check_tau_cutout(tau: f64) -> Result<(), VulnerabilityError> {
    if tau > 0.5 && tau <= 1.0 {
        Ok(())
    } else {
        Err(VulnerabilityError::ThresholdOutOfRange(tau))
    }
}

/// `{(l, m) | B_bar[t0, l, m] > tau}` with a strict comparison.
pub fn select_cutout(b_bar: &Tensor<f64>, tau_cutout: f64, t0: usize) -> Result<CutoutSet, VulnerabilityError> {
    check_tau_cutout(tau_cutout)?;
    let (tn, gh, gw) = dims3(b_bar, "[T, rows, cols] patch map")?;
    if t0 >= tn {
        return Err(VulnerabilityError::BadShape { expected: "frame index within T", shape: b_bar.shape().to_vec() });
    }
    let frame = &b_bar.data()[t0 * gh * gw..(t0 + 1) * gh * gw];
    let patches = (0..gh * gw).filter(|&i| frame[i] > tau_cutout).map(|i| (i / gw, i % gw)).collect();
    Ok(CutoutSet { patches, tau_cutout })
}

/// Zeroes the selected pixel patches in every frame and the same entries of
/// the patch map in every frame.
pub fn apply_cutout(clip: &FrameClip, b_bar: &Tensor<f64>, set: &CutoutSet) -> Result<(FrameClip, Tensor<f64>), VulnerabilityError> {
    let (tn, gh, gw) = dims3(b_bar, "[T, rows, cols] patch map")?;
    let (h, w) = (clip.height(), clip.width());
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 || h / gh != w / gw || tn != clip.num_frames() {
        return Err(VulnerabilityError::BadShape { expected: "patch map matching the clip", shape: b_bar.shape().to_vec() });
    }
    let patch = h / gh;
    for &(row, col) in &set.patches {
        if row >= gh || col >= gw {
            return Err(VulnerabilityError::IndexOutOfGrid { row, col, rows: gh, cols: gw });
        }
    }
    let mut pixels = clip.pixels().clone();
    let mut b_tilde = b_bar.clone();
    let px = pixels.data_mut();
    let bt = b_tilde.data_mut();
    for &(row, col) in &set.patches {
        for t in 0..tn {
            bt[(t * gh + row) * gw + col] = 0.0;
            for c in 0..CHANNELS {
                for y in row * patch..(row + 1) * patch {
                    let base = ((c * tn + t) * h + y) * w;
                    px[base + col * patch..base + (col + 1) * patch].fill(0.0);
                }
            }
        }
    }
    let masked = FrameClip::new(pixels, clip.clip_id.clone(), clip.fps)?;
    Ok((masked, b_tilde))
}

/// `D[0] = 0`, `D[t] = |B_tilde[t] - B_tilde[t-1]|`.
pub fn derivative(b_tilde: &Tensor<f64>) -> Result<Tensor<f64>, VulnerabilityError> {
    let (tn, gh, gw) = dims3(b_tilde, "[T, rows, cols] patch map")?;
    if tn < 2 {
        return Err(VulnerabilityError::TooFewFrames(tn));
    }
    let g = gh * gw;
    let src = b_tilde.data();
    let mut out = vec![0.0; tn * g];
    for t in 1..tn {
        for i in 0..g {
            out[t * g + i] = (src[t * g + i] - src[(t - 1) * g + i]).abs();
        }
    }
    Ok(Tensor::new(vec![tn, gh, gw], out).expect("derivative shape"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    Meanstd,
    Minmax,
    Gauss3d,
}

impl std::str::FromStr for NormMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "meanstd" => Ok(NormMode::Meanstd),
            "minmax" => Ok(NormMode::Minmax),
            "gauss3d" => Ok(NormMode::Gauss3d),
            other => Err(format!("unknown norm mode {other:?} (expected meanstd, minmax or gauss3d)")),
        }
    }
}

/// Unnormalized Gaussian over the index grid, per-axis sigma = extent / 4,
/// centered on the grid.
pub fn gaussian_3d_weights(shape: &[usize]) -> Tensor<f64> {
    let axes: Vec<Vec<f64>> = shape
        .iter()
        .map(|&n| {
            let (c, s) = ((n as f64 - 1.0) / 2.0, n as f64 / 4.0);
            (0..n).map(|i| (-0.5 * ((i as f64 - c) / s).powi(2)).exp()).collect()
        })
        .collect();
    let strides: Vec<usize> = (0..shape.len()).map(|k| shape[k + 1..].iter().product()).collect();
    Tensor::from_fn(shape, |flat| {
        (0..shape.len()).map(|k| axes[k][(flat / strides[k]) % shape[k]]).product()
    })
}

/// Per-clip normalization; degenerate spreads map to zeros.
pub fn normalize(d: &Tensor<f64>, mode: NormMode) -> Tensor<f64> {
    let n = d.numel().max(1) as f64;
    match mode {
        NormMode::Meanstd => {
            if d.max_value() == d.min_value() {
                return Tensor::zeros(d.shape());
            }
            let mean = d.sum() / n;
            let std = (d.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            d.map(|v| (v - mean) / std)
        }
        NormMode::Minmax => {
            let (lo, hi) = (d.min_value(), d.max_value());
            if hi - lo <= 0.0 {
                return Tensor::zeros(d.shape());
            }
            d.map(|v| (v - lo) / (hi - lo))
        }
        NormMode::Gauss3d => {
            let g = gaussian_3d_weights(d.shape());
            Tensor::from_fn(d.shape(), |i| d.data()[i] * g.data()[i])
        }
    }
}

/// Per-frame maximum of `B_tilde`, or zeros for a real clip.
pub fn soft_labels(b_tilde: &Tensor<f64>, is_real: bool) -> Result<Tensor<f64>, VulnerabilityError> {
    let (tn, gh, gw) = dims3(b_tilde, "[T, rows, cols] patch map")?;
    if is_real {
        return Ok(Tensor::zeros(&[tn]));
    }
    let g = gh * gw;
    Ok(Tensor::from_fn(&[tn], |t| b_tilde.data()[t * g..(t + 1) * g].iter().copied().fold(0.0, f64::max)))
}

/// All head targets of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct VulnerabilityBundle {
    pub b: Tensor<f64>,
    pub b_bar: Tensor<f64>,
    pub b_tilde: Tensor<f64>,
    pub cutout: CutoutSet,
    pub d: Tensor<f64>,
    pub d_hat: Tensor<f64>,
    pub p: Tensor<f64>,
    pub norm_mode: NormMode,
    pub patch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    tau_cutout: f64,
    #[serde(rename = "P_set")]
    p_set: Vec<(usize, usize)>,
    norm_mode: NormMode,
    patch_size: usize,
}

impl VulnerabilityBundle {
    /// Targets for a pseudo-fake with blending masks `masks`. With
    /// `tau_cutout = Some(tau)` the frame-0 patches above `tau` are cut out
    /// of `clip`; the returned clip is the (possibly) masked input.
    pub fn for_fake(
        clip: &FrameClip,
        masks: &Tensor<f32>,
        patch: usize,
        tau_cutout: Option<f64>,
        norm_mode: NormMode,
    ) -> Result<(FrameClip, Self), VulnerabilityError> {
        let b = boundary(masks)?;
        let b_bar = pool_patches(&b, patch)?;
        let cutout = match tau_cutout {
            Some(tau) => select_cutout(&b_bar, tau, 0)?,
            None => CutoutSet::empty(1.0),
        };
        let (masked, b_tilde) = apply_cutout(clip, &b_bar, &cutout)?;
        let d = derivative(&b_tilde)?;
        let d_hat = normalize(&d, norm_mode);
        let p = soft_labels(&b_tilde, false)?;
        Ok((masked, Self { b, b_bar, b_tilde, cutout, d, d_hat, p, norm_mode, patch }))
    }

    /// All-zero targets, which is what a real clip's masks produce.
    pub fn for_real(frames: usize, height: usize, width: usize, patch: usize, norm_mode: NormMode) -> Result<Self, VulnerabilityError> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(VulnerabilityError::IndivisibleDimensions { height, width, patch });
        }
        let grid = [frames, height / patch, width / patch];
        let b_bar = Tensor::zeros(&grid);
        let d = Tensor::zeros(&grid);
        Ok(Self {
            b: Tensor::zeros(&[frames, height, width]),
            b_tilde: b_bar.clone(),
            d_hat: normalize(&d, norm_mode),
            b_bar,
            d,
            cutout: CutoutSet::empty(1.0),
            p: Tensor::zeros(&[frames]),
            norm_mode,
            patch,
        })
    }

    /// Writes `B.bin`, `Bbar.bin`, `Btilde.bin`, `D.bin`, `Dhat.bin`, `p.bin`
    /// and `vulnerability.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), VulnerabilityError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| MediaError::Io { path: dir.to_path_buf(), source: e })?;
        for (name, t) in [
            ("B.bin", &self.b),
            ("Bbar.bin", &self.b_bar),
            ("Btilde.bin", &self.b_tilde),
            ("D.bin", &self.d),
            ("Dhat.bin", &self.d_hat),
            ("p.bin", &self.p),
        ] {
            write_tensor(&TensorBlob::from_tensor(t)?, dir.join(name))?;
        }
        let side = Sidecar {
            tau_cutout: self.cutout.tau_cutout,
            p_set: self.cutout.patches.iter().copied().collect(),
            norm_mode: self.norm_mode,
            patch_size: self.patch,
        };
        let path = dir.join("vulnerability.json");
        fs::write(&path, serde_json::to_string_pretty(&side).expect("sidecar serializes"))
            .map_err(|e| MediaError::Io { path, source: e })?;
        Ok(())
    }
}
