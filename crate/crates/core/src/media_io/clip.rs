use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MediaError;
use crate::geometry::{LandmarkFrame, Point};
use crate::numerics::Tensor;

pub const CHANNELS: usize = 3;

/// A `[3, T, H, W]` clip with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pixels: Tensor<f32>,
    pub clip_id: String,
    pub fps: Option<f64>,
}

impl FrameClip {
    pub fn new(pixels: Tensor<f32>, clip_id: impl Into<String>, fps: Option<f64>) -> Result<Self, MediaError> {
        let s = pixels.shape();
        if s.len() != 4 || s[0] != CHANNELS {
            return Err(MediaError::InvalidClip(format!("expected [3, T, H, W] pixels, got {s:?}")));
        }
        if s[1] < 2 {
            return Err(MediaError::InvalidClip(format!("need at least 2 frames, got {}", s[1])));
        }
        if s[2] == 0 || s[3] == 0 {
            return Err(MediaError::InvalidClip(format!("empty frame size {}x{}", s[3], s[2])));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MediaError::InvalidClip(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(f) = fps {
            if !(f > 0.0 && f.is_finite()) {
                return Err(MediaError::InvalidClip(format!("fps must be positive, got {f}")));
            }
        }
        Ok(Self { pixels, clip_id: clip_id.into(), fps })
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<f32> {
        self.pixels
    }

    pub fn num_frames(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn check_patch_size(&self, patch: usize) -> Result<(), MediaError> {
        if patch == 0 || self.height() % patch != 0 || self.width() % patch != 0 {
            return Err(MediaError::InvalidDimensions(format!(
                "frame {}x{} is not divisible by patch size {patch}",
                self.width(),
                self.height()
            )));
        }
        Ok(())
    }

    /// Frame `t` as a `[3, H, W]` tensor.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        let (tn, h, w) = (self.num_frames(), self.height(), self.width());
        let hw = h * w;
        let d = self.pixels.data();
        let mut out = Vec::with_capacity(CHANNELS * hw);
        for c in 0..CHANNELS {
            let base = (c * tn + t) * hw;
            out.extend_from_slice(&d[base..base + hw]);
        }
        Tensor::new(vec![CHANNELS, h, w], out).expect("frame shape")
    }

    /// Stacks `[3, H, W]` frames into a clip.
    pub fn from_frames(frames: &[Tensor<f32>], clip_id: impl Into<String>, fps: Option<f64>) -> Result<Self, MediaError> {
        let first = frames.first().ok_or_else(|| MediaError::InvalidClip("no frames".into()))?;
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let hw = h * w;
        let tn = frames.len();
        let mut data = vec![0f32; CHANNELS * tn * hw];
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != [CHANNELS, h, w] {
                return Err(MediaError::InvalidClip(format!("frame {t} has shape {:?}", f.shape())));
            }
            for c in 0..CHANNELS {
                let dst = (c * tn + t) * hw;
                data[dst..dst + hw].copy_from_slice(&f.data()[c * hw..(c + 1) * hw]);
            }
        }
        Self::new(Tensor::new(vec![CHANNELS, tn, h, w], data).expect("clip shape"), clip_id, fps)
    }

    /// `len` consecutive frames starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self, MediaError> {
        if len < 2 || start + len > self.num_frames() {
            return Err(MediaError::InvalidDimensions(format!(
                "window [{start}, {}) does not fit {} frames",
                start + len,
                self.num_frames()
            )));
        }
        let frames: Vec<_> = (start..start + len).map(|t| self.frame(t)).collect();
        Self::from_frames(&frames, self.clip_id.clone(), self.fps)
    }
}

/// Per-frame landmark positions in pixels, `n >= 3` points per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTrack {
    frames: Vec<LandmarkFrame>,
}

impl LandmarkTrack {
    pub fn new(frames: Vec<LandmarkFrame>, height: usize, width: usize) -> Result<Self, MediaError> {
        let n = frames.first().map_or(0, |f| f.len());
        if n < 3 {
            return Err(MediaError::LandmarkMismatch(format!("need at least 3 landmarks per frame, got {n}")));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.len() != n {
                return Err(MediaError::LandmarkMismatch(format!("frame {t} has {} landmarks, frame 0 has {n}", f.len())));
            }
            for (i, p) in f.iter().enumerate() {
                let inside = p.x >= 0.0 && p.x < width as f64 && p.y >= 0.0 && p.y < height as f64;
                if !inside {
                    return Err(MediaError::OutOfRangeCoordinate { frame: t, index: i, x: p.x, y: p.y, width, height });
                }
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[LandmarkFrame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[Point] {
        &self.frames[t]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_points(&self) -> usize {
        self.frames[0].len()
    }

    /// `[T, n, 2]` with `(x, y)` in the last axis.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let data = self.frames.iter().flatten().flat_map(|p| [p.x, p.y]).collect();
        Tensor::new(vec![self.num_frames(), self.num_points(), 2], data).expect("track shape")
    }

    pub fn window(&self, start: usize, len: usize) -> Result<Self, MediaError> {
        if start + len > self.frames.len() || len == 0 {
            return Err(MediaError::InvalidDimensions(format!(
                "window [{start}, {}) does not fit {} frames",
                start + len,
                self.frames.len()
            )));
        }
        Ok(Self { frames: self.frames[start..start + len].to_vec() })
    }
}

fn frame_file_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

fn frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    if digits.len() < 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn load_frame(path: &Path) -> Result<(usize, usize, Vec<u8>), MediaError> {
    let img = image::open(path)
        .map_err(|e| MediaError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

fn read_frames(dir: &Path, clip_id: &str) -> Result<FrameClip, MediaError> {
    let listing = fs::read_dir(dir).map_err(|e| MediaError::io(dir, e))?;
    let mut indices = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| MediaError::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(frame_index) {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    if let Some(gap) = (0..=indices.len()).find(|&i| indices.get(i) != Some(&i)) {
        if gap < indices.len() || indices.is_empty() {
            return Err(MediaError::MissingFrame { dir: dir.to_path_buf(), index: gap });
        }
    }
    let tn = indices.len();
    let mut frames = Vec::with_capacity(tn);
    let mut size = None;
    for t in 0..tn {
        let path = dir.join(frame_file_name(t));
        let (h, w, rgb) = load_frame(&path)?;
        if *size.get_or_insert((h, w)) != (h, w) {
            return Err(MediaError::InvalidClip(format!("{} is {w}x{h}, earlier frames differ", path.display())));
        }
        let hw = h * w;
        let mut planar = vec![0f32; CHANNELS * hw];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..CHANNELS {
                planar[c * hw + i] = px[c] as f32 / 255.0;
            }
        }
        frames.push(Tensor::new(vec![CHANNELS, h, w], planar).expect("frame shape"));
    }
    FrameClip::from_frames(&frames, clip_id, None)
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    frame: usize,
    index: usize,
    x: f64,
    y: f64,
}

/// Reads a `frame,index,x,y` CSV into per-frame landmark lists, checked
/// against `frames` frames of size `height x width`.
pub fn read_landmarks(path: impl AsRef<Path>, frames: usize, height: usize, width: usize) -> Result<LandmarkTrack, MediaError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| MediaError::Csv(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| MediaError::Csv(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["frame", "index", "x", "y"] {
        return Err(MediaError::Csv(format!("expected header frame,index,x,y, got {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut by_frame: BTreeMap<usize, BTreeMap<usize, Point>> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: LandmarkRow = row.map_err(|e| MediaError::Csv(e.to_string()))?;
        if by_frame.entry(row.frame).or_default().insert(row.index, Point::new(row.x, row.y)).is_some() {
            return Err(MediaError::LandmarkMismatch(format!("duplicate landmark {} in frame {}", row.index, row.frame)));
        }
    }
    let covered = by_frame.len() == frames && by_frame.keys().copied().eq(0..frames);
    if !covered {
        return Err(MediaError::LandmarkMismatch(format!(
            "landmark file covers frames {:?}, clip has {frames}",
            by_frame.keys().collect::<Vec<_>>()
        )));
    }
    let mut track = Vec::with_capacity(frames);
    for (t, points) in by_frame {
        if !points.keys().copied().eq(0..points.len()) {
            return Err(MediaError::LandmarkMismatch(format!("frame {t} landmark indices are not contiguous from 0")));
        }
        track.push(points.into_values().collect());
    }
    LandmarkTrack::new(track, height, width)
}

pub fn write_landmarks(track: &LandmarkTrack, path: impl AsRef<Path>) -> Result<(), MediaError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| MediaError::Csv(format!("{}: {e}", path.display())))?;
    for (t, f) in track.frames().iter().enumerate() {
        for (i, p) in f.iter().enumerate() {
            w.serialize(LandmarkRow { frame: t, index: i, x: p.x, y: p.y }).map_err(|e| MediaError::Csv(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| MediaError::io(path, e))
}

/// Frames only, for inference on clips without landmarks.
pub fn load_frames(frames_path: impl AsRef<Path>) -> Result<FrameClip, MediaError> {
    let dir = frames_path.as_ref();
    read_frames(dir, dir.file_name().and_then(|s| s.to_str()).unwrap_or("clip"))
}

/// Loads `frame_00000.png ...` from `frames_path` and the landmark CSV.
/// The clip id is the directory name.
pub fn load_clip(frames_path: impl AsRef<Path>, landmarks_path: impl AsRef<Path>) -> Result<(FrameClip, LandmarkTrack), MediaError> {
    let dir = frames_path.as_ref();
    let clip_id = dir.file_name().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
    let clip = read_frames(dir, &clip_id)?;
    let track = read_landmarks(landmarks_path, clip.num_frames(), clip.height(), clip.width())?;
    Ok((clip, track))
}

/// Writes frames as 8-bit PNGs (values rounded to the nearest `k / 255`)
/// and, when given, the landmark CSV.
pub fn save_clip(clip: &FrameClip, track: Option<&LandmarkTrack>, frames_path: impl AsRef<Path>, landmarks_path: Option<&Path>) -> Result<(), MediaError> {
    let dir = frames_path.as_ref();
    fs::create_dir_all(dir).map_err(|e| MediaError::io(dir, e))?;
    let (h, w) = (clip.height(), clip.width());
    let hw = h * w;
    for t in 0..clip.num_frames() {
        let f = clip.frame(t);
        let mut rgb = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..CHANNELS {
                rgb[3 * i + c] = (f.data()[c * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        let path = dir.join(frame_file_name(t));
        image::RgbImage::from_raw(w as u32, h as u32, rgb)
            .expect("buffer matches frame size")
            .save(&path)
            .map_err(|e| MediaError::Image { path: path.clone(), message: e.to_string() })?;
    }
    if let (Some(track), Some(path)) = (track, landmarks_path) {
        write_landmarks(track, path)?;
    }
    Ok(())
}
