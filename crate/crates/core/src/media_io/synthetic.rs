//! Procedural "faces": a two-tone textured ellipse with eyes and a mouth
//! drifting smoothly over a low-frequency background. Landmarks trace an
//! inner contour of the face plus an interior ring.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FrameClip, LandmarkTrack, MediaError, CHANNELS};
use crate::geometry::{rasterize_hull, gaussian_blur, HullMaskParams, HullMode, Point};
use crate::numerics::Tensor;

/// Axis-aligned ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn area(&self) -> f64 {
        PI * self.rx * self.ry
    }

    /// `((x - cx) / rx)^2 + ((y - cy) / ry)^2`
    pub fn level(&self, x: f64, y: f64) -> f64 {
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        u * u + v * v
    }

    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub clip: FrameClip,
    pub track: LandmarkTrack,
    /// The rendered face ellipse of each frame.
    pub faces: Vec<Ellipse>,
}

struct Look {
    background: [f64; 3],
    bg_freq: (f64, f64),
    bg_phase: f64,
    skin: [f64; 3],
    skin_alt: [f64; 3],
    tex_freq: f64,
    tex_angle: f64,
    feature: [f64; 3],
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn shade(look: &Look, face: &Ellipse, x: f64, y: f64, c: usize) -> f64 {
    let bg = look.background[c] + 0.06 * (look.bg_freq.0 * x + look.bg_phase).sin() * (look.bg_freq.1 * y).cos();
    let (u, v) = ((x - face.cx) / face.rx, (y - face.cy) / face.ry);
    let s = (u * u + v * v).sqrt();
    // One-pixel antialiased rim.
    let alpha = ((1.0 - s) * face.rx.min(face.ry) + 0.5).clamp(0.0, 1.0);
    if alpha == 0.0 {
        return bg;
    }
    let along = u * look.tex_angle.cos() + v * look.tex_angle.sin();
    let mix = 0.5 + 0.5 * (look.tex_freq * along).sin();
    let mut skin = look.skin[c] * (1.0 - mix) + look.skin_alt[c] * mix;
    let eye = |ex: f64| ((u - ex) / 0.16).powi(2) + ((v + 0.25) / 0.11).powi(2) < 1.0;
    let mouth = (u / 0.38).powi(2) + ((v - 0.45) / 0.09).powi(2) < 1.0;
    if eye(-0.35) || eye(0.35) || mouth {
        skin = look.feature[c];
    }
    alpha * skin + (1.0 - alpha) * bg
}

/// Outer contour radius of the landmarks relative to the face ellipse; the
/// hull stays inside the skin like a brow-to-chin landmark set.
const CONTOUR: f64 = 0.8;

fn landmarks(face: &Ellipse, n: usize, phase: f64) -> Vec<Point> {
    let interior = n / 4;
    let boundary = n - interior;
    let mut pts: Vec<Point> = (0..boundary)
        .map(|k| {
            let a = phase + TAU * k as f64 / boundary as f64;
            Point::new(face.cx + CONTOUR * face.rx * a.cos(), face.cy + CONTOUR * face.ry * a.sin())
        })
        .collect();
    pts.extend((0..interior).map(|k| {
        let a = phase + TAU * (k as f64 + 0.5) / interior as f64;
        Point::new(face.cx + 0.45 * face.rx * a.cos(), face.cy + 0.45 * face.ry * a.sin())
    }));
    pts
}

fn draw_look(rng: &mut ChaCha8Rng) -> Look {
    let background = color(rng, 0.15, 0.65);
    let bg_freq = (rng.random_range(0.05..0.25), rng.random_range(0.05..0.25));
    let bg_phase = rng.random_range(0.0..TAU);
    let skin = color(rng, 0.4, 0.85);
    let skin_alt = skin.map(|c| c + rng.random_range(-0.06..0.06));
    Look {
        background,
        bg_freq,
        bg_phase,
        skin,
        skin_alt,
        tex_freq: rng.random_range(4.0..9.0),
        tex_angle: rng.random_range(0.0..PI),
        feature: color(rng, 0.02, 0.25),
    }
}

/// Like [`gen_synthetic_clip`] and also returns the rendered geometry.
pub fn gen_synthetic_scene(seed: u64, frames: usize, height: usize, width: usize, n: usize) -> Result<SyntheticScene, MediaError> {
    render_scene(seed, None, frames, height, width, n)
}

/// The scene of `seed` (same geometry, motion, landmarks and noise) with the
/// appearance drawn from `look_seed`: a face-swap donor aligned to the target.
pub fn gen_swap_donor(seed: u64, look_seed: u64, frames: usize, height: usize, width: usize, n: usize) -> Result<FrameClip, MediaError> {
    Ok(render_scene(seed, Some(look_seed), frames, height, width, n)?.clip)
}

fn render_scene(seed: u64, look_seed: Option<u64>, frames: usize, height: usize, width: usize, n: usize) -> Result<SyntheticScene, MediaError> {
    if frames < 2 || height < 16 || width < 16 || n < 8 {
        return Err(MediaError::InvalidDimensions(format!(
            "need T >= 2, H, W >= 16 and n >= 8, got T={frames} H={height} W={width} n={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let mut look = draw_look(&mut rng);
    if let Some(ls) = look_seed {
        look = draw_look(&mut ChaCha8Rng::seed_from_u64(ls));
    }
    let cx0 = w / 2.0 + rng.random_range(-0.05..0.05) * w;
    let cy0 = h / 2.0 + rng.random_range(-0.05..0.05) * h;
    let rx0 = rng.random_range(0.24..0.32) * w;
    let ry0 = rng.random_range(0.28..0.36) * h;
    let (ax, ay) = (rng.random_range(0.02..0.08) * w, rng.random_range(0.02..0.08) * h);
    let omega = rng.random_range(0.35..0.8);
    let (px, py, pb) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    let lm_phase = rng.random_range(0.0..TAU);
    let noise = Normal::new(0.0, 0.01).expect("valid sigma");

    let (hw, tn) = (height * width, frames);
    let mut data = vec![0f32; CHANNELS * tn * hw];
    let mut faces = Vec::with_capacity(tn);
    let mut track = Vec::with_capacity(tn);
    for t in 0..tn {
        let tf = t as f64;
        let breath = 1.0 + 0.04 * (0.5 * omega * tf + pb).sin();
        let face = Ellipse {
            cx: cx0 + ax * (omega * tf + px).sin(),
            cy: cy0 + ay * (omega * tf + py).sin(),
            rx: rx0 * breath,
            ry: ry0 * breath,
        };
        for y in 0..height {
            for x in 0..width {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                for c in 0..CHANNELS {
                    let v = shade(&look, &face, fx, fy, c) + noise.sample(&mut rng);
                    data[(c * tn + t) * hw + y * width + x] = quantize(v);
                }
            }
        }
        track.push(landmarks(&face, n, lm_phase));
        faces.push(face);
    }
    let clip = FrameClip::new(Tensor::new(vec![CHANNELS, tn, height, width], data).expect("clip shape"), format!("synthetic_{seed}"), None)?;
    let track = LandmarkTrack::new(track, height, width)?;
    Ok(SyntheticScene { clip, track, faces })
}

/// Deterministic procedural clip and its landmark track.
pub fn gen_synthetic_clip(seed: u64, frames: usize, height: usize, width: usize, n: usize) -> Result<(FrameClip, LandmarkTrack), MediaError> {
    let s = gen_synthetic_scene(seed, frames, height, width, n)?;
    Ok((s.clip, s.track))
}

fn shift_map(map: &Tensor<f32>, dx: i64, dy: i64) -> Tensor<f32> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as i64 - dy, (i % w) as i64 - dx);
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            map.data()[y as usize * w + x as usize]
        }
    })
}

/// Naive face paste: per frame, an independently sampled hull of the target
/// landmarks (mode, blur, one-pixel jitter) pastes the donor frame. No
/// landmark smoothing and no parameter sharing across frames.
pub fn gen_copy_paste_fake(target: &FrameClip, track: &LandmarkTrack, donor: &FrameClip, seed: u64) -> Result<FrameClip, MediaError> {
    let (tn, h, w) = (target.num_frames(), target.height(), target.width());
    if donor.num_frames() != tn || donor.height() != h || donor.width() != w || track.num_frames() != tn {
        return Err(MediaError::InvalidDimensions("donor, target and track must align".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = h * w;
    let mut out = target.pixels().clone();
    let tgt = target.pixels().data();
    let don = donor.pixels().data();
    for t in 0..tn {
        let params = HullMaskParams {
            hull_mode: HullMode::ALL[rng.random_range(0..HullMode::ALL.len())],
            deform_kernel: 1,
            blur_sigma: rng.random_range(0.0..=1.0),
        };
        let raw = rasterize_hull(track.frame(t), h, w, &params).or_else(|_| {
            rasterize_hull(track.frame(t), h, w, &HullMaskParams { hull_mode: HullMode::FullHull, ..params })
        });
        let raw = raw.map_err(|e| MediaError::InvalidClip(e.to_string()))?;
        let shifted = shift_map(&raw, rng.random_range(-1..=1), rng.random_range(-1..=1));
        let mask = gaussian_blur(&shifted, params.blur_sigma);
        let o = out.data_mut();
        for c in 0..CHANNELS {
            let base = (c * tn + t) * hw;
            for i in 0..hw {
                let m = mask.data()[i].clamp(0.0, 1.0);
                o[base + i] = (don[base + i] * m + tgt[base + i] * (1.0 - m)).clamp(0.0, 1.0);
            }
        }
    }
    FrameClip::new(out, format!("{}_copy_paste", target.clip_id), target.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_hull;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = gen_synthetic_clip(9, 4, 32, 32, 8).unwrap();
        let b = gen_synthetic_clip(9, 4, 32, 32, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, gen_synthetic_clip(10, 4, 32, 32, 8).unwrap().0);
    }

    #[test]
    fn landmarks_lie_in_face_bounding_box() {
        let s = gen_synthetic_scene(1, 4, 32, 32, 8).unwrap();
        for (t, face) in s.faces.iter().enumerate() {
            let (x0, y0, x1, y1) = face.bounding_box();
            for p in s.track.frame(t) {
                assert!(p.x >= x0 - 1e-9 && p.x <= x1 + 1e-9 && p.y >= y0 - 1e-9 && p.y <= y1 + 1e-9);
                assert!(face.level(p.x, p.y) <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn tiny_landmark_count_is_rejected() {
        assert!(matches!(gen_synthetic_clip(0, 4, 32, 32, 2), Err(MediaError::InvalidDimensions(_))));
        assert!(matches!(gen_synthetic_clip(0, 1, 32, 32, 8), Err(MediaError::InvalidDimensions(_))));
    }

    #[test]
    fn motion_is_smooth() {
        for seed in 0..20 {
            let s = gen_synthetic_scene(seed, 8, 32, 32, 12).unwrap();
            for t in 1..8 {
                let (a, b) = (s.track.frame(t - 1), s.track.frame(t));
                let mean = a.iter().zip(b).map(|(p, q)| ((q.x - p.x).powi(2) + (q.y - p.y).powi(2)).sqrt()).sum::<f64>() / a.len() as f64;
                assert!(mean < 0.1 * 32.0, "seed {seed} frame {t}: {mean}");
            }
        }
    }

    #[test]
    fn full_hull_covers_the_inner_contour() {
        for seed in 0..10 {
            let s = gen_synthetic_scene(seed, 2, 64, 64, 16).unwrap();
            let params = HullMaskParams { hull_mode: HullMode::FullHull, deform_kernel: 1, blur_sigma: 0.0 };
            let m = rasterize_hull(s.track.frame(0), 64, 64, &params).unwrap();
            let ratio = m.sum() as f64 / (s.faces[0].area() * CONTOUR * CONTOUR);
            assert!((0.9..=1.1).contains(&ratio), "seed {seed}: {ratio}");
        }
    }

    #[test]
    fn pixels_are_on_the_png_grid() {
        let (c, _) = gen_synthetic_clip(3, 2, 16, 16, 8).unwrap();
        assert!(c.pixels().data().iter().all(|&v| ((v * 255.0).round() / 255.0) == v));
    }

    #[test]
    fn copy_paste_changes_only_near_the_hull() {
        let s = gen_synthetic_scene(4, 4, 32, 32, 12).unwrap();
        let (donor, _) = gen_synthetic_clip(5, 4, 32, 32, 12).unwrap();
        let fake = gen_copy_paste_fake(&s.clip, &s.track, &donor, 0).unwrap();
        assert_ne!(fake.pixels(), s.clip.pixels());
        assert!(fake.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let corner: Vec<_> = (0..4).map(|t| (fake.frame(t).get(&[0, 0, 0]), s.clip.frame(t).get(&[0, 0, 0]))).collect();
        assert!(corner.iter().all(|(a, b)| a == b));
    }
}
