use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HarnessError, TrainConfig};
use crate::media_io::{FrameClip, LandmarkTrack, SeedPolicy, CHANNELS};
use crate::model::Targets;
use crate::numerics::{Real, Tensor};
use crate::synthesis::generate_sbv;
use crate::vulnerability::{sample_tau_cutout, VulnerabilityBundle};

/// A real training clip with its landmarks.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub clip: FrameClip,
    pub track: LandmarkTrack,
}

/// Photometric change shared by every frame of a clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    /// Gain around mid-gray 0.5.
    pub contrast: f32,
    pub gains: [f32; 3],
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter { brightness: 0.0, contrast: 1.0, gains: [1.0; 3] };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, strength: f64) -> Self {
        if strength <= 0.0 {
            return Self::IDENTITY;
        }
        let s = strength as f32;
        let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);
        Self {
            brightness: u(-s, s),
            contrast: u(1.0 - s, 1.0 + s),
            gains: [u(1.0 - s / 2.0, 1.0 + s / 2.0), u(1.0 - s / 2.0, 1.0 + s / 2.0), u(1.0 - s / 2.0, 1.0 + s / 2.0)],
        }
    }

    pub fn apply(&self, clip: &FrameClip) -> FrameClip {
        let px = clip.pixels();
        let per_channel = px.numel() / CHANNELS;
        let out = Tensor::from_fn(px.shape(), |i| {
            let c = i / per_channel;
            let v = ((px.data()[i] - 0.5) * self.contrast + 0.5 + self.brightness) * self.gains[c];
            v.clamp(0.0, 1.0)
        });
        FrameClip::new(out, clip.clip_id.clone(), clip.fps).expect("jitter keeps the clip valid")
    }
}

pub fn color_jitter<R: Rng + ?Sized>(clip: &FrameClip, rng: &mut R, strength: f64) -> FrameClip {
    ColorJitter::sample(rng, strength).apply(clip)
}

/// One network input with its head targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub clip_id: String,
    /// `[3, T, H, W]`
    pub pixels: Tensor<f32>,
    pub d_hat: Tensor<f64>,
    pub p: Tensor<f64>,
    pub label: u8,
    pub window_start: usize,
    /// Patches zeroed by cutout.
    pub cutout_patches: usize,
}

/// Draws a T-frame window of `source`, jitters it and, with probability
/// `fake_probability`, replaces it by its pseudo-fake (with cutout at
/// probability `cutout_probability`).
pub fn make_sample(source: &TrainClip, cfg: &TrainConfig, seed: u64) -> Result<Sample, HarnessError> {
    let m = &cfg.model;
    let (tn, p) = (m.frames, m.patch);
    let total = source.clip.num_frames();
    if total < tn || source.clip.height() != m.height || source.clip.width() != m.width {
        return Err(HarnessError::BadConfig(format!(
            "clip {:?} is {}x{}x{}, model needs {}x{} with at least {} frames",
            source.clip.clip_id,
            total,
            source.clip.height(),
            source.clip.width(),
            m.height,
            m.width,
            tn
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=total - tn);
    let clip = source.clip.window(start, tn)?;
    let track = source.track.window(start, tn)?;
    let clip = color_jitter(&clip, &mut rng, cfg.jitter);
    let fake = rng.random::<f64>() < cfg.fake_probability;
    let clip_id = source.clip.clip_id.clone();
    if !fake {
        let bundle = VulnerabilityBundle::for_real(tn, m.height, m.width, p, cfg.norm_mode)?;
        return Ok(Sample { clip_id, pixels: clip.into_pixels(), d_hat: bundle.d_hat, p: bundle.p, label: 0, window_start: start, cutout_patches: 0 });
    }
    let sbv = generate_sbv(&clip, &track, &cfg.interpolation, rng.random())?;
    let tau = (rng.random::<f64>() < cfg.cutout_probability).then(|| sample_tau_cutout(&mut rng));
    let (masked, bundle) = VulnerabilityBundle::for_fake(&sbv.clip, &sbv.masks, p, tau, cfg.norm_mode)?;
    Ok(Sample {
        clip_id,
        pixels: masked.into_pixels(),
        d_hat: bundle.d_hat,
        p: bundle.p,
        label: 1,
        window_start: start,
        cutout_patches: bundle.cutout.patches.len(),
    })
}

/// Network-ready batch.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    /// `[B, 3, T, H, W]`
    pub pixels: Tensor<F>,
    pub targets: Targets<F>,
    pub labels: Vec<u8>,
    pub clip_ids: Vec<String>,
}

pub fn stack_samples<F: Real>(samples: &[Sample]) -> Result<Batch<F>, HarnessError> {
    let first = samples.first().ok_or_else(|| HarnessError::BadConfig("empty batch".into()))?;
    let (ps, ds, ls) = (first.pixels.shape().to_vec(), first.d_hat.shape().to_vec(), first.p.shape().to_vec());
    let mut pixels = Vec::with_capacity(samples.len() * first.pixels.numel());
    let mut d_hat = Vec::with_capacity(samples.len() * first.d_hat.numel());
    let mut p = Vec::with_capacity(samples.len() * first.p.numel());
    for s in samples {
        if s.pixels.shape() != ps || s.d_hat.shape() != ds || s.p.shape() != ls {
            return Err(HarnessError::BadConfig(format!("sample {:?} does not match the batch shape", s.clip_id)));
        }
        pixels.extend(s.pixels.data().iter().map(|&v| F::lit(v as f64)));
        d_hat.extend(s.d_hat.data().iter().map(|&v| F::lit(v)));
        p.extend(s.p.data().iter().map(|&v| F::lit(v)));
    }
    let b = samples.len();
    let with_batch = |s: &[usize]| std::iter::once(b).chain(s.iter().copied()).collect::<Vec<_>>();
    Ok(Batch {
        pixels: Tensor::new(with_batch(&ps), pixels)?,
        targets: Targets {
            d_hat: Tensor::new(with_batch(&ds), d_hat)?,
            p: Tensor::new(with_batch(&ls), p)?,
            y: Tensor::from_fn(&[b], |i| F::lit(samples[i].label as f64)),
        },
        labels: samples.iter().map(|s| s.label).collect(),
        clip_ids: samples.iter().map(|s| s.clip_id.clone()).collect(),
    })
}

/// Samples for `clips[indices]`, each seeded from `step_seed` and its clip id.
pub fn build_batch<F: Real>(clips: &[TrainClip], indices: &[usize], cfg: &TrainConfig, step_seed: u64) -> Result<Batch<F>, HarnessError> {
    let seeds = SeedPolicy::new(step_seed);
    let samples = indices
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let c = clips.get(i).ok_or_else(|| HarnessError::BadConfig(format!("clip index {i} out of range")))?;
            make_sample(c, cfg, seeds.derive(&c.clip.clip_id, &format!("sample{slot}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    stack_samples(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media_io::gen_synthetic_clip;
    use crate::model::ModelConfig;

    fn clips(n: usize) -> Vec<TrainClip> {
        (0..n)
            .map(|i| {
                let (mut clip, track) = gen_synthetic_clip(i as u64, 6, 32, 32, 16).unwrap();
                clip.clip_id = format!("c{i}");
                TrainClip { clip, track }
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { model: ModelConfig::desk(), ..Default::default() }
    }

    #[test]
    fn real_samples_have_zero_targets() {
        let data = clips(1);
        let c = TrainConfig { fake_probability: 0.0, ..cfg() };
        let s = make_sample(&data[0], &c, 3).unwrap();
        assert_eq!(s.label, 0);
        assert!(s.d_hat.data().iter().all(|v| *v == 0.0));
        assert!(s.p.data().iter().all(|v| *v == 0.0));
        assert_eq!(s.pixels.shape(), &[3, 4, 32, 32]);
    }

    #[test]
    fn no_cutout_when_probability_is_zero() {
        let data = clips(4);
        let c = TrainConfig { fake_probability: 1.0, cutout_probability: 0.0, ..cfg() };
        for seed in 0..8 {
            let s = make_sample(&data[seed % 4], &c, seed as u64).unwrap();
            assert_eq!((s.label, s.cutout_patches), (1, 0));
        }
        let c = TrainConfig { fake_probability: 1.0, cutout_probability: 1.0, ..cfg() };
        let cut: usize = (0..8).map(|seed| make_sample(&data[seed % 4], &c, seed as u64).unwrap().cutout_patches).sum();
        assert!(cut > 0);
    }

    #[test]
    fn batches_are_deterministic() {
        let data = clips(4);
        let a: Batch<f32> = build_batch(&data, &[0, 1, 2, 3], &cfg(), 11).unwrap();
        let b: Batch<f32> = build_batch(&data, &[0, 1, 2, 3], &cfg(), 11).unwrap();
        let c: Batch<f32> = build_batch(&data, &[0, 1, 2, 3], &cfg(), 12).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.targets.d_hat, b.targets.d_hat);
        assert_eq!(a.labels, b.labels);
        assert!(a.pixels != c.pixels);
        assert_eq!(a.pixels.shape(), &[4, 3, 4, 32, 32]);
        assert_eq!(a.targets.d_hat.shape(), &[4, 4, 4, 4]);
    }

    #[test]
    fn jitter_is_shared_across_frames() {
        let data = clips(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = ColorJitter::sample(&mut rng, 0.2);
        let out = j.apply(&data[0].clip);
        let (src, dst) = (data[0].clip.pixels(), out.pixels());
        let per_channel = src.numel() / 3;
        for i in (0..src.numel()).step_by(97) {
            let c = i / per_channel;
            let want = (((src.data()[i] - 0.5) * j.contrast + 0.5 + j.brightness) * j.gains[c]).clamp(0.0, 1.0);
            assert_eq!(dst.data()[i], want);
        }
        let same = ColorJitter::IDENTITY.apply(&data[0].clip);
        let diff = same.pixels().data().iter().zip(src.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6);
    }
}
