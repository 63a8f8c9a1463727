#![allow(dead_code)]

use stformer::geometry::InterpolationConfig;
use stformer::harness::{DatasetSpec, Sample, TrainClip};
use stformer::media_io::{gen_synthetic_clip, FrameClip, Split};
use stformer::synthesis::generate_sbv;
use stformer::vulnerability::{NormMode, VulnerabilityBundle};

/// Four real clips and four self-blended fakes at the tiny model's size.
pub fn overfit_samples(mode: NormMode) -> Vec<Sample> {
    let mut samples = Vec::new();
    for i in 0..8u64 {
        let (clip, track) = gen_synthetic_clip(100 + i, 2, 16, 16, 8).unwrap();
        if i < 4 {
            let b = VulnerabilityBundle::for_real(2, 16, 16, 8, mode).unwrap();
            samples.push(Sample { clip_id: format!("r{i}"), pixels: clip.into_pixels(), d_hat: b.d_hat, p: b.p, label: 0, window_start: 0, cutout_patches: 0 });
        } else {
            let sbv = generate_sbv(&clip, &track, &InterpolationConfig::default(), i).unwrap();
            let (masked, b) = VulnerabilityBundle::for_fake(&sbv.clip, &sbv.masks, 8, None, mode).unwrap();
            samples.push(Sample { clip_id: format!("f{i}"), pixels: masked.into_pixels(), d_hat: b.d_hat, p: b.p, label: 1, window_start: 0, cutout_patches: 0 });
        }
    }
    samples
}

pub struct Splits {
    pub train: Vec<TrainClip>,
    pub val: Vec<(FrameClip, u8)>,
    pub test: Vec<(FrameClip, u8)>,
}

pub fn in_memory(spec: &DatasetSpec) -> Splits {
    let mut s = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (id, split, label) in spec.plan() {
        let (clip, track) = spec.make_clip(&id, label).unwrap();
        match split {
            Split::Train => s.train.push(TrainClip { clip, track }),
            Split::Val => s.val.push((clip, label)),
            Split::Test => s.test.push((clip, label)),
        }
    }
    s
}
