use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use stformer::geometry::InterpolationConfig;
use stformer::harness::{stack_samples, Sample, TrainConfig, Trainer};
use stformer::media_io::gen_synthetic_clip;
use stformer::model::{Model, ModelConfig};
use stformer::numerics::Tensor;
use stformer::synthesis::generate_sbv;
use stformer::vulnerability::{NormMode, VulnerabilityBundle};

fn vulnerability(c: &mut Criterion) {
    let (clip, track) = gen_synthetic_clip(1, 8, 64, 64, 16).unwrap();
    let sbv = generate_sbv(&clip, &track, &InterpolationConfig::default(), 2).unwrap();
    c.bench_function("sbv_8x64x64", |b| b.iter(|| generate_sbv(black_box(&clip), &track, &InterpolationConfig::default(), 2).unwrap()));
    c.bench_function("targets_8x64x64_p8", |b| {
        b.iter(|| VulnerabilityBundle::for_fake(black_box(&sbv.clip), &sbv.masks, 8, Some(0.7), NormMode::Meanstd).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let (model, store) = Model::init(cfg, 0).unwrap();
    let store = store.cast::<f32>();
    let px = Tensor::from_fn(&[8, 3, cfg.frames, cfg.height, cfg.width], |i| (i % 97) as f32 / 97.0);
    c.bench_function("desk_infer_b8", |b| b.iter(|| model.infer(&store, black_box(&px)).unwrap()));

    let samples: Vec<Sample> = (0..8u64)
        .map(|i| {
            let (clip, _) = gen_synthetic_clip(i, cfg.frames, cfg.height, cfg.width, 16).unwrap();
            let t = VulnerabilityBundle::for_real(cfg.frames, cfg.height, cfg.width, cfg.patch, NormMode::Meanstd).unwrap();
            Sample { clip_id: format!("c{i}"), pixels: clip.into_pixels(), d_hat: t.d_hat, p: t.p, label: (i % 2) as u8, window_start: 0, cutout_patches: 0 }
        })
        .collect();
    let batch = stack_samples(&samples).unwrap();
    let mut trainer = Trainer::new(&TrainConfig::default()).unwrap();
    c.bench_function("desk_train_step_b8", |b| b.iter(|| trainer.step(black_box(&batch), 1e-4, false).unwrap()));
}

criterion_group!(benches, vulnerability, model);
criterion_main!(benches);
