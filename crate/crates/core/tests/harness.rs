mod common;

use stformer::harness::*;
use stformer::media_io::SeedPolicy;
use stformer::model::ModelConfig;
use stformer::numerics::{OptimizerConfig, ParamGroup, ParamKind};
use stformer::vulnerability::NormMode;

fn tiny_cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        lr_start: lr,
        freeze_epochs: 0,
        jitter: 0.0,
        optimizer: OptimizerConfig { max_grad_norm: Some(5.0), ..Default::default() },
        ..Default::default()
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn lr_schedule_is_flat_then_linear() {
    assert_eq!(lr_at(0, 100, 1.0), 1.0);
    assert_eq!(lr_at(24, 100, 1.0), 1.0);
    assert!(close(lr_at(25, 100, 1.0), 1.0));
    assert!(close(lr_at(50, 100, 1.0), 50.0 / 75.0));
    assert!(close(lr_at(99, 100, 1.0), 1.0 / 75.0));
    assert_eq!(lr_at(0, 0, 0.3), 0.3);
    let lrs: Vec<f64> = (0..40).map(|s| lr_at(s, 40, 2e-3)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn frozen_step_moves_only_heads() {
    let batch = stack_samples(&common::overfit_samples(NormMode::Meanstd)).unwrap();
    let mut tr = Trainer::new(&tiny_cfg(0.05)).unwrap();
    let before = tr.store().clone();
    tr.step(&batch, 0.05, true).unwrap();
    let mut head_moved = false;
    for (old, new) in before.entries().iter().zip(tr.store().entries()) {
        if old.kind != ParamKind::Trainable {
            continue;
        }
        match old.group {
            ParamGroup::Backbone => assert_eq!(old.value.data(), new.value.data(), "{} moved while frozen", old.name),
            ParamGroup::Head => head_moved |= old.value.data() != new.value.data(),
        }
    }
    assert!(head_moved);

    let frozen = tr.store().clone();
    tr.step(&batch, 0.05, false).unwrap();
    let backbone_moved = frozen
        .entries()
        .iter()
        .zip(tr.store().entries())
        .any(|(a, b)| a.group == ParamGroup::Backbone && a.kind == ParamKind::Trainable && a.value.data() != b.value.data());
    assert!(backbone_moved);
}

#[test]
fn huge_learning_rate_reports_non_finite() {
    let batch = stack_samples(&common::overfit_samples(NormMode::Meanstd)).unwrap();
    let cfg = TrainConfig { optimizer: OptimizerConfig { max_grad_norm: None, ..Default::default() }, ..tiny_cfg(1e30) };
    let mut tr = Trainer::new(&cfg).unwrap();
    let mut err = None;
    for _ in 0..5 {
        if let Err(e) = tr.step(&batch, 1e30, false) {
            err = Some(e);
            break;
        }
    }
    assert!(matches!(err, Some(HarnessError::NonFinite { .. })), "{err:?}");
}

#[test]
fn auc_edge_cases() {
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
    assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    assert_eq!(auc(&[0.1, 0.5, 0.5, 0.9], &[0, 0, 1, 1]).unwrap(), 0.875);
    assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(HarnessError::DegenerateLabels { label: 1 })));
    assert!(auc(&[0.1, f64::NAN], &[0, 1]).is_err());
    assert!(auc(&[0.1], &[0, 1]).is_err());
}

#[test]
fn window_starts_are_even_and_in_range() {
    assert_eq!(window_starts(8, 4, 1), vec![0]);
    let s = window_starts(8, 4, 4);
    assert_eq!(s.first(), Some(&0));
    assert_eq!(s.last(), Some(&4));
    assert!(s.windows(2).all(|w| w[0] <= w[1]));
    assert!(window_starts(3, 4, 2).is_empty());
}

#[test]
fn multi_shot_masks_the_top_of_the_selection_map() {
    let (model, store) = stformer::model::Model::init(ModelConfig::tiny(), 4).unwrap();
    let store = store.cast::<f32>();
    let (clip, _) = stformer::media_io::gen_synthetic_clip(9, 2, 16, 16, 8).unwrap();
    let seeds = SeedPolicy::new(11);
    let r = multi_shot_infer(&model, &store, &clip, &ShotPlan::new(4), &seeds).unwrap();
    assert_eq!(r.shots.len(), 4);
    for pair in r.shots.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let tau = next.tau_cutout.unwrap();
        let mut order: Vec<usize> = (0..prev.selection_map.len()).collect();
        order.sort_by(|&a, &b| prev.selection_map[b].total_cmp(&prev.selection_map[a]));
        let gs = 2;
        let picked: Vec<(usize, usize)> = order.iter().take_while(|&&i| prev.selection_map[i] > tau).map(|&i| (i / gs, i % gs)).collect();
        for p in &picked {
            assert!(next.masked.contains(p));
        }
        for p in &next.masked {
            assert!(prev.masked.contains(p) || picked.contains(p));
        }
    }
    let again = multi_shot_infer(&model, &store, &clip, &ShotPlan::new(4), &seeds).unwrap();
    assert_eq!(r, again);
    assert!(multi_shot_infer(&model, &store, &clip, &ShotPlan { num_shots: 2, frame: 2 }, &seeds).is_err());
}

#[test]
fn train_clips_writes_logs_and_checkpoints() {
    let spec = DatasetSpec { frames: 4, height: 16, width: 16, train_real: 4, val_real: 2, val_fake: 2, test_real: 0, test_fake: 0, seed: 2, ..Default::default() };
    let data = common::in_memory(&spec);
    let cfg = TrainConfig { model: ModelConfig::tiny(), epochs: 2, batch_size: 2, steps_per_epoch: Some(2), freeze_epochs: 1, windows_per_video: 2, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let out = train_clips(&data.train, &data.val, &cfg, dir.path()).unwrap();
    assert_eq!(out.steps, 4);
    assert_eq!(out.logs.len(), 4);
    assert!(out.best_checkpoint.is_some());
    for f in ["metrics.jsonl", "val.jsonl", "config.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("val.jsonl")).unwrap().lines().count(), 2);
    let (model, store) = load_model(&out.final_checkpoint).unwrap();
    assert_eq!(model.config(), &cfg.model);
    let report = evaluate(&model, &store, &data.val, 2).unwrap();
    assert_eq!(report.clips.len(), 4);

    let no_val = tempfile::tempdir().unwrap();
    let out = train_clips(&data.train, &[], &cfg, no_val.path()).unwrap();
    assert!(out.best_checkpoint.is_none());
    assert!(train_clips(&[], &[], &cfg, no_val.path()).is_err());
}
