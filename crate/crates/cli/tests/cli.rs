use std::path::Path;
use std::process::{Command, Output};

fn stformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stformer")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn small_dataset(dir: &Path) -> String {
    let spec = r#"{"frames": 4, "train_real": 4, "val_real": 1, "val_fake": 1, "test_real": 2, "test_fake": 2, "seed": 3}"#;
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, spec).unwrap();
    let out = dir.join("data");
    let o = stformer(&["gen-synthetic", "--out", out.to_str().unwrap(), "--config", spec_path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    out.join("manifest.json").to_str().unwrap().to_string()
}

#[test]
fn train_without_manifest_is_a_validation_error() {
    let o = stformer(&["train", "--out", "/tmp/unused"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("--manifest"), "{}", text(&o));
}

#[test]
fn unknown_flag_exits_with_one() {
    let o = stformer(&["eval", "--bogus"]);
    assert_eq!(code(&o), 1);
    let o = stformer(&["no-such-command"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn help_exits_cleanly() {
    let o = stformer(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["gen-synthetic", "synth", "annotate", "train", "eval", "infer", "gradcheck", "export-heatmaps"] {
        assert!(text(&o).contains(sub), "help lists {sub}");
    }
}

#[test]
fn gradcheck_on_tiny_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, r#"{"frames": 2, "height": 16, "width": 16, "patch": 8, "dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2}"#).unwrap();
    let o = stformer(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("max rel error"));
}

#[test]
fn bad_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"epochs": 0}"#).unwrap();
    let o = stformer(&["train", "--manifest", &manifest, "--out", dir.path().join("run").to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("epochs"), "{}", text(&o));
    std::fs::write(&cfg, r#"{"learning_rate": 0.1}"#).unwrap();
    let o = stformer(&["train", "--manifest", &manifest, "--out", dir.path().join("run").to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("learning_rate"), "{}", text(&o));
    let o = stformer(&["train", "--manifest", &manifest, "--out", "x", "--norm-mode", "median"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let o = stformer(&["eval", "--manifest", &manifest, "--checkpoint", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn annotate_emits_the_six_targets_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let out = dir.path().join("ann");
    let o = stformer(&["annotate", "--manifest", &manifest, "--out", out.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let clip = out.join("train_r000");
    for f in ["B.bin", "Bbar.bin", "Btilde.bin", "D.bin", "Dhat.bin", "p.bin", "vulnerability.json", "mask.bin", "params.json"] {
        assert!(clip.join(f).is_file(), "missing {f}");
    }
    assert!(clip.join("frames/frame_00003.png").is_file());
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(clip.join("vulnerability.json")).unwrap()).unwrap();
    assert_eq!(side["norm_mode"], "meanstd");
}

#[test]
fn synth_train_eval_infer_heatmaps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let sbv = dir.path().join("sbv");
    let o = stformer(&["synth", "--manifest", &manifest, "--out", sbv.to_str().unwrap(), "--tau", "0.35", "--dbar", "0.2"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(sbv.join("test_r000/mask.bin").is_file());

    let cfg = dir.path().join("train.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"frames": 2, "height": 32, "width": 32, "patch": 8, "dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2},
            "epochs": 1, "batch_size": 2, "steps_per_epoch": 2, "freeze_epochs": 0, "windows_per_video": 2}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = stformer(&["train", "--manifest", &manifest, "--out", run.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--lambda-h", "1"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for k in ["step", "lr", "L", "L_c", "L_h", "L_g"] {
        assert!(first.get(k).is_some(), "metrics record has {k}");
    }

    let ckpt = run.join("final");
    let report = dir.path().join("report.json");
    let o = stformer(&["eval", "--manifest", &manifest, "--checkpoint", ckpt.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("AUC"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["clips"].as_array().unwrap().len(), 4);

    let o = stformer(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", &manifest, "--shots", "3"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);
    let one = dir.path().join("data/clips/test_f000/frames");
    let o = stformer(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--clip", one.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = stformer(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--shots", "0", "--clip", one.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", text(&o));

    let maps = dir.path().join("maps");
    let o = stformer(&["export-heatmaps", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", &manifest, "--out", maps.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(maps.join("test_f001_t1.png").is_file());
    assert_eq!(std::fs::read_dir(&maps).unwrap().count(), 4 * 2);
}
