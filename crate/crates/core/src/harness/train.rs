use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{build_batch, Batch, TrainClip};
use super::eval::evaluate;
use super::{io, HarnessError, TrainConfig};
use crate::media_io::{ClipManifest, FrameClip, SeedPolicy, Split};
use crate::model::{losses, ForwardMode, LossWeights, Model, ModelConfig, ModelError, Targets};
use crate::numerics::{
    grad_check, save_checkpoint, BatchStats, Evaluation, GradCheckConfig, GradCheckReport, Graph, NumericsError, Optimizer,
    OptimizerConfig, ParamGroup, ParamId, ParamStore, Tensor,
};

/// Learning rate at `step` of `total`: `lr_start` for the first quarter,
/// then linear decay reaching `lr_start / (total - total / 4)` on the last step.
pub fn lr_at(step: usize, total: usize, lr_start: f64) -> f64 {
    let flat = total / 4;
    if step < flat || total == 0 {
        return lr_start;
    }
    lr_start * total.saturating_sub(step) as f64 / (total - flat) as f64
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_c")]
    pub c: f64,
    #[serde(rename = "L_h")]
    pub h: f64,
    #[serde(rename = "L_g")]
    pub g: f64,
}

fn numerics(e: ModelError) -> NumericsError {
    match e {
        ModelError::Numerics(n) => n,
        other => NumericsError::InvalidArgument(other.to_string()),
    }
}

/// Model, `f32` parameters and optimizer state of one run.
#[derive(Debug)]
pub struct Trainer {
    model: Model,
    store: ParamStore<f32>,
    optimizer: Optimizer<f32>,
    weights: LossWeights,
    bn_momentum: f32,
    head: Vec<bool>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let seed = SeedPolicy::new(cfg.seed).derive("model", "init");
        let (model, store) = Model::init(cfg.model, seed)?;
        Self::from_parts(model, store.cast(), cfg)
    }

    pub fn from_parts(model: Model, store: ParamStore<f32>, cfg: &TrainConfig) -> Result<Self, HarnessError> {
        let optimizer = Optimizer::new(OptimizerConfig { lr: cfg.lr_start, ..cfg.optimizer })?;
        let head = store.entries().iter().map(|e| e.group == ParamGroup::Head).collect();
        Ok(Self { model, store, optimizer, weights: cfg.weights, bn_momentum: cfg.bn_momentum as f32, head, step: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer step; with `freeze_backbone` only head tensors move.
    pub fn step(&mut self, batch: &Batch<f32>, lr: f64, freeze_backbone: bool) -> Result<StepLog, HarnessError> {
        let (model, weights) = (&self.model, &self.weights);
        let head = &self.head;
        let updatable = |id: ParamId| !freeze_backbone || head[id.index()];
        let mut first: Option<(StepLog, Vec<(ParamId, ParamId, BatchStats<f32>)>)> = None;
        let step = self.step;
        let result = self.optimizer.step(&mut self.store, lr, &updatable, |store| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let out = model.forward(&mut g, store, &bound, &batch.pixels, ForwardMode::Train).map_err(numerics)?;
            let lv = losses(&mut g, &out, &batch.targets, weights).map_err(numerics)?;
            let grads = g.backward(lv.total)?;
            let vals = lv.values(&g);
            if first.is_none() {
                let log = StepLog { step, lr, total: vals.total, c: vals.c, h: vals.h, g: vals.g };
                first = Some((log, out.trace.bn_stats.clone()));
            }
            Ok(Evaluation {
                loss: g.value(lv.total).data()[0],
                grads: store.ids().map(|id| grads.get_or_zeros(bound.var(id), store.value(id).shape())).collect(),
            })
        });
        match result {
            Ok(_) => {}
            Err(e @ NumericsError::NonFiniteDetected { .. }) => return Err(HarnessError::NonFinite { step, source: e }),
            Err(e) => return Err(e.into()),
        }
        let (log, stats) = first.expect("evaluated at least once");
        Model::update_running_stats(&mut self.store, &stats, self.bn_momentum);
        self.step += 1;
        Ok(log)
    }

    /// Loss values at the current parameters without updating anything.
    pub fn evaluate_loss(&self, pixels: &Tensor<f32>, targets: &Targets<f32>) -> Result<StepLog, HarnessError> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let out = self.model.forward(&mut g, &self.store, &bound, pixels, ForwardMode::Train)?;
        let v = losses(&mut g, &out, targets, &self.weights)?.values(&g);
        Ok(StepLog { step: self.step, lr: 0.0, total: v.total, c: v.c, h: v.h, g: v.g })
    }

    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<(), HarnessError> {
        let mut meta = serde_json::json!({ "model": self.model.config(), "step": self.step });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), metadata) {
            m.extend(extra);
        }
        save_checkpoint(&self.store, dir, meta)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub logs: Vec<StepLog>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_auc: Option<f64>,
}

fn load_splits(manifest: &ClipManifest) -> Result<(Vec<TrainClip>, Vec<(FrameClip, u8)>), HarnessError> {
    let mut train = Vec::new();
    for e in manifest.split(Split::Train) {
        if e.label != 0 {
            return Err(HarnessError::BadConfig(format!("train split must hold only real clips, {:?} is labeled fake", e.clip_id)));
        }
        let (clip, track) = manifest.load_entry(e)?;
        train.push(TrainClip { clip, track });
    }
    let val = manifest.split(Split::Val).map(|e| Ok((manifest.load_entry(e)?.0, e.label))).collect::<Result<Vec<_>, HarnessError>>()?;
    Ok((train, val))
}

/// Trains on the manifest's real train clips and writes `metrics.jsonl`,
/// `val.jsonl`, `config.json`, `final/` and (with a two-class val split) `best/`.
pub fn train(manifest: &ClipManifest, cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let (clips, val) = load_splits(manifest)?;
    train_clips(&clips, &val, cfg, out_dir.as_ref())
}

/// [`train`] on clips already in memory.
pub fn train_clips(clips: &[TrainClip], val: &[(FrameClip, u8)], cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(HarnessError::BadConfig("train split is empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg).expect("config serializes")).map_err(|e| io(&cfg_path, e))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path).map_err(|e| io(&metrics_path, e))?);
    let val_path = out.join("val.jsonl");
    let mut val_log = BufWriter::new(fs::File::create(&val_path).map_err(|e| io(&val_path, e))?);
    let two_class = val.iter().any(|v| v.1 == 0) && val.iter().any(|v| v.1 == 1);

    let mut trainer = Trainer::new(cfg)?;
    let seeds = SeedPolicy::new(cfg.seed);
    let per_epoch = cfg.steps_per_epoch.unwrap_or(clips.len().div_ceil(cfg.batch_size));
    let total = per_epoch * cfg.epochs;
    let mut logs = Vec::with_capacity(total);
    let mut best: Option<f64> = None;
    let best_dir = out.join("best");
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut seeds.rng(&format!("epoch{epoch}"), "shuffle"));
        for k in 0..per_epoch {
            let step = trainer.steps_done();
            let idx: Vec<usize> = (0..cfg.batch_size).map(|j| order[(k * cfg.batch_size + j) % order.len()]).collect();
            let batch = build_batch::<f32>(clips, &idx, cfg, seeds.derive(&format!("step{step}"), "batch"))?;
            let log = trainer.step(&batch, lr_at(step, total, cfg.lr_start), epoch < cfg.freeze_epochs)?;
            let line = serde_json::to_string(&log).expect("log serializes");
            writeln!(metrics, "{line}").map_err(|e| io(&metrics_path, e))?;
            logs.push(log);
        }
        if two_class {
            let report = evaluate(trainer.model(), trainer.store(), val, cfg.windows_per_video)?;
            let line = serde_json::json!({ "epoch": epoch, "step": trainer.steps_done(), "auc": report.auc });
            writeln!(val_log, "{line}").map_err(|e| io(&val_path, e))?;
            if best.is_none_or(|b| report.auc > b) {
                best = Some(report.auc);
                trainer.save(&best_dir, serde_json::json!({ "epoch": epoch, "val_auc": report.auc }))?;
            }
        }
    }
    metrics.flush().map_err(|e| io(&metrics_path, e))?;
    val_log.flush().map_err(|e| io(&val_path, e))?;
    let final_dir = out.join("final");
    trainer.save(&final_dir, serde_json::json!({ "epoch": cfg.epochs, "val_auc": best }))?;
    Ok(TrainOutcome {
        steps: trainer.steps_done(),
        logs,
        final_checkpoint: final_dir,
        best_checkpoint: best.map(|_| best_dir),
        best_val_auc: best,
    })
}

/// Finite-difference check of the full model and loss in `f64` on a random
/// two-clip batch.
pub fn gradcheck_model(cfg: ModelConfig, seed: u64, coords: usize) -> Result<GradCheckReport, HarnessError> {
    let (model, mut store) = Model::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (b, t, gs) = (2, cfg.frames, cfg.grid());
    let pixels = Tensor::from_fn(&[b, 3, t, cfg.height, cfg.width], |_| rng.random::<f64>());
    let targets = Targets {
        d_hat: Tensor::from_fn(&[b, t, gs, gs], |_| rng.random::<f64>() * 2.0 - 1.0),
        p: Tensor::from_fn(&[b, t], |_| rng.random::<f64>()),
        y: Tensor::new(vec![b], vec![0.0, 1.0])?,
    };
    let buffers = store.clone();
    let weights = LossWeights::default();
    let gc = GradCheckConfig { max_coords: Some(coords), seed, ..Default::default() };
    let report = grad_check(&mut store, &gc, |g, bound| {
        let out = model.forward(g, &buffers, bound, &pixels, ForwardMode::Train).map_err(numerics)?;
        Ok(losses(g, &out, &targets, &weights).map_err(numerics)?.total)
    })?;
    Ok(report)
}
