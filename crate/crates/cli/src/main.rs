use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Serialize;

use stformer::geometry::InterpolationConfig;
use stformer::harness::{
    evaluate_manifest, gen_synthetic_dataset, gradcheck_model, load_model, multi_shot_infer, train, DatasetSpec, HarnessError, ShotPlan, TrainConfig,
};
use stformer::media_io::{load_frames, ClipManifest, FrameClip, LandmarkTrack, SeedPolicy, Split};
use stformer::model::ModelConfig;
use stformer::synthesis::generate_sbv;
use stformer::vulnerability::{sample_tau_cutout, NormMode, VulnerabilityBundle};

#[derive(Debug, Parser)]
#[command(name = "stformer", version, about = "Self-blended video synthesis and space-time forgery detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural dataset (clips, landmarks, manifest).
    GenSynthetic(GenArgs),
    /// Self-blended pseudo-fakes for every real clip of a manifest.
    Synth(SynthArgs),
    /// Pseudo-fakes plus their vulnerability targets.
    Annotate(AnnotateArgs),
    /// Train on the real train clips with on-the-fly pseudo-fakes.
    Train(TrainArgs),
    /// Video-level AUC of a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Per-clip fake probability, optionally multi-shot.
    Infer(InferArgs),
    /// Finite-difference check of the full model in f64.
    Gradcheck(GradcheckArgs),
    /// Temporal-head maps as grayscale PNGs, one per clip and frame.
    ExportHeatmaps(HeatmapArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// DatasetSpec JSON.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.35)]
    tau: f64,
    #[arg(long, default_value_t = 0.2)]
    dbar: f64,
    /// Frames taken from the start of each clip.
    #[arg(long, default_value_t = 4)]
    frames: usize,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value = "meanstd")]
    norm_mode: NormMode,
    /// Probability of applying cutout to a pseudo-fake.
    #[arg(long, default_value_t = 0.0)]
    cutout: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TrainConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 0.35]
    #[arg(long)]
    tau: Option<f64>,
    /// [default: 0.2]
    #[arg(long)]
    dbar: Option<f64>,
    /// [default: 4]
    #[arg(long)]
    frames: Option<usize>,
    /// [default: 0.8]
    #[arg(long)]
    lambda_c: Option<f64>,
    /// [default: 100]
    #[arg(long)]
    lambda_h: Option<f64>,
    /// [default: 0.2]
    #[arg(long)]
    lambda_g: Option<f64>,
    /// [default: meanstd]
    #[arg(long)]
    norm_mode: Option<NormMode>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 4)]
    windows: usize,
    /// Where to write the report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frames directory of one clip; its first T frames are used.
    #[arg(long, conflicts_with = "manifest")]
    clip: Option<PathBuf>,
    /// Runs every clip of `--split`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// ModelConfig JSON; defaults to the tiny preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn harness<E: Into<HarnessError>>(e: E) -> CliError {
    CliError::from(e.into())
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(invalid(format!("--split {other:?}: expected train, val or test"))),
    }
}

fn load_manifest(path: &Path) -> Result<ClipManifest, CliError> {
    ClipManifest::load(path).map_err(harness)
}

fn real_clips(manifest: &ClipManifest) -> Result<Vec<(FrameClip, LandmarkTrack)>, CliError> {
    manifest.entries.iter().filter(|e| e.label == 0).map(|e| manifest.load_entry(e).map_err(harness)).collect()
}

fn head_window(clip: &FrameClip, track: &LandmarkTrack, frames: usize) -> Result<(FrameClip, LandmarkTrack), CliError> {
    Ok((clip.window(0, frames).map_err(harness)?, track.window(0, frames).map_err(harness)?))
}

fn gen(args: GenArgs) -> Result<(), CliError> {
    let mut spec: DatasetSpec = match &args.config {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let m = gen_synthetic_dataset(&spec, &args.out).map_err(CliError::from)?;
    println!("wrote {} clips to {}", m.entries.len(), args.out.join("manifest.json").display());
    Ok(())
}

fn interpolation(tau: f64, dbar: f64) -> Result<InterpolationConfig, CliError> {
    InterpolationConfig::new(tau, dbar).map_err(|e| invalid(e.to_string()))
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let interp = interpolation(args.tau, args.dbar)?;
    let manifest = load_manifest(&args.manifest)?;
    let seeds = SeedPolicy::new(args.seed);
    let clips = real_clips(&manifest)?;
    for (clip, track) in &clips {
        let (clip, track) = head_window(clip, track, args.frames)?;
        let sbv = generate_sbv(&clip, &track, &interp, seeds.derive(&clip.clip_id, "sbv")).map_err(harness)?;
        sbv.save(args.out.join(&clip.clip_id)).map_err(harness)?;
    }
    println!("synthesized {} pseudo-fakes into {}", clips.len(), args.out.display());
    Ok(())
}

fn annotate(args: AnnotateArgs) -> Result<(), CliError> {
    let s = &args.synth;
    let interp = interpolation(s.tau, s.dbar)?;
    if !(0.0..=1.0).contains(&args.cutout) {
        return Err(invalid(format!("--cutout {} must be in [0, 1]", args.cutout)));
    }
    let manifest = load_manifest(&s.manifest)?;
    let seeds = SeedPolicy::new(s.seed);
    let clips = real_clips(&manifest)?;
    for (clip, track) in &clips {
        let (clip, track) = head_window(clip, track, s.frames)?;
        clip.check_patch_size(args.patch).map_err(harness)?;
        let id = clip.clip_id.clone();
        let sbv = generate_sbv(&clip, &track, &interp, seeds.derive(&id, "sbv")).map_err(harness)?;
        let mut rng = seeds.rng(&id, "cutout");
        let tau = (rng.random::<f64>() < args.cutout).then(|| sample_tau_cutout(&mut rng));
        let (masked, bundle) = VulnerabilityBundle::for_fake(&sbv.clip, &sbv.masks, args.patch, tau, args.norm_mode).map_err(harness)?;
        let dir = s.out.join(&id);
        let sbv = stformer::synthesis::PseudoFakeClip { clip: masked, ..sbv };
        sbv.save(&dir).map_err(harness)?;
        bundle.save(&dir).map_err(harness)?;
    }
    println!("annotated {} clips into {}", clips.len(), s.out.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let manifest = args.manifest.ok_or_else(|| invalid("train needs --manifest"))?;
    let out = args.out.ok_or_else(|| invalid("train needs --out"))?;
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_json(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.tau {
        cfg.interpolation.tau = v;
    }
    if let Some(v) = args.dbar {
        cfg.interpolation.dbar = v;
    }
    if let Some(v) = args.frames {
        cfg.model.frames = v;
    }
    if let Some(v) = args.lambda_c {
        cfg.weights.lambda_c = v;
    }
    if let Some(v) = args.lambda_h {
        cfg.weights.lambda_h = v;
    }
    if let Some(v) = args.lambda_g {
        cfg.weights.lambda_g = v;
    }
    if let Some(v) = args.norm_mode {
        cfg.norm_mode = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    cfg.validate()?;
    let manifest = load_manifest(&manifest)?;
    let outcome = train(&manifest, &cfg, &out)?;
    let last = outcome.logs.last();
    println!(
        "trained {} steps; final L = {:.6}; best val AUC = {}; checkpoint {}",
        outcome.steps,
        last.map_or(f64::NAN, |l| l.total),
        outcome.best_val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<(), CliError> {
    let split = parse_split(&args.split)?;
    let manifest = load_manifest(&args.manifest)?;
    let report = evaluate_manifest(&manifest, split, &args.checkpoint, args.windows)?;
    for c in &report.clips {
        println!("{}\t{}\t{:.6}", c.clip_id, c.label, c.score);
    }
    println!("AUC {:.6}", report.auc);
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn infer_cmd(args: InferArgs) -> Result<(), CliError> {
    let (model, store) = load_model(&args.checkpoint)?;
    let frames = model.config().frames;
    let clips: Vec<FrameClip> = match (&args.clip, &args.manifest) {
        (Some(dir), None) => vec![load_frames(dir).map_err(harness)?],
        (None, Some(m)) => {
            let split = parse_split(&args.split)?;
            let manifest = load_manifest(m)?;
            manifest.split(split).map(|e| manifest.load_entry(e).map(|c| c.0).map_err(harness)).collect::<Result<_, _>>()?
        }
        _ => return Err(invalid("infer needs exactly one of --clip or --manifest")),
    };
    let plan = ShotPlan::new(args.shots);
    let seeds = SeedPolicy::new(args.seed);
    let mut results = Vec::with_capacity(clips.len());
    for clip in &clips {
        let window = clip.window(0, frames).map_err(harness)?;
        let r = multi_shot_infer(&model, &store, &window, &plan, &seeds)?;
        let per_shot: Vec<String> = r.shots.iter().map(|s| format!("{:.6}", s.probability)).collect();
        println!("{}\t{:.6}\t[{}]", r.clip_id, r.probability, per_shot.join(", "));
        results.push(r);
    }
    if let Some(p) = &args.out {
        write_json(p, &results)?;
    }
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<bool, CliError> {
    let cfg: ModelConfig = match &args.config {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => ModelConfig::tiny(),
    };
    cfg.validate().map_err(harness)?;
    let report = gradcheck_model(cfg, args.seed, args.coords)?;
    println!("checked {} coordinates; max rel error {:.3e}", report.coords_checked, report.max_rel_error);
    Ok(report.max_rel_error < args.tolerance)
}

fn heatmaps(args: HeatmapArgs) -> Result<(), CliError> {
    let split = parse_split(&args.split)?;
    let (model, store) = load_model(&args.checkpoint)?;
    let cfg = *model.config();
    let manifest = load_manifest(&args.manifest)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    let (gs, p) = (cfg.grid(), cfg.patch);
    let mut count = 0;
    for e in manifest.split(split) {
        let (clip, _) = manifest.load_entry(e).map_err(harness)?;
        let window = clip.window(0, cfg.frames).map_err(harness)?;
        let input = stformer::numerics::Tensor::new(
            std::iter::once(1).chain(window.pixels().shape().iter().copied()).collect(),
            window.pixels().data().to_vec(),
        )
        .map_err(harness)?;
        let out = model.infer(&store, &input).map_err(harness)?;
        let map = out[0].d_tilde.data();
        let (lo, hi) = map.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for t in 0..cfg.frames {
            let img = image::GrayImage::from_fn((gs * p) as u32, (gs * p) as u32, |x, y| {
                let v = map[(t * gs + y as usize / p) * gs + x as usize / p];
                image::Luma([(((v - lo) / span) * 255.0).round() as u8])
            });
            let path = args.out.join(format!("{}_t{t}.png", e.clip_id));
            img.save(&path).map_err(|err| CliError::Runtime(format!("{}: {err}", path.display())))?;
            count += 1;
        }
    }
    println!("wrote {count} heatmaps to {}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::GenSynthetic(a) => gen(a).map(|_| true),
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Annotate(a) => annotate(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Infer(a) => infer_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::ExportHeatmaps(a) => heatmaps(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check above tolerance");
            ExitCode::from(2)
        }
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
