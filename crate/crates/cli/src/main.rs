//! `s3kit` command-line entry point.
//!
//! Exit codes: 0 success, 2 input or schema error, 3 model or config error,
//! 4 numeric divergence. Every run that writes files also writes a run
//! manifest beside them.

mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use s3kit::data::{load_annotations, relabel_dataset_with_gt, save_annotations, Dataset, Instance};
use s3kit::metrics::{evaluate, EvalReport};
use s3kit::msma::{load_model, relabel, save_model, train, MsmaConfig, MsmaModel, TrainExample, TrainSchedule};
use s3kit::suppress::{nms, NmsMode, SuppressConfig};
use s3kit::synth::{generate, pyramid_path, SynthConfig, FEATURE_DIR, GT_FILE};
use s3kit::tensor::FeaturePyramid;

use manifest::{manifest_path, RunManifest};

#[derive(Parser)]
#[command(name = "s3kit", version, about = "Instance relabelling, suppression and evaluation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Write the report as JSON here as well as printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score filtering, mask NMS and top-K per frame.
    Nms {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        score_thresh: Option<f64>,
        /// JSON with any of score_threshold, top_k, iou_threshold, mode.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace predicted labels with the MSMA classifier's.
    Relabel {
        #[arg(long)]
        pred: PathBuf,
        /// Directory holding `<frame_id>.s3t` pyramids.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace labels of predictions that match a GT instance with its label.
    RelabelOracle {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an MSMA model on a scene directory (gt.json plus features/).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Schedule JSON; the staged 10/15/5/5 schedule when omitted.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        merge_channels: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the default training schedule as JSON.
    Schedule {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scene directory.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an evaluation report as Markdown or CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cross,
    Standard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

/// Failure with an explicit exit code.
#[derive(Debug)]
struct Coded(u8, String);

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Coded {}

const INPUT: u8 = 2;
const MODEL: u8 = 3;
const DIVERGED: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Coded(code, _)) = cause.downcast_ref::<Coded>() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<s3kit::Error>() {
            use s3kit::Error::*;
            return match e {
                DivergedLoss { .. } | NonFiniteValue(_) | SingularAngle { .. } | ZeroVector => DIVERGED,
                VersionMismatch(_) | Config(_) | ShapeMismatch(_) => MODEL,
                _ => INPUT,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return INPUT;
        }
    }
    MODEL
}

fn coded<T>(code: u8, r: s3kit::Result<T>) -> Result<T> {
    r.map_err(|e| Coded(code, e.to_string()).into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(MODEL);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// `S3KIT_THREADS` caps the worker pool; 0 or unset means one per core.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("S3KIT_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| Coded(MODEL, format!("S3KIT_THREADS={raw} is not a count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Evaluate { gt, pred, out } => cmd_evaluate(&gt, &pred, out.as_deref()),
        Command::Nms { pred, mode, iou, top_k, score_thresh, config, out } => {
            cmd_nms(&pred, mode, iou, top_k, score_thresh, config.as_deref(), &out)
        }
        Command::Relabel { pred, features, model, out } => cmd_relabel(&pred, &features, &model, &out),
        Command::RelabelOracle { pred, gt, iou, out } => cmd_relabel_oracle(&pred, &gt, iou, &out),
        Command::Train { data, schedule, seed, embed_dim, merge_channels, margin, scale, out } => {
            let mut cfg = MsmaConfig::default();
            cfg.embed_dim = embed_dim.unwrap_or(cfg.embed_dim);
            cfg.merge_channels = merge_channels.unwrap_or(cfg.merge_channels);
            cfg.margin = margin.unwrap_or(cfg.margin);
            cfg.scale = scale.unwrap_or(cfg.scale);
            cmd_train(&data, schedule.as_deref(), seed, &cfg, &out)
        }
        Command::Schedule { out } => {
            std::fs::write(&out, TrainSchedule::standard().to_json() + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
            RunManifest::new("schedule", serde_json::to_value(TrainSchedule::standard())?, None).write(&manifest_path(&out))
        }
        Command::Synth { config, seed, out } => cmd_synth(config.as_deref(), seed, &out),
        Command::Report { input, format, out } => cmd_report(&input, format, out.as_deref()),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    Ok(load_annotations(path)?)
}

fn same_classes(a: &Dataset, b: &Dataset) -> Result<()> {
    if a.class_count() != b.class_count() {
        return Err(Coded(
            INPUT,
            format!("class counts differ: {} vs {}", a.class_count(), b.class_count()),
        )
        .into());
    }
    Ok(())
}

fn cmd_evaluate(gt_path: &Path, pred_path: &Path, out: Option<&Path>) -> Result<()> {
    let gt = load(gt_path)?;
    let pred = load(pred_path)?;
    same_classes(&gt, &pred)?;
    let report = evaluate(&gt, &pred)?;
    print!("{}", report.to_table());
    if let Some(out) = out {
        std::fs::write(out, report.to_json_pretty() + "\n").with_context(|| format!("writing {}", out.display()))?;
        let mut m = RunManifest::new("evaluate", json!({}), None);
        m.add_input(gt_path)?;
        m.add_input(pred_path)?;
        m.write(&manifest_path(out))?;
    }
    Ok(())
}

/// Applies `f` to each frame's instances in parallel and reassembles the
/// output in frame order.
fn per_frame<F>(ds: &Dataset, f: F) -> Result<Vec<Instance>>
where
    F: Fn(&str, Vec<Instance>) -> Result<Vec<Instance>> + Sync,
{
    let by_frame = ds.by_frame();
    let groups: Vec<(&str, Vec<Instance>)> = ds
        .frames()
        .iter()
        .map(|fr| {
            let insts = by_frame.get(fr.id.as_str()).map(|v| v.iter().map(|i| (*i).clone()).collect()).unwrap_or_default();
            (fr.id.as_str(), insts)
        })
        .collect();
    let out = groups.into_par_iter().map(|(id, insts)| f(id, insts)).collect::<Vec<_>>();
    let mut all = Vec::new();
    for r in out {
        all.extend(r?);
    }
    Ok(all)
}

fn cmd_nms(
    pred_path: &Path,
    mode: Option<Mode>,
    iou: Option<f64>,
    top_k: Option<usize>,
    score_thresh: Option<f64>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    // flags > config file > defaults
    let mut cfg = SuppressConfig::default();
    let mut nms_mode = NmsMode::Cross;
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Coded(MODEL, format!("{}: {e}", path.display())))?;
        cfg = serde_json::from_value(value.clone()).map_err(|e| Coded(MODEL, format!("{}: {e}", path.display())))?;
        if let Some(m) = value.get("mode") {
            nms_mode = serde_json::from_value(m.clone()).map_err(|e| Coded(MODEL, format!("mode: {e}")))?;
        }
    }
    if let Some(m) = mode {
        nms_mode = match m {
            Mode::Cross => NmsMode::Cross,
            Mode::Standard => NmsMode::Standard,
        };
    }
    cfg.iou_threshold = iou.unwrap_or(cfg.iou_threshold);
    cfg.top_k = top_k.unwrap_or(cfg.top_k);
    cfg.score_threshold = score_thresh.unwrap_or(cfg.score_threshold);
    coded(MODEL, cfg.validate())?;

    let pred = load(pred_path)?;
    let kept = per_frame(&pred, |_, insts| Ok(nms(&insts, &cfg, nms_mode)?))?;
    save_annotations(&pred.with_instances(kept)?, out)?;
    let mut m = RunManifest::new("nms", json!({ "suppress": cfg, "mode": nms_mode }), None);
    m.add_input(pred_path)?;
    if let Some(path) = config {
        m.add_input(path)?;
    }
    m.write(&manifest_path(out))
}

fn cmd_relabel(pred_path: &Path, features: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let model = coded(MODEL, load_model(model_path))?;
    let pred = load(pred_path)?;
    if model.class_count() != pred.class_count() {
        return Err(Coded(
            MODEL,
            format!("model predicts {} classes, predictions declare {}", model.class_count(), pred.class_count()),
        )
        .into());
    }
    let feature_file = |id: &str| features.join(format!("{id}.s3t"));
    let mut inputs = vec![pred_path.to_path_buf(), model_path.to_path_buf()];
    let unlabelled = AtomicUsize::new(0);
    let outcomes = per_frame(&pred, |id, insts| {
        if insts.is_empty() {
            return Ok(insts);
        }
        let pyramid = FeaturePyramid::load(feature_file(id))?;
        let outcome = relabel(&model, &insts, &pyramid)?;
        if !outcome.empty_region.is_empty() {
            eprintln!("{id}: {} instance(s) cover no feature cell; label kept", outcome.empty_region.len());
            unlabelled.fetch_add(outcome.empty_region.len(), Ordering::Relaxed);
        }
        Ok(outcome.instances)
    })?;
    for f in pred.frames() {
        if pred.instances().iter().any(|i| i.frame_id == f.id) {
            inputs.push(feature_file(&f.id));
        }
    }
    save_annotations(&pred.with_instances(outcomes)?, out)?;
    let mut m = RunManifest::new("relabel", json!({ "features": features, "labels_kept": unlabelled.into_inner() }), None);
    for p in &inputs {
        m.add_input(p)?;
    }
    m.write(&manifest_path(out))
}

fn cmd_relabel_oracle(pred_path: &Path, gt_path: &Path, iou: f64, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(Coded(MODEL, format!("--iou {iou} outside [0, 1]")).into());
    }
    let pred = load(pred_path)?;
    let gt = load(gt_path)?;
    same_classes(&gt, &pred)?;
    save_annotations(&relabel_dataset_with_gt(&pred, &gt, iou)?, out)?;
    let mut m = RunManifest::new("relabel-oracle", json!({ "iou_threshold": iou }), None);
    m.add_input(pred_path)?;
    m.add_input(gt_path)?;
    m.write(&manifest_path(out))
}

fn cmd_train(data: &Path, schedule_path: Option<&Path>, seed: u64, cfg: &MsmaConfig, out: &Path) -> Result<()> {
    let schedule = match schedule_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            coded(MODEL, TrainSchedule::from_json(&text))?
        }
        None => TrainSchedule::standard(),
    };
    let gt_path = data.join(GT_FILE);
    let gt = load(&gt_path)?;
    let mut inputs = vec![gt_path.clone()];
    let mut examples = Vec::new();
    let by_frame = gt.by_frame();
    for frame in gt.frames() {
        let Some(insts) = by_frame.get(frame.id.as_str()) else { continue };
        let path = pyramid_path(data, &frame.id);
        let pyramid = Arc::new(FeaturePyramid::load(&path)?);
        inputs.push(path);
        for inst in insts {
            examples.push(TrainExample {
                pyramid: pyramid.clone(),
                mask: inst.decode_mask()?,
                target: inst.class,
            });
        }
    }
    let Some(first) = examples.first() else {
        return Err(Coded(INPUT, format!("{} has no instances to train on", gt_path.display())).into());
    };
    let dims = first.pyramid.level_dims();
    let model = coded(MODEL, MsmaModel::new(&dims, gt.class_count(), cfg, seed))?;
    let (model, log) = train(model, &examples, &schedule, seed)?;
    save_model(&model, out)?;
    for e in log.iter().filter(|e| e.epoch == 1 || schedule.phases.iter().any(|p| p.name == e.phase && p.epochs == e.epoch)) {
        eprintln!("{:<16} epoch {:>3}  loss {:.6}", e.phase, e.epoch, e.mean_loss);
    }
    let mut m = RunManifest::new(
        "train",
        json!({ "model": cfg, "schedule": schedule, "data": data, "epoch_losses": log }),
        Some(seed),
    );
    if let Some(p) = schedule_path {
        m.add_input(p)?;
    }
    for p in &inputs {
        m.add_input(p)?;
    }
    m.write(&manifest_path(out))
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Coded(MODEL, format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let scene = coded(MODEL, generate(&cfg))?;
    scene.write_to(out)?;
    eprintln!(
        "{} frames, {} instances, {} corrupted labels -> {}",
        scene.gt.frames().len(),
        scene.gt.instances().len(),
        scene.corrupted.len(),
        out.display()
    );
    let mut m = RunManifest::new("synth", serde_json::to_value(&cfg)?, Some(cfg.seed));
    if let Some(p) = config {
        m.add_input(p)?;
    }
    debug_assert!(out.join(FEATURE_DIR).is_dir());
    m.write(&manifest_path(out))
}

fn cmd_report(input: &Path, format: Format, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| Coded(INPUT, format!("{}: {e}", input.display())))?;
    let rendered = match format {
        Format::Md => report.to_markdown(),
        Format::Csv => report.to_csv(),
    };
    match out {
        Some(path) => {
            std::fs::write(path, &rendered).with_context(|| format!("writing {}", path.display()))?;
            let fmt_name = match format {
                Format::Md => "md",
                Format::Csv => "csv",
            };
            let mut m = RunManifest::new("report", json!({ "format": fmt_name }), None);
            m.add_input(input)?;
            m.write(&manifest_path(path))
        }
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}
