//! Subcommands behind the `fec` binary.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_model, ChannelStats, Model, ModelConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cluster::{DispatchVariant, SimilarityKind};
use crate::error::{FecError, Result};
use crate::gradcheck;
use crate::hierarchy::{
    build_pyramid, kmeans_reduce, render_segmentation, AssignmentDump, LabelDump, LayerRole, SegmentPyramid,
    Segmentation,
};
use crate::tensor::{BackwardFault, Float, OpKind, Tensor};
use crate::training::{evaluate, load_dataset, train, DataFormat, Split, TrainConfig};

pub const BUILD_ID: &str = env!("FEC_BUILD_ID");
pub const CHECKPOINT_FILE: &str = "model.fecw";
pub const METRICS_FILE: &str = "metrics.log";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const RUN_LOG_FILE: &str = "run.log";

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CHECK_FAILED: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const NUMERICAL: u8 = 3;
}

/// Exit code for an error that ends a command.
pub fn exit_code(err: &FecError) -> u8 {
    match err {
        FecError::Numerical(_) => exit::NUMERICAL,
        FecError::Config(_)
        | FecError::Argument(_)
        | FecError::Format { .. }
        | FecError::CorruptCheckpoint(_)
        | FecError::Io(_)
        | FecError::Image(_)
        | FecError::Json(_) => exit::USAGE,
        FecError::Dimension(_) | FecError::Domain(_) | FecError::Contract(_) => exit::CHECK_FAILED,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; relative paths are taken from the config file's
    /// directory.
    pub path: PathBuf,
    pub format: DataFormat,
    /// Use only the first N training samples.
    pub train_limit: Option<usize>,
    /// Use only the first N test samples.
    pub test_limit: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/mnist"),
            format: DataFormat::IdxUbyte,
            train_limit: None,
            test_limit: None,
            eval_batch_size: 256,
        }
    }
}

/// Contents of a run configuration file (TOML with `[model]`, `[train]` and
/// `[data]` tables). Missing keys take their defaults; unknown keys are
/// errors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| FecError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| FecError::Config(format!("{}: {e}", path.display())))?;
        if cfg.data.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.model.seed = s;
            self.train.seed = s;
        }
        if let Some(d) = o.dispatch {
            self.model.dispatch_variant = d;
        }
        if let Some(s) = o.similarity {
            self.model.similarity = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.eval_batch_size == 0 {
            return Err(FecError::Config("data.eval_batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "fec", version = BUILD_ID, about = "Clustering backbone: train, evaluate and segment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a configuration file.
    Train(TrainArgs),
    /// Report top-1 accuracy and loss of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Export cluster assignments and a segment level of one image.
    Segment(SegmentArgs),
    /// Finite-difference check of the clustering layers' gradients.
    Gradcheck(GradcheckArgs),
    /// Print the architecture of a configuration or checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "eq7|s1_dense")]
    pub dispatch: Option<DispatchVariant>,
    #[arg(long, value_name = "cosine|dot|euclidean")]
    pub similarity: Option<SimilarityKind>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "idx_ubyte")]
    pub format: DataFormat,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pyramid level, 1 = finest; defaults to the top level.
    #[arg(long)]
    pub level: Option<usize>,
    /// Merge the level's clusters into k groups with K-means.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub median_radius: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the backward rule of one op kind (negative control).
    #[arg(long, hide = true, value_name = "OP")]
    pub corrupt_backward: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Built-in preset: micro or small.
    #[arg(long, conflicts_with_all = ["config", "checkpoint"])]
    pub preset: Option<String>,
}

/// Runs a parsed command, printing to stdout/stderr. Returns the exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Segment(a) => cmd_segment(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// One metrics line per epoch.
pub fn metrics_line(epoch: usize, lr: f64, train_loss: f64, val_top1: Option<f64>) -> String {
    let top1 = val_top1.map_or("nan".to_string(), |v| format!("{v:.6}"));
    format!("epoch={epoch} lr={lr:.6e} train_loss={train_loss:.6} val_top1={top1}")
}

fn cmd_train(args: &TrainArgs) -> Result<u8> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(&args.overrides);
    cfg.validate()?;
    fs::create_dir_all(&args.out)?;
    let resolved = cfg.to_toml();
    fs::write(args.out.join(RESOLVED_CONFIG_FILE), &resolved)?;
    let mut log = fs::File::create(args.out.join(RUN_LOG_FILE))?;
    writeln!(log, "build {BUILD_ID}\n--- resolved config ---\n{resolved}---")?;

    let mut train_data = load_dataset(&cfg.data.path, cfg.data.format, Split::Train, cfg.model.num_classes, None)?;
    if let Some(n) = cfg.data.train_limit {
        train_data.truncate(n);
    }
    let mut test_data =
        load_dataset(&cfg.data.path, cfg.data.format, Split::Test, cfg.model.num_classes, Some(&train_data.stats))?;
    if let Some(n) = cfg.data.test_limit {
        test_data.truncate(n);
    }
    writeln!(log, "train samples {} test samples {}", train_data.len(), test_data.len())?;

    let mut model = build_model::<f32>(&cfg.model)?;
    writeln!(log, "parameters {}", model.param_count())?;
    let mut metrics = fs::File::create(args.out.join(METRICS_FILE))?;
    let mut write_err = None;
    let outcome = train(&mut model, &train_data, Some(&test_data), &cfg.train, |m| {
        let line = metrics_line(m.epoch, m.lr, m.train_loss, m.val_top1);
        println!("{line}");
        if let Err(e) = writeln!(metrics, "{line}").and_then(|_| writeln!(log, "{line}")) {
            write_err.get_or_insert(e);
        }
    });
    if let Err(e) = &outcome {
        let _ = writeln!(log, "aborted: {e}");
    }
    outcome?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let ckpt = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &ckpt)?;
    writeln!(log, "checkpoint {}", ckpt.display())?;
    Ok(exit::OK)
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    if !path.is_file() {
        return Err(FecError::Argument(format!("checkpoint {} does not exist", path.display())));
    }
    load_checkpoint(path)
}

fn cmd_eval(args: &EvalArgs) -> Result<u8> {
    let model = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data, args.format, Split::Test, model.config.num_classes, model.input_stats.as_ref())?;
    let e = evaluate(&model, &data, args.batch_size.max(1))?;
    println!("top1={:.6} loss={:.6} samples={}", e.top1, e.loss, e.count);
    Ok(exit::OK)
}

/// Everything `segment` writes for one image.
#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub assignments: AssignmentDump,
    pub pyramid: SegmentPyramid,
    pub level: usize,
    pub segmentation: Segmentation,
    pub labels: LabelDump,
    /// The image as the model saw it (resized).
    pub input: RgbImage,
}

/// Model input for one RGB image: resized to the input grid and normalized
/// with the model's statistics (a single-channel statistic serves all).
pub fn image_tensor<T: Float>(image: &RgbImage, config: &ModelConfig, stats: Option<&ChannelStats>) -> Result<(Tensor<T>, RgbImage)> {
    let [h, w] = config.input_size;
    if config.in_channels != 3 {
        return Err(FecError::Config(format!("segmenting RGB images needs 3 input channels, model has {}", config.in_channels)));
    }
    let resized = if (image.width() as usize, image.height() as usize) == (w, h) {
        image.clone()
    } else {
        image::imageops::resize(image, w as u32, h as u32, FilterType::Triangle)
    };
    let stat = |c: usize| match stats {
        Some(s) if s.mean.len() == 1 => (s.mean[0], s.std[0]),
        Some(s) => (s.mean[c], s.std[c]),
        None => (0.0, 1.0),
    };
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let (m, s) = stat(c);
        for px in resized.pixels() {
            data.push(T::of((px.0[c] as f64 / 255.0 - m) / s));
        }
    }
    Ok((Tensor::new(vec![1, 3, h, w], data)?, resized))
}

/// Forward pass with recorded assignments, pyramid construction and the
/// rendering of one level.
pub fn segment_image<T: Float>(
    model: &Model<T>,
    image: &RgbImage,
    level: Option<usize>,
    k: Option<usize>,
    median_radius: usize,
    seed: u64,
) -> Result<SegmentOutput> {
    let (x, input) = image_tensor::<T>(image, &model.config, model.input_stats.as_ref())?;
    let (_, records) = model.predict(&x, true)?;
    let records = records.and_then(|r| r.into_iter().next()).expect("recording was requested");
    let pools: Vec<_> = records.iter().filter(|r| r.role == LayerRole::Pool).cloned().collect();
    let pyramid = build_pyramid(&pools, model.config.stem_stride)?;
    let level = level.unwrap_or(pyramid.depth());
    pyramid.level(level)?;
    let merged = k.map(|k| kmeans_reduce(&pools[level - 1].representatives, k, seed)).transpose()?;
    let segmentation = render_segmentation(&pyramid, level, merged.as_deref(), median_radius)?;
    let labels = LabelDump::new(&segmentation, level, k, median_radius);
    Ok(SegmentOutput { assignments: AssignmentDump::new(&records), pyramid, level, segmentation, labels, input })
}

fn cmd_segment(args: &SegmentArgs) -> Result<u8> {
    let model = load_model(&args.checkpoint)?;
    let image = image::open(&args.image)?.to_rgb8();
    let out = segment_image(&model, &image, args.level, args.k, args.median_radius, args.seed)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("assignments.json"), serde_json::to_vec_pretty(&out.assignments)?)?;
    let l = out.level;
    fs::write(args.out.join(format!("level{l}_labels.json")), serde_json::to_vec_pretty(&out.labels)?)?;
    out.segmentation.overlay(None)?.save(args.out.join(format!("level{l}_overlay.png")))?;
    out.segmentation.overlay(Some(&out.input))?.save(args.out.join(format!("level{l}_blend.png")))?;
    println!("level {l}: {} segments over {}×{} pixels", out.labels.segments, out.labels.height, out.labels.width);
    Ok(exit::OK)
}

fn parse_op_kind(s: &str) -> Result<OpKind> {
    let kinds = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::ScaleShift,
        OpKind::Sigmoid,
        OpKind::Gelu,
        OpKind::RowNorm,
        OpKind::AdaPool,
        OpKind::Similarity,
        OpKind::Aggregate,
        OpKind::GatherRows,
        OpKind::PickPerRow,
        OpKind::BatchMatMul,
    ];
    kinds
        .into_iter()
        .find(|k| format!("{k:?}").eq_ignore_ascii_case(s))
        .ok_or_else(|| FecError::Argument(format!("unknown op kind `{s}`")))
}

/// Formats a gradient-check report; returns the text and whether all passed.
pub fn gradcheck_report(reports: &[gradcheck::GroupReport]) -> (String, bool) {
    let mut text = String::new();
    let mut offenders = Vec::new();
    for r in reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            text,
            "{:<7} {:<14} max_rel_err={:.3e} checked={} skipped={} {status}",
            r.layer, r.group, r.max_rel_err, r.checked, r.skipped
        );
        if !r.passed() {
            offenders.push(format!("{}.{}", r.layer, r.group));
        }
    }
    if offenders.is_empty() {
        let _ = writeln!(text, "all groups below {:e}", gradcheck::TOLERANCE);
    } else {
        let _ = writeln!(text, "exceeded {:e}: {}", gradcheck::TOLERANCE, offenders.join(", "));
    }
    (text, offenders.is_empty())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<u8> {
    let fault = args
        .corrupt_backward
        .as_deref()
        .map(|s| parse_op_kind(s).map(|kind| BackwardFault { kind, factor: 1.5 }))
        .transpose()?;
    let reports = gradcheck::run(args.seed, fault)?;
    let (text, ok) = gradcheck_report(&reports);
    print!("{text}");
    Ok(if ok { exit::OK } else { exit::CHECK_FAILED })
}

fn describe(model: &Model<f32>) -> Result<String> {
    let cfg = &model.config;
    let mut s = String::new();
    let _ = writeln!(s, "input {}×{}×{}", cfg.in_channels, cfg.input_size[0], cfg.input_size[1]);
    for (i, ((grid, depth), ch)) in cfg.stage_grids()?.iter().zip(cfg.stage_depths).zip(cfg.stage_channels).enumerate() {
        let _ = writeln!(s, "stage {} grid {}×{} channels {ch} encode layers {depth}", i + 1, grid.0, grid.1);
    }
    let _ = writeln!(s, "similarity {} dispatch {}", cfg.similarity, cfg.dispatch_variant);
    let _ = writeln!(s, "assignment records per image {}", cfg.records_per_image());
    let _ = writeln!(s, "parameters {}", model.param_count());
    Ok(s)
}

fn cmd_inspect(args: &InspectArgs) -> Result<u8> {
    let model = match (&args.config, &args.checkpoint, &args.preset) {
        (Some(c), _, _) => build_model::<f32>(&RunConfig::load(c)?.model)?,
        (_, Some(p), _) => load_model(p)?,
        (_, _, Some(p)) => match p.as_str() {
            "micro" => build_model::<f32>(&ModelConfig::micro())?,
            "small" => build_model::<f32>(&ModelConfig::small())?,
            _ => return Err(FecError::Argument(format!("unknown preset `{p}` (micro|small)"))),
        },
        _ => build_model::<f32>(&ModelConfig::micro())?,
    };
    print!("{}", describe(&model)?);
    Ok(exit::OK)
}
