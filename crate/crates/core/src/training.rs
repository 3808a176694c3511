//! Datasets, AdamW with a warm-up + cosine schedule, and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{ChannelStats, Model};
use crate::error::{FecError, Result};
use crate::params::ParamStore;
use crate::tensor::{argmax_rows, Float, Tape, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    IdxUbyte,
    ImageDirectory,
}

impl std::str::FromStr for DataFormat {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx_ubyte" | "idx" => Ok(Self::IdxUbyte),
            "image_directory" | "dir" => Ok(Self::ImageDirectory),
            _ => Err(FecError::Config(format!("unknown data format `{s}` (idx_ubyte|image_directory)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn idx_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Normalized images (`n × channels × height × width`) with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub split: Split,
    /// Statistics the images were normalized with.
    pub stats: ChannelStats,
}

fn format_err<T>(path: &Path, msg: impl Into<String>) -> Result<T> {
    Err(FecError::Format { path: path.to_path_buf(), msg: msg.into() })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Raw idx3 image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return format_err(path, "file shorter than the idx3 header");
    }
    if be_u32(&bytes, 0) != IDX_IMAGES_MAGIC {
        return format_err(path, format!("bad magic {:#010x}, expected {IDX_IMAGES_MAGIC:#010x}", be_u32(&bytes, 0)));
    }
    let (n, rows, cols) = (be_u32(&bytes, 4) as usize, be_u32(&bytes, 8) as usize, be_u32(&bytes, 12) as usize);
    if rows == 0 || cols == 0 || bytes.len() - 16 != n * rows * cols {
        return format_err(path, format!("header says {n}×{rows}×{cols} but {} pixel bytes follow", bytes.len() - 16));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return format_err(path, "file shorter than the idx1 header");
    }
    if be_u32(&bytes, 0) != IDX_LABELS_MAGIC {
        return format_err(path, format!("bad magic {:#010x}, expected {IDX_LABELS_MAGIC:#010x}", be_u32(&bytes, 0)));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() - 8 != n {
        return format_err(path, format!("header says {n} labels but {} bytes follow", bytes.len() - 8));
    }
    Ok(bytes[8..].to_vec())
}

/// Per-channel mean and standard deviation; a zero deviation becomes 1.
pub fn channel_stats(images: &[f32], channels: usize, pixels: usize) -> ChannelStats {
    let n = images.len() / (channels * pixels);
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for i in 0..n {
            for &v in &images[(i * channels + c) * pixels..(i * channels + c + 1) * pixels] {
                s += v as f64;
                s2 += (v as f64) * (v as f64);
            }
        }
        let count = (n * pixels) as f64;
        let m = s / count;
        let var = (s2 / count - m * m).max(0.0);
        mean[c] = m;
        std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    ChannelStats { mean, std }
}

impl Dataset {
    /// Builds a dataset from raw `[0, 1]` pixels, normalizing with `stats`
    /// or with statistics computed here.
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw(
        mut images: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        split: Split,
        stats: Option<&ChannelStats>,
        origin: &Path,
    ) -> Result<Self> {
        let pixels = height * width;
        if images.len() != labels.len() * channels * pixels {
            return format_err(origin, format!("{} labels for {} pixel values", labels.len(), images.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return format_err(origin, format!("label {bad} outside [0, {num_classes})"));
        }
        let stats = match stats {
            Some(s) if s.mean.len() == channels && s.std.len() == channels => s.clone(),
            Some(s) => {
                return Err(FecError::Config(format!(
                    "normalization statistics have {} channels, data has {channels}",
                    s.mean.len()
                )))
            }
            None => channel_stats(&images, channels, pixels),
        };
        for (chunk_i, chunk) in images.chunks_mut(pixels).enumerate() {
            let c = chunk_i % channels;
            let (m, s) = (stats.mean[c] as f32, stats.std[c] as f32);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(Self { images, labels, channels, height, width, num_classes, split, stats })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.channels * self.height * self.width);
        }
    }

    /// Assembles `B × channels × size.0 × size.1`: integer nearest-neighbour
    /// upscaling, centered padding with the normalized value of a black
    /// pixel, grayscale replicated when more channels are wanted. `flips`
    /// mirrors individual samples horizontally.
    pub fn batch<T: Float>(&self, indices: &[usize], size: [usize; 2], channels: usize, flips: Option<&[bool]>) -> Result<Tensor<T>> {
        if self.channels != channels && self.channels != 1 {
            return Err(FecError::Config(format!(
                "data has {} channels, the model expects {channels}",
                self.channels
            )));
        }
        let [th, tw] = size;
        let scale = (th / self.height).min(tw / self.width);
        if scale == 0 {
            return Err(FecError::Config(format!(
                "{}×{} images do not fit a {th}×{tw} input",
                self.height, self.width
            )));
        }
        let (sh, sw) = (self.height * scale, self.width * scale);
        let (top, left) = ((th - sh) / 2, (tw - sw) / 2);
        let pixels = self.height * self.width;
        let mut out = Vec::with_capacity(indices.len() * channels * th * tw);
        for (k, &i) in indices.iter().enumerate() {
            let flip = flips.is_some_and(|f| f[k]);
            for c in 0..channels {
                let src_c = if self.channels == 1 { 0 } else { c };
                let pad = (-self.stats.mean[src_c] / self.stats.std[src_c]) as f32;
                let plane = &self.images[(i * self.channels + src_c) * pixels..(i * self.channels + src_c + 1) * pixels];
                for y in 0..th {
                    for x in 0..tw {
                        let inside = y >= top && y < top + sh && x >= left && x < left + sw;
                        let v = if inside {
                            let sy = (y - top) / scale;
                            let mut sx = (x - left) / scale;
                            if flip {
                                sx = self.width - 1 - sx;
                            }
                            plane[sy * self.width + sx]
                        } else {
                            pad
                        };
                        out.push(T::of(v as f64));
                    }
                }
            }
        }
        Tensor::new(vec![indices.len(), channels, th, tw], out)
    }
}

/// Loads one split. `path` is a directory holding either
/// `{train,t10k}-{images-idx3,labels-idx1}-ubyte` files or `{train,test}/`
/// class-named subdirectories of PNG images.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    split: Split,
    num_classes: usize,
    stats: Option<&ChannelStats>,
) -> Result<Dataset> {
    match format {
        DataFormat::IdxUbyte => {
            let prefix = split.idx_prefix();
            let img_path = path.join(format!("{prefix}-images-idx3-ubyte"));
            let lbl_path = path.join(format!("{prefix}-labels-idx1-ubyte"));
            load_idx(&img_path, &lbl_path, num_classes, split, stats)
        }
        DataFormat::ImageDirectory => load_image_directory(&path.join(split.dir_name()), num_classes, split, stats),
    }
}

pub fn load_idx(
    images: &Path,
    labels: &Path,
    num_classes: usize,
    split: Split,
    stats: Option<&ChannelStats>,
) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != n {
        return format_err(labels, format!("{} labels for {n} images", raw_labels.len()));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels_usize = raw_labels.iter().map(|&l| l as usize).collect();
    Dataset::from_raw(data, labels_usize, 1, rows, cols, num_classes, split, stats, labels)
}

fn load_image_directory(root: &Path, num_classes: usize, split: Split, stats: Option<&ChannelStats>) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.len() > num_classes {
        return format_err(root, format!("{} class directories for {num_classes} classes", classes.len()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dims: Option<(u32, u32)> = None;
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)?.to_rgb8();
            match dims {
                None => dims = Some(img.dimensions()),
                Some(d) if d != img.dimensions() => {
                    return format_err(&f, format!("image is {:?}, earlier images are {d:?}", img.dimensions()))
                }
                _ => {}
            }
            let (w, h) = img.dimensions();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data.push(img.get_pixel(x, y).0[c] as f32 / 255.0);
                    }
                }
            }
            labels.push(label);
        }
    }
    let (w, h) = dims.ok_or_else(|| FecError::Format { path: root.to_path_buf(), msg: "no PNG images found".into() })?;
    Dataset::from_raw(data, labels, 3, h as usize, w as usize, num_classes, split, stats, root)
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Random horizontal flips.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            base_lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            grad_clip: None,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(FecError::Config("epochs and batch_size must be positive".into()));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(FecError::Config("base_lr must be positive; weight_decay and eps non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(FecError::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(FecError::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(FecError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr`, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Learning rate at a continuous position in `[0, total_steps]`.
    pub fn lr_at(&self, position: f64) -> f64 {
        let warm = self.warmup_steps as f64;
        let total = self.total_steps as f64;
        if position < warm {
            self.base_lr * position / warm
        } else if total <= warm {
            self.base_lr
        } else {
            let progress = ((position - warm) / (total - warm)).clamp(0.0, 1.0);
            self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }

    /// Rate used by step `step` (evaluated at the middle of the step).
    pub fn lr_for_step(&self, step: usize) -> f64 {
        self.lr_at(step as f64 + 0.5)
    }
}

/// AdamW moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { beta1, beta2, eps, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn from_config(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// One update. Decay is decoupled from the adaptive step and applies to
    /// matrices only.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2, teps) = (T::of(b1), T::of(b2), T::of(self.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.decay { T::of(1.0 - lr * self.weight_decay) } else { T::one() };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = tb1 * *mi + (T::one() - tb1) * gi;
                *vi = tb2 * *vi + (T::one() - tb2) * gi * gi;
                *w *= decay;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + teps);
            }
        }
    }
}

/// Scales gradients so that their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Names the earliest NaN-carrying node on the tape.
fn nan_diagnostic<T: Float>(tape: &Tape<T>, model: &Model<T>, bound: &[crate::tensor::Var]) -> String {
    for id in 0..tape.len() {
        let v = crate::tensor::Var(id);
        if tape.value(v).has_nan() {
            if let Some(pi) = bound.iter().position(|&b| b == v) {
                return format!("parameter {} holds NaN", model.params.iter().nth(pi).unwrap().name);
            }
            return format!("first NaN tensor is node #{id} ({:?}, shape {:?})", tape.kind(v), tape.shape(v));
        }
    }
    "loss is NaN but no intermediate tensor is".into()
}

/// Forward, backward and one optimizer update on a batch. Returns the loss.
pub fn train_step<T: Float>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    opt: &mut AdamW<T>,
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let out = model.forward(&mut tape, &bound, images, false)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    let loss_value = tape.value(loss).item().as_f64();
    if !loss_value.is_finite() {
        return Err(FecError::Numerical(nan_diagnostic(&tape, model, &bound)));
    }
    tape.backward(loss)?;
    let mut grads = model.params.grads(&tape, &bound);
    drop(tape);
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    opt.update(&mut model.params, &grads, lr);
    Ok(loss_value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub loss: f64,
    pub count: usize,
}

/// Top-1 accuracy and mean cross-entropy from precomputed logits.
pub fn score_logits<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<Evaluation> {
    let (b, k) = logits.dims2()?;
    if b == 0 || labels.len() != b {
        return Err(FecError::Argument(format!("{} labels for {b} logit rows", labels.len())));
    }
    let preds = argmax_rows(logits.data(), k);
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut loss = 0.0;
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        let mx = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x.as_f64() - mx).exp()).sum();
        loss += z.ln() + mx - row[l].as_f64();
    }
    Ok(Evaluation { top1: correct as f64 / b as f64, loss: loss / b as f64, count: b })
}

/// Accuracy (ties to the lowest class) and mean loss over a dataset.
pub fn evaluate<T: Float>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(FecError::Argument("cannot evaluate on an empty dataset".into()));
    }
    let cfg = &model.config;
    let indices: Vec<usize> = (0..data.len()).collect();
    let parts = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let images = data.batch::<T>(chunk, cfg.input_size, cfg.in_channels, None)?;
            let (logits, _) = model.predict(&images, false)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let e = score_logits(&logits, &labels)?;
            Ok((e.top1 * e.count as f64, e.loss * e.count as f64, e.count))
        })
        .collect::<Result<Vec<_>>>()?;
    let (correct, loss, count) = parts.iter().fold((0.0, 0.0, 0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    Ok(Evaluation { top1: correct / count as f64, loss: loss / count as f64, count })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train<T: Float>(
    model: &mut Model<T>,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(FecError::Argument("empty training set".into()));
    }
    model.input_stats = Some(train_data.stats.clone());
    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let schedule = Schedule {
        base_lr: cfg.base_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::from_config(&model.params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mcfg = model.config.clone();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let flips: Vec<bool> = chunk.iter().map(|_| cfg.hflip && rng.gen_bool(0.5)).collect();
            let images = train_data.batch::<T>(chunk, mcfg.input_size, mcfg.in_channels, Some(&flips))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_data.labels[i]).collect();
            lr = schedule.lr_for_step(step);
            loss_sum += train_step(model, &images, &labels, &mut opt, lr, cfg.grad_clip)?;
            step += 1;
        }
        let val = val_data.map(|v| evaluate(model, v, cfg.batch_size.max(256))).transpose()?;
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_top1: val.map(|e| e.top1),
            val_loss: val.map(|e| e.loss),
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(history)
}
