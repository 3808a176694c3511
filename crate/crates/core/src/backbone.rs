//! Four-stage classifier: patch stem, clustering encode/pool stages, and a
//! mean-of-representatives linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{
    default_encode_centers, encode, pool, ClusterLayerParams, DispatchVariant, FeatureMap, LayerOptions, ResidualKind,
    SimilarityKind,
};
use crate::error::{FecError, Result};
use crate::hierarchy::{AssignmentRecord, LayerRole};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Geometry, Pooling, Tape, Tensor, Var};

pub const STAGES: usize = 4;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `[height, width]` in pixels.
    pub input_size: [usize; 2],
    pub in_channels: usize,
    /// Kernel size and stride of the patch stem.
    pub stem_stride: usize,
    pub stage_depths: [usize; STAGES],
    pub stage_channels: [usize; STAGES],
    pub encode_dims: [usize; STAGES],
    pub num_classes: usize,
    pub similarity: SimilarityKind,
    pub dispatch_variant: DispatchVariant,
    /// Per-pixel channel normalization before each projection.
    pub norm: bool,
    /// Linear layers in each dispatch MLP.
    pub mlp_depth: usize,
    /// Hidden width, as a multiple of the stage width, of the per-pixel
    /// feed-forward block after each encoding layer; 0 disables it.
    pub ffn_ratio: usize,
    pub residual: ResidualKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl ModelConfig {
    /// Desk-scale preset.
    pub fn micro() -> Self {
        Self {
            input_size: [64, 64],
            in_channels: 3,
            stem_stride: 4,
            stage_depths: [1, 1, 1, 1],
            stage_channels: [16, 32, 64, 128],
            encode_dims: [16, 16, 32, 32],
            num_classes: 10,
            similarity: SimilarityKind::Cosine,
            dispatch_variant: DispatchVariant::Eq7,
            norm: true,
            mlp_depth: 1,
            ffn_ratio: 0,
            residual: ResidualKind::PatchMerge,
            seed: 0,
        }
    }

    /// ImageNet-scale preset (about 5.5M parameters).
    pub fn small() -> Self {
        Self {
            input_size: [224, 224],
            in_channels: 3,
            stem_stride: 4,
            stage_depths: [4, 4, 16, 4],
            stage_channels: [64, 128, 320, 512],
            encode_dims: [96, 96, 192, 192],
            num_classes: 1000,
            similarity: SimilarityKind::Cosine,
            dispatch_variant: DispatchVariant::Eq7,
            norm: true,
            mlp_depth: 1,
            ffn_ratio: 0,
            residual: ResidualKind::AvgPool,
            seed: 0,
        }
    }

    /// Grid of each stage, checking every constraint on the way.
    pub fn stage_grids(&self) -> Result<[(usize, usize); STAGES]> {
        let [h, w] = self.input_size;
        let s = self.stem_stride;
        if s == 0 || h == 0 || w == 0 {
            return Err(FecError::Config("input size and stem stride must be positive".into()));
        }
        if h % s != 0 || w % s != 0 {
            return Err(FecError::Config(format!("stage 1: input {h}×{w} is not divisible by stem stride {s}")));
        }
        let mut grids = [(0, 0); STAGES];
        let (mut gh, mut gw) = (h / s, w / s);
        for (i, grid) in grids.iter_mut().enumerate() {
            if i > 0 {
                if gh % 2 != 0 || gw % 2 != 0 {
                    return Err(FecError::Config(format!(
                        "stage {}: a {gh}×{gw} grid cannot be pooled to half resolution",
                        i + 1
                    )));
                }
                gh /= 2;
                gw /= 2;
            }
            *grid = (gh, gw);
        }
        Ok(grids)
    }

    #[allow(clippy::needless_range_loop)]
    pub fn validate(&self) -> Result<()> {
        let grids = self.stage_grids()?;
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_depth == 0 {
            return Err(FecError::Config("in_channels, num_classes and mlp_depth must be positive".into()));
        }
        for i in 0..STAGES {
            if self.stage_channels[i] == 0 || self.encode_dims[i] == 0 {
                return Err(FecError::Config(format!("stage {}: channel counts must be positive", i + 1)));
            }
            let (gh, gw) = grids[i];
            let (oh, ow) = default_encode_centers(gh, gw);
            if self.stage_depths[i] > 0 && oh * ow >= gh * gw {
                return Err(FecError::Config(format!(
                    "stage {}: a {gh}×{gw} grid is too small for clustering-based encoding",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Encode records plus three pooling records.
    pub fn records_per_image(&self) -> usize {
        self.stage_depths.iter().sum::<usize>() + STAGES - 1
    }

    fn layer_options(&self) -> LayerOptions {
        LayerOptions {
            similarity: self.similarity,
            dispatch_variant: self.dispatch_variant,
            norm: self.norm,
            mlp_depth: self.mlp_depth,
            residual: self.residual,
        }
    }
}

/// Per-pixel `x + W₂·gelu(W₁·norm(x) + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub norm: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl FeedForward {
    fn new<T: Float>(params: &mut ParamStore<T>, prefix: &str, c: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: (
                params.add_full(format!("{prefix}.norm.scale"), &[c], 1.0),
                params.add_full(format!("{prefix}.norm.shift"), &[c], 0.0),
            ),
            fc1: (
                params.add_weight(format!("{prefix}.fc1.weight"), c, hidden, rng),
                params.add_full(format!("{prefix}.fc1.bias"), &[hidden], 0.0),
            ),
            fc2: (
                params.add_weight(format!("{prefix}.fc2.weight"), hidden, c, rng),
                params.add_full(format!("{prefix}.fc2.bias"), &[c], 0.0),
            ),
        }
    }

    fn forward<T: Float>(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        let h = tape.row_norm(x, bound[self.norm.0 .0], bound[self.norm.1 .0])?;
        let h = tape.linear(h, bound[self.fc1.0 .0], Some(bound[self.fc1.1 .0]))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, bound[self.fc2.0 .0], Some(bound[self.fc2.1 .0]))?;
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub grid: (usize, usize),
    pub encodes: Vec<ClusterLayerParams>,
    /// One per encoding layer when enabled, else empty.
    pub ffns: Vec<FeedForward>,
    /// Pooling layer into the next stage (absent after the last stage).
    pub pool: Option<ClusterLayerParams>,
}

/// Per-channel input statistics frozen from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stem_weight: ParamId,
    pub stem_bias: ParamId,
    pub stages: Vec<Stage>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    /// Normalization the model was trained under, if any.
    pub input_stats: Option<ChannelStats>,
}

/// Per image, every layer's assignment record in forward order.
pub type ImageRecords = Vec<Vec<AssignmentRecord>>;

/// Result of a forward pass recorded on a tape.
pub struct Forward {
    /// `B × num_classes`.
    pub logits: Var,
    pub records: Option<ImageRecords>,
}

/// Rearranges `B × C × H × W` into non-overlapping `s × s` patches,
/// `B·(H/s)·(W/s) × C·s·s`, rows in raster order.
pub fn patchify<T: Float>(images: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = images.shape() else {
        return Err(FecError::Dimension(format!("expected B×C×H×W images, got {:?}", images.shape())));
    };
    let (b, c, h, w) = (*b, *c, *h, *w);
    if h % stride != 0 || w % stride != 0 {
        return Err(FecError::Dimension(format!("{h}×{w} images do not tile into {stride}×{stride} patches")));
    }
    let (gh, gw) = (h / stride, w / stride);
    let cols = c * stride * stride;
    let src = images.data();
    let mut out = Vec::with_capacity(b * gh * gw * cols);
    for bi in 0..b {
        for i in 0..gh {
            for j in 0..gw {
                for ch in 0..c {
                    for ki in 0..stride {
                        let row = ((bi * c + ch) * h + i * stride + ki) * w + j * stride;
                        out.extend_from_slice(&src[row..row + stride]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * gh * gw, cols], out)
}

/// Builds a freshly initialized model.
#[allow(clippy::needless_range_loop)]
pub fn build_model<T: Float>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let grids = config.stage_grids()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    let opts = config.layer_options();
    let s = config.stem_stride;
    let c0 = config.stage_channels[0];
    let stem_weight = params.add_weight("stem.weight", config.in_channels * s * s, c0, &mut rng);
    let stem_bias = params.add_full("stem.bias", &[c0], 0.0);
    let mut stages = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let c = config.stage_channels[i];
        let grid = grids[i];
        let encodes = (0..config.stage_depths[i])
            .map(|l| {
                ClusterLayerParams::new_encode(
                    &mut params,
                    &format!("stage{}.encode{l}", i + 1),
                    c,
                    config.encode_dims[i],
                    default_encode_centers(grid.0, grid.1),
                    &opts,
                    &mut rng,
                )
            })
            .collect();
        let ffns = if config.ffn_ratio == 0 {
            Vec::new()
        } else {
            (0..config.stage_depths[i])
                .map(|l| FeedForward::new(&mut params, &format!("stage{}.ffn{l}", i + 1), c, c * config.ffn_ratio, &mut rng))
                .collect()
        };
        let pool = (i + 1 < STAGES).then(|| {
            ClusterLayerParams::new_pool(
                &mut params,
                &format!("stage{}.pool", i + 1),
                c,
                config.stage_channels[i + 1],
                &opts,
                &mut rng,
            )
        });
        stages.push(Stage { grid, encodes, ffns, pool });
    }
    let c_last = config.stage_channels[STAGES - 1];
    let head_weight = params.add_weight("head.weight", c_last, config.num_classes, &mut rng);
    let head_bias = params.add_full("head.bias", &[config.num_classes], 0.0);
    Ok(Model { config: config.clone(), params, stem_weight, stem_bias, stages, head_weight, head_bias, input_stats: None })
}

impl<T: Float> Model<T> {
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Every clustering layer in forward order.
    pub fn layers(&self) -> impl Iterator<Item = &ClusterLayerParams> {
        self.stages.iter().flat_map(|s| s.encodes.iter().chain(s.pool.iter()))
    }

    /// Records the forward pass of `images` (`B × C × H × W`) on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], images: &Tensor<T>, record: bool) -> Result<Forward> {
        let cfg = &self.config;
        let expected = [cfg.in_channels, cfg.input_size[0], cfg.input_size[1]];
        if images.rank() != 4 || images.shape()[1..] != expected {
            return Err(FecError::Dimension(format!(
                "expected a B×{}×{}×{} batch, got {:?}",
                expected[0],
                expected[1],
                expected[2],
                images.shape()
            )));
        }
        let batch = images.shape()[0];
        let patches = tape.constant(patchify(images, cfg.stem_stride)?);
        let stem = tape.linear(patches, bound[self.stem_weight.0], Some(bound[self.stem_bias.0]))?;
        let (gh, gw) = self.stages[0].grid;
        let mut feat = FeatureMap::new(stem, Geometry::new(batch, gh, gw));
        let mut records: Vec<Vec<AssignmentRecord>> = vec![Vec::new(); if record { batch } else { 0 }];
        let mut layer_id = 0;
        let mut keep = |tape: &Tape<T>, result: &crate::cluster::ClusterResult, role, id| {
            if record {
                for (per_image, r) in records.iter_mut().zip(result.records(tape, id, role)) {
                    per_image.push(r);
                }
            }
        };
        for stage in &self.stages {
            for (l, layer) in stage.encodes.iter().enumerate() {
                let (out, result) = encode(tape, &feat, layer, bound)?;
                keep(tape, &result, LayerRole::Encode, layer_id);
                layer_id += 1;
                feat = out;
                if let Some(ffn) = stage.ffns.get(l) {
                    feat = FeatureMap::new(ffn.forward(tape, bound, feat.var)?, feat.geom);
                }
            }
            if let Some(layer) = &stage.pool {
                let (out, result) = pool(tape, &feat, layer, bound)?;
                keep(tape, &result, LayerRole::Pool, layer_id);
                layer_id += 1;
                feat = out;
            }
        }
        let g = feat.geom;
        let mean = tape.ada_pool(feat.var, Pooling { input: g, out_h: 1, out_w: 1 })?;
        let logits = tape.linear(mean, bound[self.head_weight.0], Some(bound[self.head_bias.0]))?;
        Ok(Forward { logits, records: record.then_some(records) })
    }

    /// Inference without gradients; returns logits and optional records.
    pub fn predict(&self, images: &Tensor<T>, record: bool) -> Result<(Tensor<T>, Option<ImageRecords>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, images, record)?;
        Ok((tape.value(out.logits).clone(), out.records))
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem_weight: self.stem_weight,
            stem_bias: self.stem_bias,
            stages: self.stages.clone(),
            head_weight: self.head_weight,
            head_bias: self.head_bias,
            input_stats: self.input_stats.clone(),
        }
    }
}
