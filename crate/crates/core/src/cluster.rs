//! Clustering-based pooling and encoding layers.
//!
//! A layer projects its input grid into key and value spaces, seeds `O`
//! centers by adaptive average pooling of those projections, assigns every
//! pixel to its most similar center, and averages each cluster (center
//! included) into a representative. Pooling layers emit the representatives
//! (plus a pooled residual) as the next, coarser grid. Encoding layers send
//! each representative back to its members through a similarity gate and a
//! small MLP.
//!
//! The hard assignment is plain data, so no gradient ever flows through the
//! argmax. Learning reaches the clustering through the values, the pooled
//! centers and the similarity gate.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FecError, Result};
use crate::hierarchy::{AssignmentRecord, LayerRole};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{argmax_rows, Float, Geometry, Pooling, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    Cosine,
    #[serde(alias = "dot")]
    DotProduct,
    /// Negated Euclidean distance, so that larger is always more similar.
    #[serde(alias = "euclidean_negated")]
    Euclidean,
}

impl FromStr for SimilarityKind {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "dot" | "dot_product" => Ok(Self::DotProduct),
            "euclidean" | "euclidean_negated" => Ok(Self::Euclidean),
            _ => Err(FecError::Config(format!("unknown similarity `{s}` (cosine|dot|euclidean)"))),
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::DotProduct => "dot",
            Self::Euclidean => "euclidean",
        })
    }
}

/// How an encoding layer sends representatives back to pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchVariant {
    /// Each pixel receives only its own cluster's representative, gated by
    /// its similarity to that cluster.
    #[default]
    Eq7,
    /// Each pixel receives the gated sum of every representative.
    S1Dense,
}

impl FromStr for DispatchVariant {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq7" => Ok(Self::Eq7),
            "s1_dense" => Ok(Self::S1Dense),
            _ => Err(FecError::Config(format!("unknown dispatch variant `{s}` (eq7|s1_dense)"))),
        }
    }
}

impl fmt::Display for DispatchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Eq7 => "eq7",
            Self::S1Dense => "s1_dense",
        })
    }
}

/// A stacked feature map: `geom.rows() × channels` on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub geom: Geometry,
}

impl FeatureMap {
    pub fn new(var: Var, geom: Geometry) -> Self {
        Self { var, geom }
    }

    pub fn channels<T: Float>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.var)[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Keeps the grid; centers laid out on `centers` (rows, cols).
    Encode { centers: (usize, usize) },
    /// Halves the grid.
    Pool,
}

/// Parameter handles of one clustering layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLayerParams {
    pub kind: LayerKind,
    pub similarity: SimilarityKind,
    pub dispatch_variant: DispatchVariant,
    pub in_channels: usize,
    pub proj_channels: usize,
    /// Per-pixel channel normalization (scale, shift) applied to the input.
    pub norm: Option<(ParamId, ParamId)>,
    pub key_proj: ParamId,
    pub value_proj: ParamId,
    /// Similarity gate `(alpha, beta)`; encoding layers only.
    pub gate: Option<(ParamId, ParamId)>,
    /// Dispatch MLP as `(weight, bias)` linear layers with GELU in between;
    /// encoding layers only.
    pub dispatch_mlp: Vec<(ParamId, ParamId)>,
    /// Linear map of the 2×2-pooled input; pooling layers only.
    pub pool_residual: Option<ParamId>,
    pub residual: ResidualKind,
}

/// Construction options shared by the layer constructors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOptions {
    pub similarity: SimilarityKind,
    pub dispatch_variant: DispatchVariant,
    pub norm: bool,
    pub mlp_depth: usize,
    pub residual: ResidualKind,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self { similarity: SimilarityKind::Cosine, dispatch_variant: DispatchVariant::Eq7, norm: true, mlp_depth: 1, residual: ResidualKind::AvgPool }
    }
}

impl ClusterLayerParams {
    fn common<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        c_proj: usize,
        opts: &LayerOptions,
        rng: &mut impl Rng,
    ) -> (Option<(ParamId, ParamId)>, ParamId, ParamId) {
        let norm = opts.norm.then(|| {
            (
                store.add_full(format!("{prefix}.norm.scale"), &[c], 1.0),
                store.add_full(format!("{prefix}.norm.shift"), &[c], 0.0),
            )
        });
        let key_proj = store.add_weight(format!("{prefix}.key_proj"), c, c_proj, rng);
        let value_proj = store.add_weight(format!("{prefix}.value_proj"), c, c_proj, rng);
        (norm, key_proj, value_proj)
    }

    /// Encoding layer `C → C` with `C′ = c_proj` and the given center grid.
    pub fn new_encode<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        c_proj: usize,
        centers: (usize, usize),
        opts: &LayerOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let (norm, key_proj, value_proj) = Self::common(store, prefix, c, c_proj, opts, rng);
        let gate = Some((
            store.add_full(format!("{prefix}.alpha"), &[], 1.0),
            store.add_full(format!("{prefix}.beta"), &[], 0.0),
        ));
        let dispatch_mlp = (0..opts.mlp_depth.max(1))
            .map(|i| {
                let fan_in = if i == 0 { c_proj } else { c };
                let suffix = if opts.mlp_depth <= 1 { String::new() } else { format!(".{i}") };
                (
                    store.add_weight(format!("{prefix}.mlp{suffix}.weight"), fan_in, c, rng),
                    store.add_full(format!("{prefix}.mlp{suffix}.bias"), &[c], 0.0),
                )
            })
            .collect();
        Self {
            kind: LayerKind::Encode { centers },
            similarity: opts.similarity,
            dispatch_variant: opts.dispatch_variant,
            in_channels: c,
            proj_channels: c_proj,
            norm,
            key_proj,
            value_proj,
            gate,
            dispatch_mlp,
            pool_residual: None,
            residual: opts.residual,
        }
    }

    /// Pooling layer `C → C′` halving the grid.
    pub fn new_pool<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        c_out: usize,
        opts: &LayerOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let (norm, key_proj, value_proj) = Self::common(store, prefix, c, c_out, opts, rng);
        let fan_in = match opts.residual {
            ResidualKind::AvgPool => c,
            ResidualKind::PatchMerge => 4 * c,
        };
        let pool_residual = Some(store.add_weight(format!("{prefix}.pool_residual"), fan_in, c_out, rng));
        Self {
            kind: LayerKind::Pool,
            similarity: opts.similarity,
            dispatch_variant: opts.dispatch_variant,
            in_channels: c,
            proj_channels: c_out,
            norm,
            key_proj,
            value_proj,
            gate: None,
            dispatch_mlp: Vec::new(),
            pool_residual,
            residual: opts.residual,
        }
    }

    /// Every parameter this layer owns, grouped as `(group name, ids)`.
    pub fn groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut out = Vec::new();
        if let Some((s, b)) = self.norm {
            out.push(("norm", vec![s, b]));
        }
        out.push(("key_proj", vec![self.key_proj]));
        out.push(("value_proj", vec![self.value_proj]));
        if let Some((a, b)) = self.gate {
            out.push(("alpha", vec![a]));
            out.push(("beta", vec![b]));
        }
        if !self.dispatch_mlp.is_empty() {
            out.push(("mlp_weight", self.dispatch_mlp.iter().map(|p| p.0).collect()));
            out.push(("mlp_bias", self.dispatch_mlp.iter().map(|p| p.1).collect()));
        }
        if let Some(r) = self.pool_residual {
            out.push(("pool_residual", vec![r]));
        }
        out
    }
}

/// Grid path of a pooling layer's residual connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// 2×2 average pool, then a `C → C′` map.
    #[default]
    AvgPool,
    /// The four cells of each 2×2 block concatenated, then a `4C → C′` map.
    PatchMerge,
}

impl FromStr for ResidualKind {
    type Err = FecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg_pool" => Ok(Self::AvgPool),
            "patch_merge" => Ok(Self::PatchMerge),
            _ => Err(FecError::Config(format!("unknown residual kind `{s}` (avg_pool|patch_merge)"))),
        }
    }
}

impl fmt::Display for ResidualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AvgPool => "avg_pool",
            Self::PatchMerge => "patch_merge",
        })
    }
}

/// Everything one clustering pass produces.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// `batch·N × O` similarity matrix.
    pub similarity: Var,
    /// Per-pixel center index in `[0, O)`, image-local.
    pub assignment: Vec<usize>,
    /// `batch·O × C′`.
    pub representatives: Var,
    pub center_keys: Var,
    pub center_values: Var,
    pub keys: Var,
    pub values: Var,
    pub input: Geometry,
    pub centers: Geometry,
}

impl ClusterResult {
    pub fn centers_per_image(&self) -> usize {
        self.centers.pixels()
    }

    /// Splits the pass into one record per image.
    pub fn records<T: Float>(&self, tape: &Tape<T>, layer_id: usize, role: LayerRole) -> Vec<AssignmentRecord> {
        let n = self.input.pixels();
        let o = self.centers.pixels();
        let reps = tape.value(self.representatives);
        let c = reps.shape()[1];
        (0..self.input.batch)
            .map(|b| AssignmentRecord {
                layer_id,
                role,
                input_grid: (self.input.height, self.input.width),
                center_grid: (self.centers.height, self.centers.width),
                assignment: self.assignment[b * n..(b + 1) * n].iter().map(|&a| a as u32).collect(),
                representatives: Tensor::new(
                    vec![o, c],
                    reps.data()[b * o * c..(b + 1) * o * c].iter().map(|x| x.as_f64()).collect(),
                )
                .expect("representative snapshot"),
            })
            .collect()
    }
}

fn project<T: Float>(tape: &mut Tape<T>, feat: &FeatureMap, layer: &ClusterLayerParams, bound: &[Var]) -> Result<Var> {
    match layer.norm {
        Some((s, b)) => tape.row_norm(feat.var, bound[s.0], bound[b.0]),
        None => Ok(feat.var),
    }
}

/// Projected keys/values of the input and their adaptively pooled centers.
pub struct Centers {
    pub center_keys: Var,
    pub center_values: Var,
    pub keys: Var,
    pub values: Var,
    pub grid: Geometry,
}

/// Projects `feat` (already normalized if the layer normalizes) and seeds
/// `grid.0 × grid.1` centers per image.
pub fn init_centers<T: Float>(
    tape: &mut Tape<T>,
    feat: &FeatureMap,
    layer: &ClusterLayerParams,
    bound: &[Var],
    grid: (usize, usize),
) -> Result<Centers> {
    let g = feat.geom;
    let (oh, ow) = grid;
    if oh == 0 || ow == 0 || oh > g.height || ow > g.width {
        return Err(FecError::Config(format!(
            "cannot lay {oh}×{ow} centers on a {}×{} grid",
            g.height, g.width
        )));
    }
    let keys = tape.matmul(feat.var, bound[layer.key_proj.0])?;
    let values = tape.matmul(feat.var, bound[layer.value_proj.0])?;
    let pooling = Pooling { input: g, out_h: oh, out_w: ow };
    let center_keys = tape.ada_pool(keys, pooling)?;
    let center_values = tape.ada_pool(values, pooling)?;
    Ok(Centers { center_keys, center_values, keys, values, grid: pooling.output() })
}

/// `batch·N × O` similarity between pixel keys and center keys.
pub fn similarity_matrix<T: Float>(
    tape: &mut Tape<T>,
    keys: Var,
    center_keys: Var,
    kind: SimilarityKind,
    batch: usize,
) -> Result<Var> {
    tape.similarity(keys, center_keys, kind, batch)
}

/// Hard, exclusive assignment: row-wise argmax, ties to the lowest center.
pub fn assign<T: Float>(similarity: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, o) = similarity.dims2()?;
    Ok(argmax_rows(similarity.data(), o))
}

/// Mean of each center value and its members' values.
pub fn aggregate_representatives<T: Float>(
    tape: &mut Tape<T>,
    values: Var,
    center_values: Var,
    assignment: &[usize],
    batch: usize,
) -> Result<Var> {
    tape.aggregate(values, center_values, assignment, batch)
}

/// Full clustering pass over an already-normalized input.
pub fn cluster<T: Float>(
    tape: &mut Tape<T>,
    feat: &FeatureMap,
    layer: &ClusterLayerParams,
    bound: &[Var],
    grid: (usize, usize),
) -> Result<ClusterResult> {
    let batch = feat.geom.batch;
    let centers = init_centers(tape, feat, layer, bound, grid)?;
    let similarity = similarity_matrix(tape, centers.keys, centers.center_keys, layer.similarity, batch)?;
    let assignment = assign(tape.value(similarity))?;
    let representatives = aggregate_representatives(tape, centers.values, centers.center_values, &assignment, batch)?;
    Ok(ClusterResult {
        similarity,
        assignment,
        representatives,
        center_keys: centers.center_keys,
        center_values: centers.center_values,
        keys: centers.keys,
        values: centers.values,
        input: feat.geom,
        centers: centers.grid,
    })
}

/// Sends representatives back to pixels and adds the result to `feat`.
pub fn dispatch<T: Float>(
    tape: &mut Tape<T>,
    feat: &FeatureMap,
    result: &ClusterResult,
    layer: &ClusterLayerParams,
    bound: &[Var],
) -> Result<FeatureMap> {
    let (alpha, beta) = layer
        .gate
        .ok_or_else(|| FecError::Contract("dispatch needs an encoding layer's gate".into()))?;
    let (alpha, beta) = (bound[alpha.0], bound[beta.0]);
    let batch = feat.geom.batch;
    let mut d = match layer.dispatch_variant {
        DispatchVariant::Eq7 => {
            let picked = tape.pick_per_row(result.similarity, &result.assignment)?;
            let shifted = tape.scale_shift(picked, alpha, beta)?;
            let gate = tape.sigmoid(shifted);
            let n = result.input.pixels();
            let o = result.centers.pixels();
            let rows: Vec<usize> = result.assignment.iter().enumerate().map(|(r, &a)| (r / n) * o + a).collect();
            let gathered = tape.gather_rows(result.representatives, &rows)?;
            tape.mul(gathered, gate)?
        }
        DispatchVariant::S1Dense => {
            let shifted = tape.scale_shift(result.similarity, alpha, beta)?;
            let gate = tape.sigmoid(shifted);
            tape.batch_matmul(gate, result.representatives, batch)?
        }
    };
    for (i, &(w, b)) in layer.dispatch_mlp.iter().enumerate() {
        if i > 0 {
            d = tape.gelu(d);
        }
        d = tape.linear(d, bound[w.0], Some(bound[b.0]))?;
    }
    let out = tape.add(feat.var, d)?;
    Ok(FeatureMap::new(out, feat.geom))
}

/// Default encoding center grid: half the input grid in each direction.
pub fn default_encode_centers(height: usize, width: usize) -> (usize, usize) {
    ((height / 2).max(1), (width / 2).max(1))
}

/// Clustering-based pooling: `H×W×C → H/2×W/2×C′`.
pub fn pool<T: Float>(
    tape: &mut Tape<T>,
    feat: &FeatureMap,
    layer: &ClusterLayerParams,
    bound: &[Var],
) -> Result<(FeatureMap, ClusterResult)> {
    let g = feat.geom;
    if !g.height.is_multiple_of(2) || !g.width.is_multiple_of(2) {
        return Err(FecError::Config(format!(
            "pooling needs an even grid, got {}×{}",
            g.height, g.width
        )));
    }
    let residual_w = layer
        .pool_residual
        .ok_or_else(|| FecError::Contract("pool needs a pooling layer's residual map".into()))?;
    let input = FeatureMap::new(project(tape, feat, layer, bound)?, g);
    let grid = (g.height / 2, g.width / 2);
    let result = cluster(tape, &input, layer, bound, grid)?;
    let cells = match layer.residual {
        ResidualKind::AvgPool => tape.ada_pool(input.var, Pooling { input: g, out_h: grid.0, out_w: grid.1 })?,
        ResidualKind::PatchMerge => {
            let index = patch_merge_rows(g);
            let gathered = tape.gather_rows(input.var, &index)?;
            let c = tape.shape(input.var)[1];
            tape.reshape(gathered, &[g.rows() / 4, 4 * c])?
        }
    };
    let residual = tape.matmul(cells, bound[residual_w.0])?;
    let out = tape.add(residual, result.representatives)?;
    Ok((FeatureMap::new(out, result.centers), result))
}

/// Row order that lays out each 2×2 block's cells (row-major within the
/// block) consecutively, blocks in row-major order per image.
fn patch_merge_rows(g: Geometry) -> Vec<usize> {
    let (h, w) = (g.height, g.width);
    let mut out = Vec::with_capacity(g.rows());
    for b in 0..g.batch {
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out.push(b * h * w + (y + dy) * w + x + dx);
                }
            }
        }
    }
    out
}

/// Clustering-based encoding: same grid and channels out as in.
pub fn encode<T: Float>(
    tape: &mut Tape<T>,
    feat: &FeatureMap,
    layer: &ClusterLayerParams,
    bound: &[Var],
) -> Result<(FeatureMap, ClusterResult)> {
    let LayerKind::Encode { centers } = layer.kind else {
        return Err(FecError::Contract("encode called with a pooling layer".into()));
    };
    let g = feat.geom;
    if centers.0 * centers.1 >= g.pixels() {
        return Err(FecError::Config(format!(
            "encoding needs fewer centers than pixels: {}×{} centers on a {}×{} grid",
            centers.0, centers.1, g.height, g.width
        )));
    }
    let input = FeatureMap::new(project(tape, feat, layer, bound)?, g);
    let result = cluster(tape, &input, layer, bound, centers)?;
    let out = dispatch(tape, feat, &result, layer, bound)?;
    Ok((out, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bare() -> LayerOptions {
        LayerOptions { norm: false, ..LayerOptions::default() }
    }

    fn identity(c: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[c, c]);
        for i in 0..c {
            t.data_mut()[i * c + i] = 1.0;
        }
        t
    }

    #[test]
    fn centers_of_a_two_by_two_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let layer = ClusterLayerParams::new_encode(&mut store, "l", 2, 2, (1, 1), &bare(), &mut rng);
        store.set(layer.key_proj, identity(2)).unwrap();
        store.set(layer.value_proj, identity(2)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_f64(&[4, 2], &[1., 0., 3., 0., 5., 0., 7., 0.]).unwrap());
        let feat = FeatureMap::new(x, Geometry::new(1, 2, 2));
        let c = init_centers(&mut tape, &feat, &layer, &bound, (1, 1)).unwrap();
        assert_eq!(tape.value(c.center_keys).data(), &[4.0, 0.0]);
        assert_eq!(tape.value(c.center_values).data(), &[4.0, 0.0]);
    }

    #[test]
    fn too_many_centers_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let layer = ClusterLayerParams::new_encode(&mut store, "l", 2, 2, (2, 2), &bare(), &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        let feat = FeatureMap::new(x, Geometry::new(1, 2, 2));
        assert!(matches!(init_centers(&mut tape, &feat, &layer, &bound, (3, 1)), Err(FecError::Config(_))));
        assert!(matches!(encode(&mut tape, &feat, &layer, &bound), Err(FecError::Config(_))));
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::<f64>::new();
        let k = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let c = tape.constant(Tensor::from_f64(&[1, 2], &[1., 0.]).unwrap());
        let m = similarity_matrix(&mut tape, k, c, SimilarityKind::Cosine, 1).unwrap();
        let got = tape.value(m).data();
        assert!((got[0] - 1.0 / (1.0 + 1e-8)).abs() < 1e-15 && got[1].abs() < 1e-12);
    }

    #[test]
    fn assign_examples() {
        let m = Tensor::<f64>::from_f64(&[2, 2], &[0.9, 0.1, 0.2, 0.8]).unwrap();
        assert_eq!(assign(&m).unwrap(), vec![0, 1]);
        let tie = Tensor::<f64>::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        assert_eq!(assign(&tie).unwrap(), vec![0]);
    }

    #[test]
    fn aggregate_examples() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_f64(&[1, 2], &[2., 4.]).unwrap());
        let cv = tape.constant(Tensor::from_f64(&[2, 2], &[0., 0., 3., 5.]).unwrap());
        let r = aggregate_representatives(&mut tape, v, cv, &[0], 1).unwrap();
        // cluster 0 holds the single member, cluster 1 is empty
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 5.0]);
    }

    #[test]
    fn odd_grid_cannot_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let layer = ClusterLayerParams::new_pool(&mut store, "p", 2, 3, &bare(), &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[6, 2]));
        let feat = FeatureMap::new(x, Geometry::new(1, 3, 2));
        assert!(matches!(pool(&mut tape, &feat, &layer, &bound), Err(FecError::Config(_))));
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("dot".parse::<SimilarityKind>().unwrap(), SimilarityKind::DotProduct);
        assert_eq!("s1_dense".parse::<DispatchVariant>().unwrap(), DispatchVariant::S1Dense);
        assert!("manhattan".parse::<SimilarityKind>().is_err());
    }
}
