//! Segment pyramids built from the cluster assignments of a forward pass.
//!
//! Level 1 groups stem blocks by the first pooling layer's assignment. Each
//! later level unions the previous level's segments whose clusters were
//! assigned to the same center by the next pooling layer, so every level is
//! a coarsening of the one below it.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FecError, Result};
use crate::tensor::Tensor;

/// Version of the JSON documents written by [`AssignmentDump`] and
/// [`LabelDump`].
pub const JSON_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Encode,
    Pool,
}

/// Hard assignment of one layer for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentRecord {
    /// Position of the layer in forward order.
    pub layer_id: usize,
    pub role: LayerRole,
    pub input_grid: (usize, usize),
    pub center_grid: (usize, usize),
    /// Center index of every input pixel, row-major over `input_grid`.
    pub assignment: Vec<u32>,
    /// `O × C′` representatives at the time of assignment.
    pub representatives: Tensor<f64>,
}

impl AssignmentRecord {
    pub fn pixels(&self) -> usize {
        self.input_grid.0 * self.input_grid.1
    }

    pub fn centers(&self) -> usize {
        self.center_grid.0 * self.center_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.assignment.len() != self.pixels() {
            return Err(FecError::Contract(format!(
                "layer {}: {} assignments for a {}×{} grid",
                self.layer_id,
                self.assignment.len(),
                self.input_grid.0,
                self.input_grid.1
            )));
        }
        if let Some(bad) = self.assignment.iter().find(|&&a| a as usize >= self.centers()) {
            return Err(FecError::Contract(format!(
                "layer {}: assignment {bad} out of range for {} centers",
                self.layer_id,
                self.centers()
            )));
        }
        Ok(())
    }
}

/// One segment of a pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    /// Cluster id at this level.
    pub cluster: u32,
    /// Clusters of the level below (stem blocks for level 1) merged into it.
    pub children: Vec<u32>,
    /// Sorted base-pixel indices.
    pub pixels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    /// Number of cluster ids available at this level (the layer's `O`).
    pub clusters: usize,
    /// Cluster id of every base pixel.
    pub labels: Vec<u32>,
    /// Non-empty clusters in ascending id order.
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPyramid {
    pub height: usize,
    pub width: usize,
    pub levels: Vec<Level>,
}

impl SegmentPyramid {
    pub fn level(&self, level: usize) -> Result<&Level> {
        if level == 0 || level > self.levels.len() {
            return Err(FecError::Argument(format!(
                "level {level} out of range (pyramid has levels 1..={})",
                self.levels.len()
            )));
        }
        Ok(&self.levels[level - 1])
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// Links consecutive pooling-layer assignments into a pyramid over the
/// `base_block`-scaled pixel grid.
pub fn build_pyramid(records: &[AssignmentRecord], base_block: usize) -> Result<SegmentPyramid> {
    let first = records.first().ok_or_else(|| FecError::Contract("no pooling records".into()))?;
    if base_block == 0 {
        return Err(FecError::Contract("base block must be positive".into()));
    }
    for r in records {
        r.validate()?;
    }
    for pair in records.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let halves = next.center_grid.0 * 2 == next.input_grid.0 && next.center_grid.1 * 2 == next.input_grid.1;
        if next.input_grid != prev.center_grid || !halves {
            return Err(FecError::Contract(format!(
                "records {} and {} are not consecutive: {:?}->{:?} then {:?}->{:?}",
                prev.layer_id, next.layer_id, prev.input_grid, prev.center_grid, next.input_grid, next.center_grid
            )));
        }
    }
    let (gh, gw) = first.input_grid;
    let (height, width) = (gh * base_block, gw * base_block);
    // id of every base pixel at the current level; starts as its stem block
    let mut ids: Vec<u32> = (0..height * width)
        .map(|p| {
            let (y, x) = (p / width, p % width);
            ((y / base_block) * gw + x / base_block) as u32
        })
        .collect();
    let mut levels = Vec::with_capacity(records.len());
    for record in records {
        let mut children: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (child, &parent) in record.assignment.iter().enumerate() {
            children.entry(parent).or_default().push(child as u32);
        }
        let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (p, id) in ids.iter_mut().enumerate() {
            *id = record.assignment[*id as usize];
            members.entry(*id).or_default().push(p);
        }
        let segments = members
            .into_iter()
            .map(|(cluster, pixels)| {
                let mut kids = children.remove(&cluster).unwrap_or_default();
                kids.sort_unstable();
                Segment { cluster, children: kids, pixels }
            })
            .collect();
        levels.push(Level { clusters: record.centers(), labels: ids.clone(), segments });
    }
    Ok(SegmentPyramid { height, width, levels })
}

/// Outcome of a K-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances of points to the mean of their cluster.
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-4;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // every point coincides with a seed already
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

/// Lloyd's algorithm with k-means++ seeding over the rows of `points`.
pub fn kmeans(points: &Tensor<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let (n, c) = points.dims2()?;
    if k == 0 || k > n {
        return Err(FecError::Argument(format!("k = {k} must lie in 1..={n}")));
    }
    let rows: Vec<&[f64]> = points.data().chunks(c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(&rows, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut inertia = 0.0;
        for (i, p) in rows.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            labels[i] = j;
            inertia += d;
        }
        let prev = history.last().copied();
        history.push(inertia);
        let mut sums = vec![vec![0.0; c]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p.iter()).for_each(|(s, &v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if let Some(prev) = prev {
            if prev - inertia <= KMEANS_TOL * prev {
                break;
            }
        }
    }
    let inertia = rows.iter().zip(&labels).map(|(p, &l)| dist2(p, &centroids[l])).sum();
    Ok(KMeans { labels, centroids, inertia, history })
}

/// Reduces `O` representatives to `k` groups; returns a label per row.
pub fn kmeans_reduce(representatives: &Tensor<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans(representatives, k, seed)?.labels)
}

/// Square-window median over an integer label image. Windows are clipped
/// at the border; an even count takes the lower middle value.
pub fn median_filter(labels: &[u32], height: usize, width: usize, radius: usize) -> Vec<u32> {
    if radius == 0 {
        return labels.to_vec();
    }
    let mut out = Vec::with_capacity(labels.len());
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(height));
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(width));
            window.clear();
            for yy in y0..y1 {
                window.extend_from_slice(&labels[yy * width + x0..yy * width + x1]);
            }
            window.sort_unstable();
            out.push(window[(window.len() - 1) / 2]);
        }
    }
    out
}

/// Deterministic display color for a label.
pub fn palette(label: u32) -> [u8; 3] {
    let hue = (label as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.7, 0.95);
    let sector = hue.floor();
    let f = hue - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Per-pixel labels of one pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl Segmentation {
    pub fn distinct(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    /// Palette image, alpha-blended 50/50 over `base` when given.
    pub fn overlay(&self, base: Option<&RgbImage>) -> Result<RgbImage> {
        if let Some(b) = base {
            if (b.width() as usize, b.height() as usize) != (self.width, self.height) {
                return Err(FecError::Dimension(format!(
                    "overlay base is {}×{}, labels are {}×{}",
                    b.width(),
                    b.height(),
                    self.width,
                    self.height
                )));
            }
        }
        Ok(RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let color = palette(self.labels[y as usize * self.width + x as usize]);
            match base {
                None => Rgb(color),
                Some(b) => {
                    let px = b.get_pixel(x, y).0;
                    Rgb([0, 1, 2].map(|i| (px[i] as u16 + color[i] as u16).div_ceil(2) as u8))
                }
            }
        }))
    }
}

/// Label map of `level`, optionally relabelled through K-means labels (one
/// per cluster id of that level) and median filtered.
pub fn render_segmentation(
    pyramid: &SegmentPyramid,
    level: usize,
    kmeans_labels: Option<&[usize]>,
    median_radius: usize,
) -> Result<Segmentation> {
    let lvl = pyramid.level(level)?;
    let raw: Vec<u32> = match kmeans_labels {
        None => lvl.labels.clone(),
        Some(map) => {
            if map.len() != lvl.clusters {
                return Err(FecError::Argument(format!(
                    "{} K-means labels for {} clusters at level {level}",
                    map.len(),
                    lvl.clusters
                )));
            }
            lvl.labels.iter().map(|&c| map[c as usize] as u32).collect()
        }
    };
    Ok(Segmentation {
        height: pyramid.height,
        width: pyramid.width,
        labels: median_filter(&raw, pyramid.height, pyramid.width, median_radius),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDump {
    pub layer_id: usize,
    pub role: LayerRole,
    pub input_grid: [usize; 2],
    pub center_grid: [usize; 2],
    pub assignment: Vec<u32>,
}

/// Machine-readable dump of every recorded assignment of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentDump {
    pub schema: String,
    pub version: u32,
    pub layers: Vec<LayerDump>,
}

impl AssignmentDump {
    pub fn new(records: &[AssignmentRecord]) -> Self {
        Self {
            schema: "fec.assignments".into(),
            version: JSON_SCHEMA_VERSION,
            layers: records
                .iter()
                .map(|r| LayerDump {
                    layer_id: r.layer_id,
                    role: r.role,
                    input_grid: [r.input_grid.0, r.input_grid.1],
                    center_grid: [r.center_grid.0, r.center_grid.1],
                    assignment: r.assignment.clone(),
                })
                .collect(),
        }
    }
}

/// Rendered labels of one pyramid level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDump {
    pub schema: String,
    pub version: u32,
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub kmeans_k: Option<usize>,
    pub median_radius: usize,
    pub segments: usize,
    pub labels: Vec<u32>,
}

impl LabelDump {
    pub fn new(seg: &Segmentation, level: usize, kmeans_k: Option<usize>, median_radius: usize) -> Self {
        Self {
            schema: "fec.segmentation".into(),
            version: JSON_SCHEMA_VERSION,
            level,
            height: seg.height,
            width: seg.width,
            kmeans_k,
            median_radius,
            segments: seg.distinct(),
            labels: seg.labels.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: usize, input: (usize, usize), centers: (usize, usize), assignment: Vec<u32>) -> AssignmentRecord {
        let o = centers.0 * centers.1;
        AssignmentRecord {
            layer_id: id,
            role: LayerRole::Pool,
            input_grid: input,
            center_grid: centers,
            assignment,
            representatives: Tensor::zeros(&[o, 1]),
        }
    }

    #[test]
    fn single_record_two_segments() {
        // a 2×2 grid pooled onto 1×2 (only the halving rule between records is enforced)
        let p = build_pyramid(&[record(0, (2, 2), (1, 2), vec![0, 0, 1, 1])], 1).unwrap();
        assert_eq!(p.depth(), 1);
        let l = &p.levels[0];
        assert_eq!(l.segments.len(), 2);
        assert_eq!(l.segments[0].pixels, vec![0, 1]);
        assert_eq!(l.segments[1].pixels, vec![2, 3]);
    }

    #[test]
    fn two_records_collapse_to_one_segment() {
        let recs = [record(0, (2, 2), (1, 2), vec![0, 0, 1, 1]), record(1, (1, 2), (1, 1), vec![0, 0])];
        // (1,2) -> (1,1) does not halve the rows, so this is rejected
        assert!(build_pyramid(&recs, 2).is_err());
        let recs = [
            record(0, (4, 4), (2, 2), (0..16).map(|i| ((i / 4) / 2 * 2 + (i % 4) / 2) as u32).collect()),
            record(1, (2, 2), (1, 1), vec![0; 4]),
        ];
        let p = build_pyramid(&recs, 2).unwrap();
        assert_eq!(p.levels[0].segments.len(), 4);
        assert_eq!(p.levels[1].segments.len(), 1);
        assert_eq!(p.levels[1].segments[0].pixels.len(), 64);
        assert_eq!(p.levels[1].segments[0].children, vec![0, 1, 2, 3]);
    }

    #[test]
    fn non_consecutive_records_are_rejected() {
        let recs = [record(0, (4, 4), (2, 2), vec![0; 16]), record(1, (4, 4), (2, 2), vec![0; 16])];
        assert!(matches!(build_pyramid(&recs, 1), Err(FecError::Contract(_))));
        assert!(matches!(build_pyramid(&[], 1), Err(FecError::Contract(_))));
    }

    #[test]
    fn kmeans_trivial_cases() {
        let pts = Tensor::<f64>::from_f64(&[4, 2], &[0., 0., 1., 0., 5., 5., 9., 1.]).unwrap();
        let all = kmeans(&pts, 4, 3).unwrap();
        let mut l = all.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2, 3]);
        assert_eq!(all.inertia, 0.0);
        assert_eq!(kmeans_reduce(&pts, 1, 3).unwrap(), vec![0; 4]);
        assert!(matches!(kmeans(&pts, 5, 3), Err(FecError::Argument(_))));
    }

    #[test]
    fn kmeans_with_duplicates_terminates() {
        let pts = Tensor::<f64>::from_f64(&[4, 1], &[1., 1., 1., 1.]).unwrap();
        let r = kmeans(&pts, 3, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn median_identity_and_uniform() {
        let labels = vec![1, 2, 3, 4, 5, 6];
        assert_eq!(median_filter(&labels, 2, 3, 0), labels);
        let flat = vec![7; 12];
        assert_eq!(median_filter(&flat, 3, 4, 2), flat);
    }

    #[test]
    fn render_rejects_bad_level() {
        let p = build_pyramid(&[record(0, (2, 2), (1, 2), vec![0, 0, 1, 1])], 1).unwrap();
        assert!(render_segmentation(&p, 0, None, 0).is_err());
        assert!(render_segmentation(&p, 2, None, 0).is_err());
        let seg = render_segmentation(&p, 1, Some(&[1, 1]), 0).unwrap();
        assert_eq!(seg.distinct(), 1);
    }

    #[test]
    fn palette_is_deterministic_and_varied() {
        assert_eq!(palette(3), palette(3));
        assert_ne!(palette(0), palette(1));
    }
}
