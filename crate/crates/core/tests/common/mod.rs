//! Independent straight-line reference implementations used by the
//! integration tests. Everything here works on plain nested vectors and
//! shares no code with the library's kernels.

#![allow(dead_code)]

pub mod fixtures;

use fec::cluster::{ClusterLayerParams, DispatchVariant, LayerKind, ResidualKind, SimilarityKind};
use fec::params::{ParamId, ParamStore};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Windows `[floor(i·n/o), ceil((i+1)·n/o))` over a row-major `h × w` grid.
pub fn adaptive_avg_pool(x: &Mat, h: usize, w: usize, oh: usize, ow: usize) -> Mat {
    let c = x[0].len();
    let mut out = Vec::new();
    for i in 0..oh {
        let (y0, y1) = (i * h / oh, ((i + 1) * h).div_ceil(oh));
        for j in 0..ow {
            let (x0, x1) = (j * w / ow, ((j + 1) * w).div_ceil(ow));
            let mut acc = vec![0.0; c];
            for y in y0..y1 {
                for xx in x0..x1 {
                    for ch in 0..c {
                        acc[ch] += x[y * w + xx][ch];
                    }
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            out.push(acc.into_iter().map(|v| v / count).collect());
        }
    }
    out
}

pub fn layer_norm(x: &Mat, scale: &[f64], shift: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let c = row.len() as f64;
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / sd * scale[j] + shift[j]).collect()
        })
        .collect()
}

pub fn similarity(k: &[f64], c: &[f64], kind: SimilarityKind) -> f64 {
    let dot: f64 = k.iter().zip(c).map(|(a, b)| a * b).sum();
    match kind {
        SimilarityKind::Cosine => {
            let nk = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nk * nc + 1e-8)
        }
        SimilarityKind::DotProduct => dot,
        SimilarityKind::Euclidean => -k.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
    }
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Plain-data copy of one clustering layer's weights.
pub struct LayerWeights {
    pub norm: Option<(Vec<f64>, Vec<f64>)>,
    pub key: Mat,
    pub value: Mat,
    pub gate: Option<(f64, f64)>,
    pub mlp: Vec<(Mat, Vec<f64>)>,
    pub residual: Option<Mat>,
    pub residual_kind: ResidualKind,
    pub similarity: SimilarityKind,
    pub dispatch: DispatchVariant,
    pub centers: Option<(usize, usize)>,
}

fn mat_of(store: &ParamStore<f64>, id: ParamId) -> Mat {
    let v = store.value(id);
    to_mat(v.data(), v.shape()[1])
}

fn vec_of(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

impl LayerWeights {
    pub fn of(store: &ParamStore<f64>, layer: &ClusterLayerParams) -> Self {
        Self {
            norm: layer.norm.map(|(s, b)| (vec_of(store, s), vec_of(store, b))),
            key: mat_of(store, layer.key_proj),
            value: mat_of(store, layer.value_proj),
            gate: layer.gate.map(|(a, b)| (store.value(a).data()[0], store.value(b).data()[0])),
            mlp: layer.dispatch_mlp.iter().map(|&(w, b)| (mat_of(store, w), vec_of(store, b))).collect(),
            residual: layer.pool_residual.map(|r| mat_of(store, r)),
            residual_kind: layer.residual,
            similarity: layer.similarity,
            dispatch: layer.dispatch_variant,
            centers: match layer.kind {
                LayerKind::Encode { centers } => Some(centers),
                LayerKind::Pool => None,
            },
        }
    }
}

/// One image's clustering: assignment and representatives.
fn cluster_image(x: &Mat, h: usize, w: usize, lw: &LayerWeights, oh: usize, ow: usize) -> (Mat, Vec<usize>, Mat) {
    let keys = matmul(x, &lw.key);
    let values = matmul(x, &lw.value);
    let ck = adaptive_avg_pool(&keys, h, w, oh, ow);
    let cv = adaptive_avg_pool(&values, h, w, oh, ow);
    let sim: Mat = keys.iter().map(|k| ck.iter().map(|c| similarity(k, c, lw.similarity)).collect()).collect();
    let assign: Vec<usize> = sim.iter().map(|r| argmax(r)).collect();
    let mut reps = cv.clone();
    let mut counts = vec![1.0; cv.len()];
    for (n, &a) in assign.iter().enumerate() {
        counts[a] += 1.0;
        for ch in 0..reps[a].len() {
            reps[a][ch] += values[n][ch];
        }
    }
    for (r, &cnt) in reps.iter_mut().zip(&counts) {
        r.iter_mut().for_each(|v| *v /= cnt);
    }
    (sim, assign, reps)
}

fn normed(x: &Mat, lw: &LayerWeights) -> Mat {
    match &lw.norm {
        Some((s, b)) => layer_norm(x, s, b),
        None => x.clone(),
    }
}

/// Result of a reference layer on one image.
pub struct Reference {
    pub out: Mat,
    pub assign: Vec<usize>,
    /// `N × O` similarities behind the assignment.
    pub sim: Mat,
}

impl Reference {
    /// Whether choosing `center` for pixel `n` is within `rel` of the best
    /// similarity, i.e. an alternative answer to a numerical tie.
    pub fn ties_with_best(&self, n: usize, center: usize, rel: f64) -> bool {
        let row = &self.sim[n];
        let best = row[self.assign[n]];
        (best - row[center]).abs() <= rel * best.abs().max(1.0)
    }
}

/// Encoding layer on one image.
pub fn encode_image(x: &Mat, h: usize, w: usize, lw: &LayerWeights) -> Reference {
    let (oh, ow) = lw.centers.expect("encoding layer");
    let xn = normed(x, lw);
    let (sim, assign, reps) = cluster_image(&xn, h, w, lw, oh, ow);
    let (alpha, beta) = lw.gate.expect("gate");
    let cp = reps[0].len();
    let mut d: Mat = (0..x.len())
        .map(|n| match lw.dispatch {
            DispatchVariant::Eq7 => {
                let g = sigmoid(alpha * sim[n][assign[n]] + beta);
                reps[assign[n]].iter().map(|v| g * v).collect()
            }
            DispatchVariant::S1Dense => {
                let mut acc = vec![0.0; cp];
                for (o, r) in reps.iter().enumerate() {
                    let g = sigmoid(alpha * sim[n][o] + beta);
                    for ch in 0..cp {
                        acc[ch] += g * r[ch];
                    }
                }
                acc
            }
        })
        .collect();
    for (i, (wm, b)) in lw.mlp.iter().enumerate() {
        if i > 0 {
            d = d.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        }
        d = matmul(&d, wm).into_iter().map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect()).collect();
    }
    let out = x.iter().zip(&d).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    Reference { out, assign, sim }
}

/// Pooling layer on one image (even `h`, `w`).
pub fn pool_image(x: &Mat, h: usize, w: usize, lw: &LayerWeights) -> Reference {
    let (oh, ow) = (h / 2, w / 2);
    let xn = normed(x, lw);
    let (sim, assign, reps) = cluster_image(&xn, h, w, lw, oh, ow);
    let cells: Mat = match lw.residual_kind {
        ResidualKind::AvgPool => adaptive_avg_pool(&xn, h, w, oh, ow),
        ResidualKind::PatchMerge => {
            let mut out = Vec::new();
            for y in 0..oh {
                for xx in 0..ow {
                    let mut row = Vec::new();
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        row.extend_from_slice(&xn[(2 * y + dy) * w + 2 * xx + dx]);
                    }
                    out.push(row);
                }
            }
            out
        }
    };
    let res = matmul(&cells, lw.residual.as_ref().expect("pool residual"));
    let out = res.iter().zip(&reps).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    Reference { out, assign, sim }
}
