//! Forward constructors and backward rules for every op the tape records.

use super::tape::{OpKind, Tape, Var};
use super::{argmax_rows, Float, Tensor};
use crate::cluster::SimilarityKind;
use crate::error::{dim_err, FecError, Result};

const NORM_EPS: f64 = 1e-5;
/// Guards cosine denominators against zero vectors.
pub const COSINE_EPS: f64 = 1e-8;

/// Stacked feature-map layout: `batch` images of `height × width` rows each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(batch: usize, height: usize, width: usize) -> Self {
        Self { batch, height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.batch * self.pixels()
    }
}

/// Adaptive average pooling of a stacked grid onto an `out_h × out_w` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pooling {
    pub input: Geometry,
    pub out_h: usize,
    pub out_w: usize,
}

impl Pooling {
    /// Window `[start, end)` along one axis for output cell `i`.
    pub fn window(i: usize, input: usize, output: usize) -> (usize, usize) {
        let start = i * input / output;
        let end = ((i + 1) * input).div_ceil(output);
        (start, end)
    }

    pub fn output(&self) -> Geometry {
        Geometry::new(self.input.batch, self.out_h, self.out_w)
    }

    /// Visits every (output row, input row, 1/window size) triple.
    fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        let g = self.input;
        for b in 0..g.batch {
            for oi in 0..self.out_h {
                let (r0, r1) = Self::window(oi, g.height, self.out_h);
                for oj in 0..self.out_w {
                    let (c0, c1) = Self::window(oj, g.width, self.out_w);
                    let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
                    let out_row = (b * self.out_h + oi) * self.out_w + oj;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            f(out_row, (b * g.height + r) * g.width + c, inv);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    ScaleShift { x: Var, scale: Var, shift: Var },
    Sigmoid { x: Var },
    Gelu { x: Var },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Reshape { x: Var },
    RowNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    AdaPool { x: Var, pooling: Pooling },
    Similarity { keys: Var, centers: Var, kind: SimilarityKind, batch: usize, key_norms: Vec<T>, center_norms: Vec<T> },
    Aggregate { values: Var, centers: Var, target: Vec<usize>, counts: Vec<usize> },
    GatherRows { src: Var, index: Vec<usize> },
    PickPerRow { m: Var, index: Vec<usize> },
    BatchMatMul { a: Var, b: Var, batch: usize },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } | Op::BatchMatMul { a, b, .. } => {
                vec![*a, *b]
            }
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::ScaleShift { x, scale, shift } => vec![*x, *scale, *shift],
            Op::Sigmoid { x }
            | Op::Gelu { x }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Reshape { x }
            | Op::AdaPool { x, .. } => vec![*x],
            Op::RowNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Similarity { keys, centers, .. } => vec![*keys, *centers],
            Op::Aggregate { values, centers, .. } => vec![*values, *centers],
            Op::GatherRows { src, .. } => vec![*src],
            Op::PickPerRow { m, .. } => vec![*m],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }

    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::ScaleShift { .. } => OpKind::ScaleShift,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::RowNorm { .. } => OpKind::RowNorm,
            Op::AdaPool { .. } => OpKind::AdaPool,
            Op::Similarity { .. } => OpKind::Similarity,
            Op::Aggregate { .. } => OpKind::Aggregate,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::PickPerRow { .. } => OpKind::PickPerRow,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
        }
    }
}

/// Number of elements of `big` covered by each element of `small` when
/// `small` broadcasts over trailing singleton extents (or is a scalar).
fn trailing_broadcast(big: &[usize], small: &[usize]) -> Option<usize> {
    let small_numel: usize = small.iter().product();
    let big_numel: usize = big.iter().product();
    if small_numel == 1 {
        return Some(big_numel);
    }
    if small.len() != big.len() {
        return None;
    }
    let split = small.iter().zip(big).position(|(s, b)| s != b).unwrap_or(small.len());
    if small[split..].iter().all(|&d| d == 1) {
        Some(big_numel / small_numel)
    } else {
        None
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Float>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Tape<T> {
    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| FecError::Dimension(format!("{what} must be a matrix, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner dimensions differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    /// Elementwise sum; `b` may broadcast over trailing singleton extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.broadcast_inner(a, b, "add")?;
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bv[i / inner]).collect();
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), data)?, Op::Add { a, b }))
    }

    /// Elementwise product; `b` may broadcast over trailing singleton extents.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.broadcast_inner(a, b, "mul")?;
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, &x)| x * bv[i / inner]).collect();
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), data)?, Op::Mul { a, b }))
    }

    fn broadcast_inner(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        trailing_broadcast(self.shape(a), self.shape(b)).ok_or_else(|| {
            FecError::Dimension(format!(
                "{what}: shape {:?} does not broadcast onto {:?}",
                self.shape(b),
                self.shape(a)
            ))
        })
    }

    /// Adds a per-column bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "add_bias input")?;
        if self.value(bias).len() != c {
            return dim_err(format!("bias {:?} does not match {:?}", self.shape(bias), self.shape(x)));
        }
        let bv = self.value(bias).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + bv[i % c]).collect();
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), data)?, Op::AddBias { x, bias }))
    }

    /// `scale · x + shift` with scalar `scale` and `shift`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        if self.value(scale).len() != 1 || self.value(shift).len() != 1 {
            return dim_err("scale_shift expects scalar scale and shift");
        }
        let s = self.value(scale).item();
        let t = self.value(shift).item();
        let out = self.value(x).map(|v| s * v + t);
        Ok(self.push(out, Op::ScaleShift { x, scale, shift }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x, axis: None })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let n = T::of(v.len() as f64);
        self.push(Tensor::scalar(s / n), Op::Mean { x, axis: None })
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis(x, axis, false)?;
        Ok(self.push(out, Op::Sum { x, axis: Some(axis) }))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis(x, axis, true)?;
        Ok(self.push(out, Op::Mean { x, axis: Some(axis) }))
    }

    fn reduce_axis(&self, x: Var, axis: usize, mean: bool) -> Result<Tensor<T>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(FecError::Domain(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = T::one() / T::of(extent as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Tensor::new(out_shape, out)
    }

    /// Indices of the maximum along `axis` (ties to the lowest index). The
    /// result is plain data: nothing flows back through it.
    pub fn max_index(&self, x: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(FecError::Domain(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let src = self.value(x).data();
        if inner == 1 {
            return Ok(argmax_rows(src, extent));
        }
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| src[(o * extent + e) * inner + i];
                let mut best = 0;
                for e in 1..extent {
                    if at(e) > at(best) {
                        best = e;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Per-row standardization over channels followed by a learned affine.
    pub fn row_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, c) = self.dims2(x, "row_norm input")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return dim_err(format!("row_norm affine must have {c} channels"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * c];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        let inv_c = T::one() / T::of(c as f64);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + bt[j];
            }
        }
        let value = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(value, Op::RowNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Adaptive average pooling over stacked grids.
    pub fn ada_pool(&mut self, x: Var, pooling: Pooling) -> Result<Var> {
        let (rows, c) = self.dims2(x, "ada_pool input")?;
        if rows != pooling.input.rows() {
            return dim_err(format!(
                "ada_pool input has {rows} rows but the grid {}×{}×{} needs {}",
                pooling.input.batch,
                pooling.input.height,
                pooling.input.width,
                pooling.input.rows()
            ));
        }
        if pooling.out_h == 0 || pooling.out_w == 0 || pooling.out_h > pooling.input.height || pooling.out_w > pooling.input.width
        {
            return Err(FecError::Config(format!(
                "cannot pool a {}×{} grid onto {}×{}",
                pooling.input.height, pooling.input.width, pooling.out_h, pooling.out_w
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); pooling.output().rows() * c];
        pooling.for_each(|o, i, inv| {
            let w = T::of(inv);
            for j in 0..c {
                out[o * c + j] += src[i * c + j] * w;
            }
        });
        let value = Tensor::new(vec![pooling.output().rows(), c], out)?;
        Ok(self.push(value, Op::AdaPool { x, pooling }))
    }

    /// Per-image similarity between `keys` (`batch·N × C`) and `centers`
    /// (`batch·O × C`), giving `batch·N × O`.
    pub fn similarity(&mut self, keys: Var, centers: Var, kind: SimilarityKind, batch: usize) -> Result<Var> {
        let (kr, c) = self.dims2(keys, "similarity keys")?;
        let (cr, c2) = self.dims2(centers, "similarity centers")?;
        if c != c2 {
            return dim_err(format!(
                "similarity channel mismatch: keys {:?}, centers {:?}",
                self.shape(keys),
                self.shape(centers)
            ));
        }
        if batch == 0 || kr % batch != 0 || cr % batch != 0 {
            return dim_err(format!("similarity rows {kr}/{cr} do not split into {batch} images"));
        }
        let (n, o) = (kr / batch, cr / batch);
        let kd = self.value(keys).data();
        let cd = self.value(centers).data();
        let norms = |d: &[T]| d.chunks(c).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect::<Vec<_>>();
        let key_norms = norms(kd);
        let center_norms = norms(cd);
        let mut out = vec![T::zero(); kr * o];
        for b in 0..batch {
            let kb = &kd[b * n * c..(b + 1) * n * c];
            let cb = &cd[b * o * c..(b + 1) * o * c];
            let ob = &mut out[b * n * o..(b + 1) * n * o];
            match kind {
                SimilarityKind::Cosine | SimilarityKind::DotProduct => {
                    T::gemm(n, c, o, kb, false, cb, true, ob, false);
                    if kind == SimilarityKind::Cosine {
                        for i in 0..n {
                            let nk = key_norms[b * n + i];
                            for j in 0..o {
                                ob[i * o + j] /= nk * center_norms[b * o + j] + T::of(COSINE_EPS);
                            }
                        }
                    }
                }
                SimilarityKind::Euclidean => {
                    for i in 0..n {
                        let k = &kb[i * c..(i + 1) * c];
                        for j in 0..o {
                            let ctr = &cb[j * c..(j + 1) * c];
                            let d2: T = k.iter().zip(ctr).map(|(&a, &b)| (a - b) * (a - b)).sum();
                            ob[i * o + j] = -d2.sqrt();
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![kr, o], out)?;
        Ok(self.push(value, Op::Similarity { keys, centers, kind, batch, key_norms, center_norms }))
    }

    /// Representatives: for every center, the mean of its own value and the
    /// values of the rows assigned to it. `assignment[r]` is the per-image
    /// center index of row `r`.
    pub fn aggregate(&mut self, values: Var, centers: Var, assignment: &[usize], batch: usize) -> Result<Var> {
        let (vr, c) = self.dims2(values, "aggregate values")?;
        let (cr, c2) = self.dims2(centers, "aggregate centers")?;
        if c != c2 || assignment.len() != vr || batch == 0 || vr % batch != 0 || cr % batch != 0 {
            return dim_err(format!(
                "aggregate: values {:?}, centers {:?}, {} assignments, batch {batch}",
                self.shape(values),
                self.shape(centers),
                assignment.len()
            ));
        }
        let (n, o) = (vr / batch, cr / batch);
        let mut target = Vec::with_capacity(vr);
        for (r, &a) in assignment.iter().enumerate() {
            if a >= o {
                return Err(FecError::Argument(format!("assignment {a} out of range for {o} centers")));
            }
            target.push((r / n) * o + a);
        }
        let mut counts = vec![0usize; cr];
        for &t in &target {
            counts[t] += 1;
        }
        let mut out = self.value(centers).data().to_vec();
        let vd = self.value(values).data();
        for (r, &t) in target.iter().enumerate() {
            for j in 0..c {
                out[t * c + j] += vd[r * c + j];
            }
        }
        for (t, &cnt) in counts.iter().enumerate() {
            let inv = T::one() / T::of((1 + cnt) as f64);
            out[t * c..(t + 1) * c].iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(vec![cr, c], out)?;
        Ok(self.push(value, Op::Aggregate { values, centers, target, counts }))
    }

    /// Rows of `src` picked by global row index.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(src, "gather_rows source")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(FecError::Argument(format!("gather index {bad} out of range for {rows} rows")));
        }
        let sd = self.value(src).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&sd[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![index.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows { src, index: index.to_vec() }))
    }

    /// `out[r] = m[r, index[r]]`, shaped as a column.
    pub fn pick_per_row(&mut self, m: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(m, "pick_per_row input")?;
        if index.len() != rows || index.iter().any(|&i| i >= cols) {
            return dim_err(format!("pick_per_row: {} indices for {:?}", index.len(), self.shape(m)));
        }
        let md = self.value(m).data();
        let out = index.iter().enumerate().map(|(r, &i)| md[r * cols + i]).collect();
        let value = Tensor::new(vec![rows, 1], out)?;
        Ok(self.push(value, Op::PickPerRow { m, index: index.to_vec() }))
    }

    /// Per-image product of `a` (`batch·N × O`) and `b` (`batch·O × C`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ar, o) = self.dims2(a, "batch_matmul lhs")?;
        let (br, c) = self.dims2(b, "batch_matmul rhs")?;
        if batch == 0 || ar % batch != 0 || br != batch * o {
            return dim_err(format!(
                "batch_matmul: {:?} and {:?} do not split into {batch} products",
                self.shape(a),
                self.shape(b)
            ));
        }
        let n = ar / batch;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); ar * c];
        for bi in 0..batch {
            T::gemm(
                n,
                o,
                c,
                &ad[bi * n * o..(bi + 1) * n * o],
                false,
                &bd[bi * o * c..(bi + 1) * o * c],
                false,
                &mut out[bi * n * c..(bi + 1) * n * c],
                false,
            );
        }
        let value = Tensor::new(vec![ar, c], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, batch }))
    }

    /// Mean softmax cross-entropy of `logits` (`B × K`) against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.dims2(logits, "logits")?;
        if labels.len() != b {
            return dim_err(format!("{} labels for {b} logit rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(FecError::Argument(format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &ld[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[r * k + j] = e;
                z += e;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + mx - row[labels[r]];
        }
        loss /= T::of(b as f64);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, labels: labels.to_vec(), probs }))
    }

    /// `x · w` followed by an optional bias.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Gradient contributions of node `id` for upstream gradient `g`.
    pub(crate) fn input_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let rg = |v: Var| self.requires_grad(v);
        let val = |v: Var| self.value(v).data();
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, val(*b), true, &mut ga, false);
                    out.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a), true, g, false, &mut gb, false);
                    out.push((*b, gb));
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    let inner = g.len() / self.value(*b).len();
                    out.push((*b, g.chunks(inner).map(|ch| ch.iter().copied().sum()).collect()));
                }
            }
            Op::Mul { a, b } => {
                let inner = g.len() / self.value(*b).len();
                let (av, bv) = (val(*a), val(*b));
                if rg(*a) {
                    out.push((*a, g.iter().enumerate().map(|(i, &gi)| gi * bv[i / inner]).collect()));
                }
                if rg(*b) {
                    let gb = g
                        .chunks(inner)
                        .zip(av.chunks(inner))
                        .map(|(gc, ac)| gc.iter().zip(ac).map(|(&x, &y)| x * y).sum())
                        .collect();
                    out.push((*b, gb));
                }
            }
            Op::AddBias { x, bias } => {
                if rg(*x) {
                    out.push((*x, g.to_vec()));
                }
                if rg(*bias) {
                    let c = self.value(*bias).len();
                    let mut gb = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::ScaleShift { x, scale, shift } => {
                let s = self.value(*scale).item();
                if rg(*x) {
                    out.push((*x, g.iter().map(|&v| v * s).collect()));
                }
                if rg(*scale) {
                    let gs = g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum();
                    out.push((*scale, vec![gs]));
                }
                if rg(*shift) {
                    out.push((*shift, vec![g.iter().copied().sum()]));
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                out.push((*x, g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect()));
            }
            Op::Gelu { x } => {
                out.push((*x, g.iter().zip(val(*x)).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect()));
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let shape = self.shape(*x);
                let mean = matches!(node.op, Op::Mean { .. });
                let gx = match axis {
                    None => {
                        let n = self.value(*x).len();
                        let v = if mean { g[0] / T::of(n as f64) } else { g[0] };
                        vec![v; n]
                    }
                    Some(axis) => {
                        let (outer, extent, inner) = split_axis(shape, *axis);
                        let scale = if mean { T::one() / T::of(extent as f64) } else { T::one() };
                        let mut gx = vec![T::zero(); outer * extent * inner];
                        for o in 0..outer {
                            for e in 0..extent {
                                for i in 0..inner {
                                    gx[(o * extent + e) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        gx
                    }
                };
                out.push((*x, gx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::RowNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.value(*gamma).len();
                let gam = val(*gamma);
                if rg(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    let inv_c = T::one() / T::of(c as f64);
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            m1 += d;
                            m2 += d * hr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            gx[r * c + j] = *is * (gr[j] * gam[j] - m1 - hr[j] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
                if rg(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gamma, gg));
                }
                if rg(*beta) {
                    let mut gb = vec![T::zero(); c];
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                    out.push((*beta, gb));
                }
            }
            Op::AdaPool { x, pooling } => {
                let c = self.shape(*x)[1];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                pooling.for_each(|o, i, inv| {
                    let w = T::of(inv);
                    for j in 0..c {
                        gx[i * c + j] += g[o * c + j] * w;
                    }
                });
                out.push((*x, gx));
            }
            Op::Similarity { keys, centers, kind, batch, key_norms, center_norms } => {
                let (gk, gc) = similarity_backward(
                    *kind,
                    *batch,
                    self.value(*keys),
                    self.value(*centers),
                    &node.value,
                    key_norms,
                    center_norms,
                    g,
                );
                if rg(*keys) {
                    out.push((*keys, gk));
                }
                if rg(*centers) {
                    out.push((*centers, gc));
                }
            }
            Op::Aggregate { values, centers, target, counts } => {
                let c = self.shape(*values)[1];
                let inv: Vec<T> = counts.iter().map(|&n| T::one() / T::of((1 + n) as f64)).collect();
                if rg(*values) {
                    let mut gv = vec![T::zero(); target.len() * c];
                    for (r, &t) in target.iter().enumerate() {
                        for j in 0..c {
                            gv[r * c + j] = g[t * c + j] * inv[t];
                        }
                    }
                    out.push((*values, gv));
                }
                if rg(*centers) {
                    let gc = g.iter().enumerate().map(|(i, &v)| v * inv[i / c]).collect();
                    out.push((*centers, gc));
                }
            }
            Op::GatherRows { src, index } => {
                let c = self.shape(*src)[1];
                let mut gs = vec![T::zero(); self.value(*src).len()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        gs[i * c + j] += g[r * c + j];
                    }
                }
                out.push((*src, gs));
            }
            Op::PickPerRow { m, index } => {
                let cols = self.shape(*m)[1];
                let mut gm = vec![T::zero(); self.value(*m).len()];
                for (r, &i) in index.iter().enumerate() {
                    gm[r * cols + i] = g[r];
                }
                out.push((*m, gm));
            }
            Op::BatchMatMul { a, b, batch } => {
                let (ar, o) = self.value(*a).dims2().unwrap();
                let c = self.shape(*b)[1];
                let n = ar / batch;
                let (ad, bd) = (val(*a), val(*b));
                if rg(*a) {
                    let mut ga = vec![T::zero(); ar * o];
                    for bi in 0..*batch {
                        T::gemm(
                            n,
                            c,
                            o,
                            &g[bi * n * c..(bi + 1) * n * c],
                            false,
                            &bd[bi * o * c..(bi + 1) * o * c],
                            true,
                            &mut ga[bi * n * o..(bi + 1) * n * o],
                            false,
                        );
                    }
                    out.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); batch * o * c];
                    for bi in 0..*batch {
                        T::gemm(
                            o,
                            n,
                            c,
                            &ad[bi * n * o..(bi + 1) * n * o],
                            true,
                            &g[bi * n * c..(bi + 1) * n * c],
                            false,
                            &mut gb[bi * o * c..(bi + 1) * o * c],
                            false,
                        );
                    }
                    out.push((*b, gb));
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * k + l] -= T::one();
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, gl));
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn similarity_backward<T: Float>(
    kind: SimilarityKind,
    batch: usize,
    keys: &Tensor<T>,
    centers: &Tensor<T>,
    m: &Tensor<T>,
    key_norms: &[T],
    center_norms: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let c = keys.shape()[1];
    let n = keys.shape()[0] / batch;
    let o = centers.shape()[0] / batch;
    let (kd, cd, md) = (keys.data(), centers.data(), m.data());
    let mut gk = vec![T::zero(); kd.len()];
    let mut gc = vec![T::zero(); cd.len()];
    let eps = T::of(COSINE_EPS);
    for b in 0..batch {
        let kb = &kd[b * n * c..(b + 1) * n * c];
        let cb = &cd[b * o * c..(b + 1) * o * c];
        let gb = &g[b * n * o..(b + 1) * n * o];
        let mb = &md[b * n * o..(b + 1) * n * o];
        let gkb = &mut gk[b * n * c..(b + 1) * n * c];
        let gcb = &mut gc[b * o * c..(b + 1) * o * c];
        match kind {
            SimilarityKind::DotProduct => {
                T::gemm(n, o, c, gb, false, cb, false, gkb, false);
                T::gemm(o, n, c, gb, true, kb, false, gcb, false);
            }
            SimilarityKind::Cosine => {
                let kn = &key_norms[b * n..(b + 1) * n];
                let cn = &center_norms[b * o..(b + 1) * o];
                // gd = g / d, where d = |k||c| + eps
                let mut gd = vec![T::zero(); n * o];
                let mut key_coef = vec![T::zero(); n];
                let mut center_coef = vec![T::zero(); o];
                for i in 0..n {
                    for j in 0..o {
                        let v = gb[i * o + j] / (kn[i] * cn[j] + eps);
                        gd[i * o + j] = v;
                        let gm = v * mb[i * o + j];
                        key_coef[i] += gm * cn[j];
                        center_coef[j] += gm * kn[i];
                    }
                }
                T::gemm(n, o, c, &gd, false, cb, false, gkb, false);
                T::gemm(o, n, c, &gd, true, kb, false, gcb, false);
                for i in 0..n {
                    if kn[i] > T::zero() {
                        let s = key_coef[i] / kn[i];
                        for j in 0..c {
                            gkb[i * c + j] -= s * kb[i * c + j];
                        }
                    }
                }
                for j in 0..o {
                    if cn[j] > T::zero() {
                        let s = center_coef[j] / cn[j];
                        for t in 0..c {
                            gcb[j * c + t] -= s * cb[j * c + t];
                        }
                    }
                }
            }
            SimilarityKind::Euclidean => {
                for i in 0..n {
                    for j in 0..o {
                        let dist = -mb[i * o + j];
                        if dist <= T::zero() {
                            continue;
                        }
                        let w = gb[i * o + j] / dist;
                        for t in 0..c {
                            let diff = kb[i * c + t] - cb[j * c + t];
                            gkb[i * c + t] -= w * diff;
                            gcb[j * c + t] += w * diff;
                        }
                    }
                }
            }
        }
    }
    (gk, gc)
}
