use std::collections::HashMap;

use crate::params::{ParamId, ParamStore, StoreGrads};
use crate::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    BceWithLogits(Var, Matrix),
    CrossEntropy(Var, Vec<Option<usize>>),
    Im2Col(Var, Im2ColGeom),
    SeqMix(Var, Var),
}

#[derive(Clone, Copy, Debug)]
struct Im2ColGeom {
    height: usize,
    width: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// A recording of one forward computation.
///
/// Graphs are cheap to build and are meant to be thrown away after each
/// forward/backward pair. They hold copies of the parameters they bind, so a
/// `&ParamStore` can be shared across threads that each build their own graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant or differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter; repeated binds of the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.bound.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{what}: shape mismatch {:?} vs {:?}", x.shape(), y.shape());
        Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, "add", |p, q| p + q);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, "sub", |p, q| p - q);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, "mul", |p, q| p * q);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(x.cols(), r.cols(), "add_row width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "mul_row expects a single row");
        assert_eq!(x.cols(), r.cols(), "mul_row width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds a constant matrix; no gradient flows into the constant.
    /// Used for additive masks that may contain `-inf`.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape(), "add_const shape mismatch");
        let out = Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(c.data()).map(|(p, q)| p + q).collect(),
        );
        self.push(out, Op::AddConst(a))
    }

    /// Adds the same scalar to every element.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// Row-wise softmax. `-inf` entries get probability zero; a row must keep
    /// at least one finite entry.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (each `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, xv.cols()), "layer_norm gamma shape");
        assert_eq!(b.shape(), (1, xv.cols()), "layer_norm beta shape");
        let cols = xv.cols();
        let mut normed = Matrix::zeros(xv.rows(), cols);
        let mut out = Matrix::zeros(xv.rows(), cols);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normed.set(r, c, n);
                out.set(r, c, n * g.data()[c] + b.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "column slice out of range");
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Picks rows by index (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(indices.len(), x.cols());
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < x.rows(), "gather index {idx} out of range {}", x.rows());
            out.row_mut(i).copy_from_slice(x.row(idx));
        }
        self.push(out, Op::GatherRows(a, indices.to_vec()))
    }

    /// Column-wise maximum over rows, giving a `1 x cols` row. The gradient
    /// goes to the first row attaining the maximum.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows() > 0, "max_rows of empty matrix");
        let mut arg = vec![0usize; x.cols()];
        let mut out = Matrix::zeros(1, x.cols());
        for c in 0..x.cols() {
            let mut best = 0;
            for r in 1..x.rows() {
                if x.get(r, c) > x.get(best, c) {
                    best = r;
                }
            }
            arg[c] = best;
            out.set(0, c, x.get(best, c));
        }
        self.push(out, Op::MaxRows(a, arg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Matrix) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "bce target shape mismatch");
        let n = x.len() as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| bce_logit_term(z, t))
            .sum();
        self.push(Matrix::scalar(total / n), Op::BceWithLogits(logits, targets.clone()))
    }

    /// Mean token cross-entropy of row-wise softmax against target classes.
    /// Rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "cross_entropy target count mismatch");
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = x.row(r);
                total += log_sum_exp(row) - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(Matrix::scalar(loss), Op::CrossEntropy(logits, targets.to_vec()))
    }

    /// Unfolds a feature grid stored as `(height*width) x channels` (raster order)
    /// into `(out_h*out_w) x (kernel*kernel*channels)` patches, with zero padding.
    #[allow(clippy::too_many_arguments)]
    pub fn im2col(
        &mut self,
        a: Var,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), height * width, "im2col grid size mismatch");
        assert!(stride >= 1 && kernel >= 1);
        assert!(height + 2 * pad >= kernel && width + 2 * pad >= kernel, "kernel larger than padded input");
        let channels = x.cols();
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        let geom = Im2ColGeom {
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        };
        let mut out = Matrix::zeros(out_h * out_w, kernel * kernel * channels);
        for_each_tap(&geom, |orow, ocol_base, src| {
            out.row_mut(orow)[ocol_base..ocol_base + channels].copy_from_slice(x.row(src));
        });
        self.push(out, Op::Im2Col(a, geom))
    }

    /// Mixes rows: `weights · a`, where `weights` is a learned `out_rows x rows`
    /// matrix. Same as `matmul(weights, a)`; kept separate for readability.
    pub fn seq_mix(&mut self, weights: Var, a: Var) -> Var {
        let out = self.value(weights).matmul(self.value(a));
        self.push(out, Op::SeqMix(weights, a))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads {
            grads,
            bound: self.bound.clone(),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.value(*b)));
                acc(*b, self.value(*a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.matmul(self.value(*b)));
                acc(*b, g.t_matmul(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                acc(*a, hadamard(g, y));
                acc(*b, hadamard(g, x));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let (x, r) = (self.value(*a), self.value(*row));
                let mut da = g.clone();
                let mut dr = Matrix::zeros(1, r.cols());
                for i in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(i, c, g.get(i, c) * r.get(0, c));
                        dr.data_mut()[c] += g.get(i, c) * x.get(i, c);
                    }
                }
                acc(*a, da);
                acc(*row, dr);
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, masked(g, x, |v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, masked(g, y, |s| s * (1.0 - s)));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(*a, masked(g, x, |v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let gm = self.value(*gamma);
                let cols = normed.cols();
                let mut dx = Matrix::zeros(normed.rows(), cols);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                for r in 0..normed.rows() {
                    let nr = normed.row(r);
                    let gr = g.row(r);
                    let mut dn = vec![0.0; cols];
                    for c in 0..cols {
                        dn[c] = gr[c] * gm.get(0, c);
                        dgamma.data_mut()[c] += gr[c] * nr[c];
                        dbeta.data_mut()[c] += gr[c];
                    }
                    let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                    let mean_dn_n = dn.iter().zip(nr).map(|(p, q)| p * q).sum::<f64>() / cols as f64;
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    acc(p, g.slice_rows(offset, rows));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut d = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    acc(p, d);
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::GatherRows(a, indices) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (i, &idx) in indices.iter().enumerate() {
                    for (o, &v) in d.row_mut(idx).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::MaxRows(a, arg) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (c, &r) in arg.iter().enumerate() {
                    d.set(r, c, g.get(0, c));
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::BceWithLogits(a, targets) => {
                let x = self.value(*a);
                let scale = g.item() / x.len() as f64;
                let d = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                        .collect(),
                );
                acc(*a, d);
            }
            Op::CrossEntropy(a, targets) => {
                let x = self.value(*a);
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut d = Matrix::zeros(x.rows(), x.cols());
                if count > 0 {
                    let scale = g.item() / count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let mut p = x.row(r).to_vec();
                            softmax_in_place(&mut p);
                            p[t] -= 1.0;
                            for (o, v) in d.row_mut(r).iter_mut().zip(p) {
                                *o = v * scale;
                            }
                        }
                    }
                }
                acc(*a, d);
            }
            Op::Im2Col(a, geom) => {
                let mut d = Matrix::zeros(geom.height * geom.width, geom.channels);
                for_each_tap(geom, |orow, ocol_base, src| {
                    let gr = &g.row(orow)[ocol_base..ocol_base + geom.channels];
                    for (o, &v) in d.row_mut(src).iter_mut().zip(gr) {
                        *o += v;
                    }
                });
                acc(*a, d);
            }
            Op::SeqMix(w, a) => {
                acc(*w, g.matmul_t(self.value(*a)));
                acc(*a, self.value(*w).t_matmul(g));
            }
        }
    }
}

/// Visits every (output row, output column offset, source row) triple of an
/// im2col unfolding that lands inside the unpadded input.
fn for_each_tap(geom: &Im2ColGeom, mut f: impl FnMut(usize, usize, usize)) {
    let k = geom.kernel;
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let orow = oy * geom.out_w + ox;
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let src = iy as usize * geom.width + ix as usize;
                    f(orow, (ky * k + kx) * geom.channels, src);
                }
            }
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect(),
    )
}

fn masked(g: &Matrix, x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_vec(
        g.rows(),
        g.cols(),
        g.data().iter().zip(x.data()).map(|(&p, &q)| p * f(q)).collect(),
    )
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[t ln σ(z) + (1 - t) ln(1 - σ(z))]`, evaluated without overflow.
pub(crate) fn bce_logit_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
    bound: HashMap<(u64, usize), Var>,
}

impl Grads {
    /// Gradient with respect to any node; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store`; unbound parameters get zeros.
    pub fn for_store(&self, store: &ParamStore) -> StoreGrads {
        let grads = store
            .ids()
            .map(|id| {
                self.bound
                    .get(&(store.uid(), id.index()))
                    .and_then(|v| self.wrt(*v))
                    .cloned()
                    .unwrap_or_else(|| {
                        let (r, c) = store.get(id).shape();
                        Matrix::zeros(r, c)
                    })
            })
            .collect();
        StoreGrads::from_vec(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "analytic {x} vs numeric {y}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        // Small deterministic LCG; keeps these tests free of RNG crates.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Matrix) {
        let f = |m: &Matrix| {
            let mut g = Graph::new();
            let v = g.input(m.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numeric_grad(&f, &x, 1e-5);
        assert_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn matmul_gradients() {
        let w = sample(4, 3, 9);
        check(
            move |g, x| {
                let wv = g.input(w.clone());
                let y = g.matmul(x, wv);
                let y = g.mul(y, y);
                g.sum_all(y)
            },
            sample(2, 4, 1),
        );
        let w = sample(5, 4, 10);
        check(
            move |g, x| {
                let wv = g.input(w.clone());
                let y = g.matmul_t(x, wv);
                let y = g.sigmoid(y);
                g.sum_all(y)
            },
            sample(3, 4, 2),
        );
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let probe = sample(3, 5, 4);
        check(
            move |g, x| {
                let s = g.softmax_rows(x);
                let p = g.input(probe.clone());
                let y = g.mul(s, p);
                g.sum_all(y)
            },
            sample(3, 5, 3),
        );
        let probe = sample(3, 6, 6);
        let gamma = sample(1, 6, 7);
        let beta = sample(1, 6, 8);
        check(
            move |g, x| {
                let (gm, bt) = (g.input(gamma.clone()), g.input(beta.clone()));
                let y = g.layer_norm(x, gm, bt, 1e-5);
                let p = g.input(probe.clone());
                let y = g.mul(y, p);
                g.sum_all(y)
            },
            sample(3, 6, 5),
        );
    }

    #[test]
    fn structural_op_gradients() {
        let probe = sample(1, 4, 12);
        check(
            move |g, x| {
                let top = g.slice_rows(x, 0, 2);
                let left = g.slice_cols(x, 0, 2);
                let right = g.slice_cols(x, 2, 2);
                let swapped = g.concat_cols(&[right, left]);
                let both = g.concat_rows(&[top, swapped]);
                let picked = g.gather_rows(both, &[0, 3, 3, 1]);
                let m = g.max_rows(picked);
                let p = g.input(probe.clone());
                let y = g.mul(m, p);
                g.sum_all(y)
            },
            sample(3, 4, 11),
        );
    }

    #[test]
    fn loss_op_gradients() {
        let targets = Matrix::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        check(move |g, x| g.bce_with_logits(x, &targets), sample(2, 3, 13));
        check(
            |g, x| g.cross_entropy(x, &[Some(2), None, Some(0)]),
            sample(3, 4, 14),
        );
        check(
            |g, x| {
                let s = g.sigmoid(x);
                let s = g.sum_all(s);
                let s = g.add_scalar(s, -1.7);
                g.abs(s)
            },
            sample(1, 5, 15),
        );
    }

    #[test]
    fn im2col_gradients() {
        let w = sample(3 * 3 * 2, 3, 17);
        check(
            move |g, x| {
                let cols = g.im2col(x, 4, 5, 3, 2, 1);
                let wv = g.input(w.clone());
                let y = g.matmul(cols, wv);
                let y = g.mul(y, y);
                g.sum_all(y)
            },
            sample(20, 2, 16),
        );
    }

    #[test]
    fn im2col_shapes_match_convolution_arithmetic() {
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(7 * 9, 3));
        let c = g.im2col(x, 7, 9, 3, 2, 1);
        // (7 + 2 - 3) / 2 + 1 = 4, (9 + 2 - 3) / 2 + 1 = 5
        assert_eq!(g.shape(c), (20, 27));
    }

    #[test]
    fn softmax_ignores_negative_infinity() {
        let mut g = Graph::new();
        let x = g.input(Matrix::row_vector(&[0.0, f64::NEG_INFINITY, 0.0]));
        let s = g.softmax_rows(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn param_binding_is_cached_and_collected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::row_vector(&[1.0, 2.0]));
        let unused = store.add("unused", Matrix::zeros(2, 2));
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let y = g.sum_all(y);
        let grads = g.backward(y).for_store(&store);
        assert_eq!(grads.get(w).data(), &[2.0, 4.0]);
        assert_eq!(grads.get(unused), &Matrix::zeros(2, 2));
    }

    #[test]
    fn bce_term_is_stable_for_large_logits() {
        assert!(bce_logit_term(800.0, 1.0).abs() < 1e-300);
        assert!((bce_logit_term(-800.0, 1.0) - 800.0).abs() < 1e-9);
        assert!((bce_logit_term(0.0, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
