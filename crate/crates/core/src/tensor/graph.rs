//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and the
//! backward sweep simply walks it in reverse: each node is visited once, after
//! every node that consumed it.

use std::sync::Arc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row reduction of the last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowReduce {
    /// Euclidean norm.
    L2,
    /// Sum of absolute values.
    L1,
    /// Arithmetic mean.
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    Reshape(Var),
    Gather { src: Var, index: Arc<[usize]> },
    Patchify { src: Var, k: usize },
    RowReduce { src: Var, kind: RowReduce },
    GroupMean { src: Var, group: usize },
    Sum(Var),
    LayerNorm { src: Var, eps: f64 },
    CrossEntropyLogits { logits: Var, label: usize },
    CrossEntropyProbs { probs: Var, label: usize },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Probability floor applied by [`Graph::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Recording tape.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(Var, String)>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Matrix view of a tensor: `rows x cols` with `cols` the last extent.
fn as_matrix(dims: &[usize]) -> (usize, usize) {
    let cols = *dims.last().expect("rank >= 1");
    (dims.iter().product::<usize>() / cols, cols)
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

fn from_f64<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

/// `a[p x q] * b[q x r]`, accumulated in f64.
fn mm_nn(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a[p x r] * b[q x r]^T`.
fn mm_nt(a: &[f64], b: &[f64], p: usize, r: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let arow = &a[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            out[i * q + k] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[p x q]^T * b[p x r]`.
fn mm_tn(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; q * r];
    for i in 0..p {
        let brow = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Calls `f(out_index, src_index)` for every element moved by `patchify`.
fn for_each_patch_pair(dims: &[usize], k: usize, mut f: impl FnMut(usize, usize)) {
    let (n, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    let mut o = 0;
    for b in 0..n {
        for py in 0..h / k {
            for px in 0..w / k {
                for ky in 0..k {
                    let row = (b * h + py * k + ky) * w + px * k;
                    for kx in 0..k {
                        let base = (row + kx) * c;
                        for ch in 0..c {
                            f(o, base + ch);
                            o += 1;
                        }
                    }
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose leaves never require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.node_value(v)
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Leaf that follows the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad() && self.grad_enabled;
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad())
    }

    /// Trainable leaf tagged with a parameter name; see [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = self.variable(t.clone());
        self.params.push((v, name.to_string()));
        v
    }

    pub fn bound_params(&self) -> &[(Var, String)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::shape("matmul", da, db));
        }
        let (p, q, r) = (da[0], da[1], db[1]);
        let out = mm_nn(
            &to_f64(self.node_value(a).data()),
            &to_f64(self.node_value(b).data()),
            p,
            q,
            r,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![p, r], from_f64(out))?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let d = self.dims(a);
        if d.len() != 2 {
            return Err(Error::shape("transpose", d, &[2]));
        }
        let (p, q) = (d[0], d[1]);
        let src = self.node_value(a).data();
        let mut out = vec![T::ZERO; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = src[i * q + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![q, p], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("add", self.dims(a), self.dims(b)));
        }
        let out: Vec<T> = self
            .node_value(a)
            .data()
            .iter()
            .zip(self.node_value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let dims = self.dims(a).to_vec();
        Ok(self.push(Tensor::new(dims, out)?, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("mul", self.dims(a), self.dims(b)));
        }
        let out: Vec<T> = self
            .node_value(a)
            .data()
            .iter()
            .zip(self.node_value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let dims = self.dims(a).to_vec();
        Ok(self.push(Tensor::new(dims, out)?, Op::Mul(a, b), rg))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (rows, cols) = as_matrix(self.dims(x));
        if self.node_value(row).numel() != cols {
            return Err(Error::shape(op, self.dims(x), self.dims(row)));
        }
        Ok((rows, cols))
    }

    /// `x[.., c] + row[c]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.check_row("add_row", x, row)?;
        let b = self.node_value(row).data();
        let out: Vec<T> = self
            .node_value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let rg = self.rg(x) || self.rg(row);
        let dims = self.dims(x).to_vec();
        Ok(self.push(Tensor::new(dims, out)?, Op::AddRow(x, row), rg))
    }

    /// `x[.., c] * row[c]`, broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.check_row("mul_row", x, row)?;
        let b = self.node_value(row).data();
        let out: Vec<T> = self
            .node_value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * b[i % cols])
            .collect();
        let rg = self.rg(x) || self.rg(row);
        let dims = self.dims(x).to_vec();
        Ok(self.push(Tensor::new(dims, out)?, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<T> = self
            .node_value(x)
            .data()
            .iter()
            .map(|&v| T::from_f64(v.to_f64() * c))
            .collect();
        let rg = self.rg(x);
        let dims = self.dims(x).to_vec();
        self.push(Tensor::new(dims, out).expect("same dims"), Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self
            .node_value(x)
            .data()
            .iter()
            .map(|&v| if v < T::ZERO { T::ZERO } else { v })
            .collect();
        let rg = self.rg(x);
        let dims = self.dims(x).to_vec();
        self.push(Tensor::new(dims, out).expect("same dims"), Op::Relu(x), rg)
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = as_matrix(self.dims(x));
        let mut buf = to_f64(self.node_value(x).data());
        for r in 0..rows {
            softmax_in_place(&mut buf[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(x);
        let dims = self.dims(x).to_vec();
        self.push(
            Tensor::new(dims, from_f64(buf)).expect("same dims"),
            Op::SoftmaxRows(x),
            rg,
        )
    }

    /// Concatenates rank-2 tensors with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.dims(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.dims(p);
            if d.len() != 2 || d[0] != rows {
                return Err(Error::shape("concat_cols", self.dims(first), d));
            }
            widths.push(d[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.node_value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks rank-2 tensors with equal column counts along the rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let cols = self.dims(first)[1];
        let mut rows = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != 2 || d[1] != cols {
                return Err(Error::shape("concat_rows", self.dims(first), d));
            }
            rows += d[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.node_value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(x);
        if d.len() != 2 || len == 0 || start + len > d[0] {
            return Err(Error::shape("slice_rows", d, &[start, len]));
        }
        let cols = d[1];
        let out = self.node_value(x).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![len, cols], out)?,
            Op::SliceRows { src: x, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.node_value(x).clone().reshape(dims)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `out.data[i] = x.data[index[i]]`, reshaped to `dims`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, dims: &[usize]) -> Result<Var> {
        let src = self.node_value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Index {
                what: "gather",
                index: bad,
                bound: src.len(),
            });
        }
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(dims.to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { src: x, index }, rg))
    }

    /// Space-to-depth over `[N, H, W, C]`: every non-overlapping `k x k` patch
    /// becomes one row of `k*k*C` values ordered `(ky, kx, c)`. The result is
    /// `[N * H/k * W/k, k*k*C]` with rows ordered `(n, py, px)`.
    pub fn patchify(&mut self, x: Var, k: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 || k == 0 || d[1] % k != 0 || d[2] % k != 0 {
            return Err(Error::shape("patchify", &d, &[k, k]));
        }
        let src = self.node_value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        for_each_patch_pair(&d, k, |o, i| out[o] = src[i]);
        let t = Tensor::new(vec![src.len() / (k * k * d[3]), k * k * d[3]], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Patchify { src: x, k }, rg))
    }

    /// Reduces the last axis; the result drops that axis (rank-1 input gives `[1]`).
    pub fn row_reduce(&mut self, x: Var, kind: RowReduce) -> Var {
        let d = self.dims(x).to_vec();
        let (rows, cols) = as_matrix(&d);
        let src = self.node_value(x).data();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let v = match kind {
                RowReduce::L2 => row.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt(),
                RowReduce::L1 => row.iter().map(|v| v.to_f64().abs()).sum::<f64>(),
                RowReduce::Mean => row.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64,
            };
            out.push(T::from_f64(v));
        }
        let out_dims = if d.len() == 1 {
            vec![1]
        } else {
            d[..d.len() - 1].to_vec()
        };
        let rg = self.rg(x);
        self.push(
            Tensor::new(out_dims, out).expect("row count"),
            Op::RowReduce { src: x, kind },
            rg,
        )
    }

    /// Averages consecutive groups of `group` rows of a rank-2 tensor.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let d = self.dims(x);
        if d.len() != 2 || group == 0 || d[0] % group != 0 {
            return Err(Error::shape("group_mean_rows", d, &[group]));
        }
        let (rows, cols) = (d[0], d[1]);
        let src = self.node_value(x).data();
        let groups = rows / group;
        let mut out = vec![0.0f64; groups * cols];
        for r in 0..rows {
            let o = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (acc, v) in o.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *acc += v.to_f64();
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![groups, cols], from_f64(out))?,
            Op::GroupMean { src: x, group },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.node_value(x).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let d = self.dims(x).to_vec();
        let (rows, cols) = as_matrix(&d);
        let src = to_f64(self.node_value(x).data());
        let mut out = Vec::with_capacity(src.len());
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| T::from_f64((v - mean) * inv)));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(d, out).expect("same dims"),
            Op::LayerNorm { src: x, eps },
            rg,
        )
    }

    fn check_label(&self, x: Var, label: usize) -> Result<()> {
        let c = self.node_value(x).numel();
        if label >= c {
            return Err(Error::Index {
                what: "class label",
                index: label,
                bound: c,
            });
        }
        Ok(())
    }

    /// `-ln(softmax(logits)[label])` computed as a fused log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.check_label(logits, label)?;
        let z = to_f64(self.node_value(logits).data());
        let loss = log_sum_exp(&z) - z[label];
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropyLogits { logits, label },
            rg,
        ))
    }

    /// `-ln(max(probs[label], PROB_FLOOR))` on an already-normalised vector.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        self.check_label(probs, label)?;
        let p = self.node_value(probs).data();
        let total: f64 = p.iter().map(|v| v.to_f64()).sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!(
                "cross_entropy expects probabilities summing to 1, got {total}"
            )));
        }
        let loss = -p[label].to_f64().max(PROB_FLOOR).ln();
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropyProbs { probs, label },
            rg,
        ))
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every tensor bound through [`Graph::param`].
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[T]>)> {
        self.params
            .iter()
            .map(move |(v, name)| (name.as_str(), self.grad(*v)))
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl Fn(usize) -> f64) {
        let slot = grads[v.0].get_or_insert_with(|| vec![T::ZERO; len]);
        for (i, g) in slot.iter_mut().enumerate() {
            *g += T::from_f64(f(i));
        }
    }

    fn accumulate_vec(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<f64>) {
        match &mut grads[v.0] {
            Some(slot) => {
                for (g, c) in slot.iter_mut().zip(contrib) {
                    *g += T::from_f64(c);
                }
            }
            None => grads[v.0] = Some(from_f64(contrib)),
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients of previous sweeps on
    /// this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node_value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Contract(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let gout = to_f64(&g);
            grads[idx] = Some(g);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (da, db) = (self.dims(*a), self.dims(*b));
                    let (p, q, r) = (da[0], da[1], db[1]);
                    if self.rg(*a) {
                        let bv = to_f64(self.node_value(*b).data());
                        Self::accumulate_vec(&mut grads, *a, mm_nt(&gout, &bv, p, r, q));
                    }
                    if self.rg(*b) {
                        let av = to_f64(self.node_value(*a).data());
                        Self::accumulate_vec(&mut grads, *b, mm_tn(&av, &gout, p, q, r));
                    }
                }
                Op::Transpose(a) => {
                    let d = self.dims(*a);
                    let (p, q) = (d[0], d[1]);
                    Self::accumulate(&mut grads, *a, p * q, |i| gout[(i % q) * p + i / q]);
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.rg(v) {
                            Self::accumulate(&mut grads, v, gout.len(), |i| gout[i]);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.node_value(*a).data(), self.node_value(*b).data());
                    if self.rg(*a) {
                        Self::accumulate(&mut grads, *a, gout.len(), |i| gout[i] * bv[i].to_f64());
                    }
                    if self.rg(*b) {
                        Self::accumulate(&mut grads, *b, gout.len(), |i| gout[i] * av[i].to_f64());
                    }
                }
                Op::AddRow(x, row) => {
                    let cols = self.node_value(*row).numel();
                    if self.rg(*x) {
                        Self::accumulate(&mut grads, *x, gout.len(), |i| gout[i]);
                    }
                    if self.rg(*row) {
                        let mut acc = vec![0.0; cols];
                        for (i, g) in gout.iter().enumerate() {
                            acc[i % cols] += g;
                        }
                        Self::accumulate_vec(&mut grads, *row, acc);
                    }
                }
                Op::MulRow(x, row) => {
                    let cols = self.node_value(*row).numel();
                    let (xv, bv) = (self.node_value(*x).data(), self.node_value(*row).data());
                    if self.rg(*x) {
                        Self::accumulate(&mut grads, *x, gout.len(), |i| {
                            gout[i] * bv[i % cols].to_f64()
                        });
                    }
                    if self.rg(*row) {
                        let mut acc = vec![0.0; cols];
                        for (i, g) in gout.iter().enumerate() {
                            acc[i % cols] += g * xv[i].to_f64();
                        }
                        Self::accumulate_vec(&mut grads, *row, acc);
                    }
                }
                Op::Scale(x, c) => {
                    Self::accumulate(&mut grads, *x, gout.len(), |i| gout[i] * c);
                }
                Op::Relu(x) => {
                    let xv = self.node_value(*x).data();
                    Self::accumulate(&mut grads, *x, gout.len(), |i| {
                        if xv[i] > T::ZERO {
                            gout[i]
                        } else {
                            0.0
                        }
                    });
                }
                Op::SoftmaxRows(x) => {
                    let (rows, cols) = as_matrix(node.value.dims());
                    let y = node.value.data();
                    let mut dx = vec![0.0; gout.len()];
                    for r in 0..rows {
                        let s = r * cols;
                        let dot: f64 = (s..s + cols).map(|i| gout[i] * y[i].to_f64()).sum();
                        for i in s..s + cols {
                            dx[i] = y[i].to_f64() * (gout[i] - dot);
                        }
                    }
                    Self::accumulate_vec(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.dims()[0];
                    let total = node.value.dims()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.dims(p)[1];
                        if self.rg(p) {
                            Self::accumulate(&mut grads, p, rows * w, |i| {
                                gout[(i / w) * total + offset + i % w]
                            });
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.node_value(p).numel();
                        if self.rg(p) {
                            Self::accumulate(&mut grads, p, n, |i| gout[offset + i]);
                        }
                        offset += n;
                    }
                }
                Op::SliceRows { src, start } => {
                    let cols = self.dims(*src)[1];
                    let n = self.node_value(*src).numel();
                    let lo = start * cols;
                    let slot = grads[src.0].get_or_insert_with(|| vec![T::ZERO; n]);
                    for (g, &c) in slot[lo..lo + gout.len()].iter_mut().zip(gout.iter()) {
                        *g += T::from_f64(c);
                    }
                }
                Op::Reshape(x) => {
                    Self::accumulate(&mut grads, *x, gout.len(), |i| gout[i]);
                }
                Op::Gather { src, index } => {
                    let mut acc = vec![0.0; self.node_value(*src).numel()];
                    for (g, &i) in gout.iter().zip(index.iter()) {
                        acc[i] += g;
                    }
                    Self::accumulate_vec(&mut grads, *src, acc);
                }
                Op::Patchify { src, k } => {
                    let d = self.dims(*src).to_vec();
                    let mut acc = vec![0.0; gout.len()];
                    for_each_patch_pair(&d, *k, |o, i| acc[i] = gout[o]);
                    Self::accumulate_vec(&mut grads, *src, acc);
                }
                Op::RowReduce { src, kind } => {
                    let (_, cols) = as_matrix(self.dims(*src));
                    let xv = self.node_value(*src).data();
                    let y = node.value.data();
                    let kind = *kind;
                    Self::accumulate(&mut grads, *src, xv.len(), |i| {
                        let r = i / cols;
                        let x = xv[i].to_f64();
                        let local = match kind {
                            RowReduce::L2 => {
                                let norm = y[r].to_f64();
                                if norm > 0.0 {
                                    x / norm
                                } else {
                                    0.0
                                }
                            }
                            RowReduce::L1 => {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            RowReduce::Mean => 1.0 / cols as f64,
                        };
                        gout[r] * local
                    });
                }
                Op::GroupMean { src, group } => {
                    let cols = self.dims(*src)[1];
                    let n = self.node_value(*src).numel();
                    let inv = 1.0 / *group as f64;
                    Self::accumulate(&mut grads, *src, n, |i| {
                        let r = i / cols;
                        gout[(r / group) * cols + i % cols] * inv
                    });
                }
                Op::Sum(x) => {
                    let n = self.node_value(*x).numel();
                    Self::accumulate(&mut grads, *x, n, |_| gout[0]);
                }
                Op::LayerNorm { src, eps } => {
                    let (rows, cols) = as_matrix(self.dims(*src));
                    let xv = to_f64(self.node_value(*src).data());
                    let mut dx = vec![0.0; xv.len()];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let s = r * cols;
                        let row = &xv[s..s + cols];
                        let mean = row.iter().sum::<f64>() / nf;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let g = &gout[s..s + cols];
                        let gsum: f64 = g.iter().sum();
                        let gx: f64 = g.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[s + j] = inv / nf * (nf * g[j] - gsum - xhat[j] * gx);
                        }
                    }
                    Self::accumulate_vec(&mut grads, *src, dx);
                }
                Op::CrossEntropyLogits { logits, label } => {
                    let mut p = to_f64(self.node_value(*logits).data());
                    softmax_in_place(&mut p);
                    p[*label] -= 1.0;
                    let g0 = gout[0];
                    Self::accumulate(&mut grads, *logits, p.len(), |i| p[i] * g0);
                }
                Op::CrossEntropyProbs { probs, label } => {
                    let pv = self.node_value(*probs).data();
                    let n = pv.len();
                    let pl = pv[*label].to_f64();
                    let local = if pl > PROB_FLOOR { -1.0 / pl } else { 0.0 };
                    let (g0, label) = (gout[0], *label);
                    Self::accumulate(&mut grads, *probs, n, |i| {
                        if i == label {
                            g0 * local
                        } else {
                            0.0
                        }
                    });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
