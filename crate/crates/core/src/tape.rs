//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every forward op appends a node holding its output value and the inputs it
//! read. Nodes are only ever appended, so the list is already in topological
//! order and backward is a single reverse sweep. Ops treat a tensor as a
//! matrix `[rows × cols]` where `cols` is the trailing extent.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::tensor::{check_finite, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    LogSigmoid(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    WeightedSum(Var, Vec<f32>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    retain: bool,
}

/// Ordered record of forward ops.
///
/// Single-owner; it may be moved between threads but is never shared.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> CoreError {
    CoreError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

fn logsumexp_row(x: &[f32]) -> f32 {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    max + x.iter().map(|&v| (v - max).exp()).sum::<f32>().ln()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last backward pass, for leaves with `requires_grad`
    /// and for nodes marked with [`Tape::retain_grad`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf. Its gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: needs,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.leaf(t)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let t = Tensor::raw(self.shape(v).to_vec(), self.data(v).to_vec());
        self.constant(t)
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op, value.data())?;
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad: needs,
            retain: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::raw(vec![m, n], out);
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(mismatch("matmul_nt", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::raw(vec![m, n], out);
        self.push("matmul_nt", t, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        let x = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let t = Tensor::raw(vec![c, r], out);
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() || shape.contains(&0) {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::raw(shape.to_vec(), self.data(a).to_vec());
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    // ---- elementwise ---------------------------------------------------------

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f32, f32) -> f32,
        kind: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.value(a), self.value(b)));
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::raw(self.shape(a).to_vec(), out);
        self.push(op, t, kind, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[r×c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(bias).numel() != c {
            return Err(mismatch("add_row", self.value(x), self.value(bias)));
        }
        let b = self.data(bias);
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        debug_assert_eq!(out.len(), r * c);
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("add_row", t, Op::AddRow(x, bias), &[x, bias])
    }

    /// Scale row `i` of `x[r×c]` by `w[i]` (`w` has `r` elements).
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(w).numel() != r {
            return Err(mismatch("mul_col", self.value(x), self.value(w)));
        }
        let wv = self.data(w);
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv[i / c])
            .collect();
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("mul_col", t, Op::MulCol(x, w), &[x, w])
    }

    /// Divide row `i` of `x[r×c]` by `s[i]`.
    pub fn div_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(s).numel() != r {
            return Err(mismatch("div_col", self.value(x), self.value(s)));
        }
        let sv = self.data(s);
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v / sv[i / c])
            .collect();
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("div_col", t, Op::DivCol(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("silu", t, Op::Silu(x), &[x])
    }

    /// `log σ(x)`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self
            .data(x)
            .iter()
            .map(|&v| v.min(0.0) - (-v.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("log_sigmoid", t, Op::LogSigmoid(x), &[x])
    }

    // ---- row-wise normalizers -----------------------------------------------

    /// Softmax of every row, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let mut out = vec![0.0; r * c];
        let xv = self.data(x);
        for i in 0..r {
            softmax_row(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("softmax_rows", t, Op::Softmax(x), &[x])
    }

    /// Softmax restricted to entries where `mask` is true. Masked entries get
    /// probability exactly 0; a fully masked row is all zeros.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &Arc<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if mask.len() != r * c {
            return Err(CoreError::InvalidArgument(format!(
                "mask has {} entries, scores have {}",
                mask.len(),
                r * c
            )));
        }
        let xv = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                continue;
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            let inv = 1.0 / sum;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("masked_softmax_rows", t, Op::MaskedSoftmax(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let xv = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let lse = logsumexp_row(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("log_softmax_rows", t, Op::LogSoftmax(x), &[x])
    }

    /// `log Σ_j exp(x[i][j])` per row, shape `[r × 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let xv = self.data(x);
        let out = (0..r)
            .map(|i| logsumexp_row(&xv[i * c..(i + 1) * c]))
            .collect();
        let t = Tensor::raw(vec![r, 1], out);
        self.push("logsumexp_rows", t, Op::LogSumExp(x), &[x])
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ gain` over the trailing axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(CoreError::InvalidArgument(
                "rms_norm eps must be > 0".into(),
            ));
        }
        let (r, c) = self.dims2(x);
        if self.value(gain).numel() != c {
            return Err(mismatch("rms_norm", self.value(x), self.value(gain)));
        }
        let xv = self.data(x);
        let g = self.data(gain);
        let mut out = vec![0.0; r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f32>() / c as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * g[j];
            }
        }
        let t = Tensor::raw(self.shape(x).to_vec(), out);
        self.push("rms_norm", t, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    // ---- indexing ------------------------------------------------------------

    /// Rows of `table[V×d]` selected by `ids`, shape `[ids.len() × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2(table);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(CoreError::InvalidArgument(format!(
                "token id {bad} out of range for vocab {v}"
            )));
        }
        if ids.is_empty() {
            return Err(CoreError::InvalidArgument("embedding of zero ids".into()));
        }
        let tv = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
        }
        let t = Tensor::raw(vec![ids.len(), d], out);
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// `out[k] = x[idx[k]]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(CoreError::InvalidArgument(format!(
                "gather_rows: bad indices for {r} rows"
            )));
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let t = Tensor::raw(vec![idx.len(), c], out);
        self.push("gather_rows", t, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// `out[n_rows × c]` with `out[idx[k]] += x[k]`.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if idx.len() != r || idx.iter().any(|&i| i >= n_rows) {
            return Err(CoreError::InvalidArgument(format!(
                "scatter_rows: {} indices for {r} rows into {n_rows}",
                idx.len()
            )));
        }
        let xv = self.data(x);
        let mut out = vec![0.0; n_rows * c];
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += xv[k * c + j];
            }
        }
        let t = Tensor::raw(vec![n_rows, c], out);
        self.push("scatter_rows", t, Op::ScatterRows(x, idx.to_vec()), &[x])
    }

    /// Per-row column gather: `idx` holds `k` column indices per row,
    /// flattened; output is `[r × k]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if r == 0 || !idx.len().is_multiple_of(r) || idx.is_empty() || idx.iter().any(|&j| j >= c) {
            return Err(CoreError::InvalidArgument(format!(
                "gather_cols: {} indices for [{r}×{c}]",
                idx.len()
            )));
        }
        let k = idx.len() / r;
        let xv = self.data(x);
        let out = idx
            .iter()
            .enumerate()
            .map(|(p, &j)| xv[(p / k) * c + j])
            .collect();
        let t = Tensor::raw(vec![r, k], out);
        self.push("gather_cols", t, Op::GatherCols(x, idx.to_vec()), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if len == 0 || start + len > c {
            return Err(CoreError::InvalidArgument(format!(
                "slice_cols {start}+{len} of {c}"
            )));
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let t = Tensor::raw(vec![r, len], out);
        self.push("slice_cols", t, Op::SliceCols(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(CoreError::InvalidArgument("concat_cols of nothing".into()));
        };
        let r = self.dims2(first).0;
        if parts.iter().any(|&p| self.dims2(p).0 != r) {
            return Err(CoreError::InvalidArgument(
                "concat_cols: row mismatch".into(),
            ));
        }
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims2(p).1;
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::raw(vec![r, total], out);
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(
            "sum_all",
            Tensor::raw(vec![1], vec![s]),
            Op::SumAll(x),
            &[x],
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f32;
        let s = self.data(x).iter().sum::<f32>() / n;
        self.push(
            "mean_all",
            Tensor::raw(vec![1], vec![s]),
            Op::MeanAll(x),
            &[x],
        )
    }

    /// Column sums: `[r × c] -> [1 × c]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let xv = self.data(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xv[i * c + j];
            }
        }
        self.push(
            "sum_rows",
            Tensor::raw(vec![1, c], out),
            Op::SumRows(x),
            &[x],
        )
    }

    /// `Σ_i w[i]·x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &[f32]) -> Result<Var> {
        if w.len() != self.value(x).numel() {
            return Err(CoreError::InvalidArgument(format!(
                "weighted_sum: {} weights for {} values",
                w.len(),
                self.value(x).numel()
            )));
        }
        let s = self.data(x).iter().zip(w).map(|(a, b)| a * b).sum();
        self.push(
            "weighted_sum",
            Tensor::raw(vec![1], vec![s]),
            Op::WeightedSum(x, w.to_vec()),
            &[x],
        )
    }

    // ---- backward --------------------------------------------------------------

    /// Populate gradients of `loss` for every leaf that requires them.
    ///
    /// Leaves that `loss` does not depend on receive an all-zero gradient.
    /// Any gradients from a previous pass are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::NotScalar(self.shape(loss).to_vec()));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let keep = self.nodes[i].retain || matches!(self.nodes[i].op, Op::Leaf);
            if keep {
                self.nodes[i].value.grad = Some(g.clone());
            }
            self.propagate(i, &g, &mut grads);
        }
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) && n.value.requires_grad && n.value.grad.is_none() {
                n.value.grad = Some(vec![0.0; n.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let dims = |v: Var| (nodes[v.0].value.rows(), nodes[v.0].value.cols());
        // Accumulate into the gradient buffer of `v` if it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims(a);
                let n = dims(b).1;
                acc(a, &mut |ga| gemm_nt_acc(g, val(b), ga, m, n, k));
                acc(b, &mut |gb| gemm_tn_acc(val(a), g, gb, m, k, n));
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = dims(a);
                let n = dims(b).0;
                acc(a, &mut |ga| gemm_acc(g, val(b), ga, m, n, k));
                acc(b, &mut |gb| gemm_tn_acc(g, val(a), gb, m, n, k));
            }
            &Op::Transpose(a) => {
                let (r, c) = dims(a);
                acc(a, &mut |ga| {
                    for p in 0..r {
                        for q in 0..c {
                            ga[p * c + q] += g[q * r + p];
                        }
                    }
                });
            }
            &Op::Reshape(a) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for p in 0..g.len() {
                        ga[p] += g[p] * bv[p];
                    }
                });
                acc(b, &mut |gb| {
                    for p in 0..g.len() {
                        gb[p] += g[p] * av[p];
                    }
                });
            }
            &Op::AddRow(x, bias) => {
                let c = dims(x).1;
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                acc(bias, &mut |gb| {
                    for (p, &gv) in g.iter().enumerate() {
                        gb[p % c] += gv;
                    }
                });
            }
            &Op::MulCol(x, w) => {
                let c = dims(x).1;
                let (xv, wv) = (val(x), val(w));
                acc(x, &mut |gx| {
                    for p in 0..g.len() {
                        gx[p] += g[p] * wv[p / c];
                    }
                });
                acc(w, &mut |gw| {
                    for p in 0..g.len() {
                        gw[p / c] += g[p] * xv[p];
                    }
                });
            }
            &Op::DivCol(x, s) => {
                let c = dims(x).1;
                let sv = val(s);
                acc(x, &mut |gx| {
                    for p in 0..g.len() {
                        gx[p] += g[p] / sv[p / c];
                    }
                });
                acc(s, &mut |gs| {
                    for p in 0..g.len() {
                        gs[p / c] -= g[p] * out[p] / sv[p / c];
                    }
                });
            }
            &Op::Scale(x, c) => {
                acc(x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * c)
                });
            }
            &Op::Silu(x) => {
                let xv = val(x);
                acc(x, &mut |gx| {
                    for p in 0..g.len() {
                        let s = sigmoid(xv[p]);
                        gx[p] += g[p] * s * (1.0 + xv[p] * (1.0 - s));
                    }
                });
            }
            &Op::LogSigmoid(x) => {
                let xv = val(x);
                acc(x, &mut |gx| {
                    for p in 0..g.len() {
                        gx[p] += g[p] * sigmoid(-xv[p]);
                    }
                });
            }
            &Op::Softmax(x) | &Op::MaskedSoftmax(x) => {
                let (r, c) = dims(x);
                acc(x, &mut |gx| {
                    for row in 0..r {
                        let y = &out[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[row * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(x) => {
                let (r, c) = dims(x);
                acc(x, &mut |gx| {
                    for row in 0..r {
                        let y = &out[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let total: f32 = gr.iter().sum();
                        for j in 0..c {
                            gx[row * c + j] += gr[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            &Op::LogSumExp(x) => {
                let (r, c) = dims(x);
                let xv = val(x);
                acc(x, &mut |gx| {
                    for row in 0..r {
                        let lse = out[row];
                        for j in 0..c {
                            gx[row * c + j] += g[row] * (xv[row * c + j] - lse).exp();
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let (r, c) = dims(x);
                let (xv, gv) = (val(x), val(gain));
                acc(gain, &mut |gg| {
                    for row in 0..r {
                        for j in 0..c {
                            gg[j] += g[row * c + j] * xv[row * c + j] * inv_rms[row];
                        }
                    }
                });
                acc(x, &mut |gx| {
                    for row in 0..r {
                        let inv = inv_rms[row];
                        let mut dot = 0.0f32;
                        for j in 0..c {
                            dot += g[row * c + j] * gv[j] * xv[row * c + j] * inv;
                        }
                        dot /= c as f32;
                        for j in 0..c {
                            let xhat = xv[row * c + j] * inv;
                            gx[row * c + j] += inv * (g[row * c + j] * gv[j] - xhat * dot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = dims(*table).1;
                acc(*table, &mut |gt| {
                    for (k, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for j in 0..d {
                            gt[id * d + j] += g[k * d + j];
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = dims(*x).1;
                acc(*x, &mut |gx| {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::ScatterRows(x, idx) => {
                let c = dims(*x).1;
                acc(*x, &mut |gx| {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[k * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::GatherCols(x, idx) => {
                let (r, c) = dims(*x);
                let k = idx.len() / r;
                acc(*x, &mut |gx| {
                    for (p, &j) in idx.iter().enumerate() {
                        gx[(p / k) * c + j] += g[p];
                    }
                });
            }
            &Op::SliceCols(x, start) => {
                let (r, c) = dims(x);
                let len = nodes[i].value.cols();
                acc(x, &mut |gx| {
                    for row in 0..r {
                        for j in 0..len {
                            gx[row * c + start + j] += g[row * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let r = nodes[i].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = dims(p).1;
                    acc(p, &mut |gp| {
                        for row in 0..r {
                            for j in 0..c {
                                gp[row * c + j] += g[row * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            &Op::SumAll(x) => {
                acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            &Op::MeanAll(x) => {
                let n = nodes[x.0].value.numel() as f32;
                acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            &Op::SumRows(x) => {
                let c = dims(x).1;
                acc(x, &mut |gx| {
                    for (p, v) in gx.iter_mut().enumerate() {
                        *v += g[p % c];
                    }
                });
            }
            Op::WeightedSum(x, w) => {
                acc(*x, &mut |gx| {
                    for (v, &wi) in gx.iter_mut().zip(w) {
                        *v += g[0] * wi;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(p), &[1., 2., 3., 4.]);
        let a = tape.leaf(t(&[1, 1], &[2.]));
        let b = tape.leaf(t(&[1, 1], &[3.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[6.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Prng::new(11);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut reference = [[0.0f64; 3]; 5];
        for (i, row) in reference.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                for l in 0..4 {
                    *cell += a.data()[i * 4 + l] as f64 * b.data()[l * 3 + j] as f64;
                }
            }
        }
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let got = tape.data(c)[i * 3 + j] as f64;
                let want = reference[i][j];
                assert!(
                    (got - want).abs() <= 1e-6 * want.abs().max(1.0),
                    "{got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[0., 0., 0., 0., 1., 2., 3., 4.]));
        let s = tape.softmax_rows(x).unwrap();
        assert_eq!(&tape.data(s)[..4], &[0.25; 4]);
        let shifted = tape.leaf(t(&[1, 4], &[101., 102., 103., 104.]));
        let s2 = tape.softmax_rows(shifted).unwrap();
        for j in 0..4 {
            assert!((tape.data(s)[4 + j] - tape.data(s2)[j]).abs() < 1e-6);
        }
        let logs = tape.leaf(t(&[1, 3], &[1f32.ln(), 2f32.ln(), 3f32.ln()]));
        let s3 = tape.softmax_rows(logs).unwrap();
        for (got, want) in tape.data(s3).iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.leaf(Tensor::full(&[4], 1.0));
        let x = tape.leaf(t(&[1, 4], &[1., 1., 1., 1.]));
        let y = tape.rms_norm(x, ones, 1e-12).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let g2 = tape.leaf(Tensor::full(&[2], 1.0));
        let x2 = tape.leaf(t(&[1, 2], &[2., 0.]));
        let y2 = tape.rms_norm(x2, g2, 1e-12).unwrap();
        assert!((tape.data(y2)[0] - 2f32.sqrt()).abs() < 1e-6);
        assert_eq!(tape.data(y2)[1], 0.0);
        let z = tape.leaf(Tensor::zeros(&[1, 2]));
        let yz = tape.rms_norm(z, g2, 1e-5).unwrap();
        assert_eq!(tape.data(yz), &[0.0, 0.0]);
        assert!(tape.rms_norm(z, g2, 0.0).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.5).with_grad());
        let unused = tape.leaf(Tensor::full(&[2], 1.0).with_grad());
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
        assert!(matches!(tape.backward(x), Err(CoreError::NotScalar(_))));
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0).with_grad());
        let d = tape.stop_gradient(x);
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        // d/dx (x * sg(x)) = sg(x)
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let big = tape.leaf(Tensor::full(&[1, 1], 3.0e38));
        let two = tape.leaf(Tensor::full(&[1, 1], 2.0));
        assert!(matches!(
            tape.matmul(big, two),
            Err(CoreError::NonFinite { op: "matmul" })
        ));
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let mask = Arc::new(vec![true, false, false, false]);
        let y = tape.masked_softmax_rows(x, &mask).unwrap();
        assert_eq!(tape.data(y), &[1.0, 0.0, 0.0, 0.0]);
    }
}
