//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! Every forward primitive appends a node holding its output value and the
//! references needed by its backward rule. Nodes are only ever appended, so
//! the node list is already in topological order and [`Tape::backward`] is a
//! single reverse sweep. All reductions accumulate left to right over the
//! flat index so results are bitwise reproducible.

use super::{NumericsError, Tensor};

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
    BatchMatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Permute { input: Var, axes: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanAxis1(Var),
    Pick { input: Var, indices: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `out += a[m,k] * b[k,n]`, accumulating over `k` in ascending order.
fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    // 4x8 register tiles. Each output still accumulates over `k` in
    // ascending order, so the result matches the plain ikj loop bitwise.
    const MR: usize = 4;
    const NR: usize = 4;
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i in (0..full_rows).step_by(MR) {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        for j in (0..full_cols).step_by(NR) {
            let load = |r: usize| -> [f64; NR] {
                out[(i + r) * n + j..(i + r) * n + j + NR].try_into().expect("tile")
            };
            let (mut c0, mut c1, mut c2, mut c3) = (load(0), load(1), load(2), load(3));
            for kk in 0..k {
                let brow: [f64; NR] = b[kk * n + j..kk * n + j + NR].try_into().expect("tile");
                let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                for c in 0..NR {
                    c0[c] += v0 * brow[c];
                    c1[c] += v1 * brow[c];
                    c2[c] += v2 * brow[c];
                    c3[c] += v3 * brow[c];
                }
            }
            for (r, row) in [c0, c1, c2, c3].iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
        }
        if full_cols < n {
            for r in i..i + MR {
                gemm_row(&mut out[r * n..(r + 1) * n], &a[r * k..(r + 1) * k], b, n, full_cols);
            }
        }
    }
    for r in full_rows..m {
        gemm_row(&mut out[r * n..(r + 1) * n], &a[r * k..(r + 1) * k], b, n, 0);
    }
}

/// `out[from..] += a_row · b[:, from..]`, ascending over the shared axis.
fn gemm_row(out_row: &mut [f64], a_row: &[f64], b: &[f64], n: usize, from: usize) {
    for (kk, &av) in a_row.iter().enumerate() {
        let b_row = &b[kk * n + from..(kk + 1) * n];
        for (o, &bv) in out_row[from..].iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: `out.shape[i] = shape[axes[i]]`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &s in src {
            total += (s - max).exp();
        }
        let lse = max + total.ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

/// Softmax over the last axis of a flat row-major buffer.
pub fn softmax_last(x: &[f64], cols: usize) -> Vec<f64> {
    softmax_rows(x, cols)
}

/// Log-softmax over the last axis of a flat row-major buffer.
pub fn log_softmax_last(x: &[f64], cols: usize) -> Vec<f64> {
    log_softmax_rows(x, cols)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `tensor` as a leaf. Gradients flow to it only if
    /// the tensor is flagged `requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        tensor.clear_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, av.data(), bv.data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `[b,m,k] x [b,k,n] -> [b,m,n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("batch_matmul", av, bv));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_acc(
                &mut out[i * m * n..(i + 1) * m * n],
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![bs, m, n], out),
            Op::BatchMatMul(a, b),
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<usize, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        let cols = *av.shape().last().unwrap_or(&0);
        if rv.shape().len() != 1 || rv.shape()[0] != cols {
            return Err(mismatch(op, av, rv));
        }
        Ok(cols)
    }

    /// Adds a `[n]` vector to every row of a tensor whose last axis is `n`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let cols = self.check_row("add_row", a, row)?;
        let (av, rv) = (self.value(a), self.value(row));
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(cols) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of a tensor by a `[n]` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let cols = self.check_row("mul_row", a, row)?;
        let (av, rv) = (self.value(a), self.value(row));
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(cols) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o *= r;
            }
        }
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|x| x * factor).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, factor), &[a])
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, offset: f64) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|x| x + offset).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Shift(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let cols = *av.shape().last().unwrap_or(&0);
        if cols == 0 || eps < 0.0 {
            return Err(NumericsError::InvalidShape {
                op: "layer_norm",
                shape: av.shape().to_vec(),
                reason: "needs a non-empty last axis and eps >= 0".into(),
            });
        }
        let n = cols as f64;
        let mut out = vec![0.0; av.numel()];
        let mut inv_std = Vec::with_capacity(av.numel() / cols);
        for (src, dst) in av.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mut sum = 0.0;
            for &x in src {
                sum += x;
            }
            let mean = sum / n;
            let mut var = 0.0;
            for &x in src {
                var += (x - mean) * (x - mean);
            }
            let inv = 1.0 / (var / n + eps).sqrt();
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = av.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { input: a, inv_std },
            &[a],
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = *av.shape().last().unwrap_or(&1);
        let out = softmax_rows(av.data(), cols);
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = *av.shape().last().unwrap_or(&1);
        let out = log_softmax_rows(av.data(), cols);
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let rank = av.shape().len();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank
            && axes.iter().all(|&x| x < rank && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(NumericsError::InvalidShape {
                op: "permute",
                shape: av.shape().to_vec(),
                reason: format!("{axes:?} is not a permutation of the axes"),
            });
        }
        let (out, shape) = permute_data(av.data(), av.shape(), axes);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Gathers rows of a `[vocab, dim]` table: output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "embedding",
                shape: tv.shape().to_vec(),
                reason: "table must be 2-D".into(),
            });
        }
        let (rows, dim) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                bound: rows,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), dim], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut total = 0.0;
        for &x in self.value(a).data() {
            total += x;
        }
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut total = 0.0;
        for &x in av.data() {
            total += x;
        }
        let n = av.numel() as f64;
        self.push(Tensor::scalar(total / n), Op::Mean(a), &[a])
    }

    /// Mean over axis 1 of a `[b, s, d]` tensor, giving `[b, d]`.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.shape().len() != 3 {
            return Err(NumericsError::InvalidShape {
                op: "mean_axis1",
                shape: av.shape().to_vec(),
                reason: "expects a 3-D tensor".into(),
            });
        }
        let (b, s, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let dst = &mut out[bi * d..(bi + 1) * d];
            for si in 0..s {
                let src = &av.data()[(bi * s + si) * d..(bi * s + si + 1) * d];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += x;
                }
            }
            for o in dst.iter_mut() {
                *o /= s as f64;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![b, d], out), Op::MeanAxis1(a), &[a]))
    }

    /// Selects `a[i, indices[i]]` from a `[b, c]` tensor, giving `[b]`.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.shape()[0] != indices.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "pick",
                lhs: av.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let cols = av.shape()[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(NumericsError::IndexOutOfRange {
                op: "pick",
                index: bad,
                bound: cols,
            });
        }
        let out: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(row, &c)| av.data()[row * cols + c])
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], out),
            Op::Pick {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    /// Propagates gradients from a scalar `loss` to every node that requires
    /// them. The tape itself is not modified, so repeated calls give
    /// identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let bt = transpose2(bv.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    gemm_acc(&mut da, g, &bt, m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let at = transpose2(av.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    gemm_acc(&mut db, &at, g, k, m, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                if self.wants(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        let bt = transpose2(&bv.data()[i * k * n..(i + 1) * k * n], k, n);
                        gemm_acc(
                            &mut da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &bt,
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let at = transpose2(&av.data()[i * m * k..(i + 1) * m * k], m, k);
                        gemm_acc(
                            &mut db[i * k * n..(i + 1) * k * n],
                            &at,
                            &g[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                        );
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*row) {
                    let cols = self.value(*row).numel();
                    let mut dr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let cols = rv.numel();
                if self.wants(*a) {
                    let mut da = g.to_vec();
                    for chunk in da.chunks_mut(cols) {
                        for (d, r) in chunk.iter_mut().zip(rv.data()) {
                            *d *= r;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*row) {
                    let mut dr = vec![0.0; cols];
                    for (gc, ac) in g.chunks(cols).zip(av.data().chunks(cols)) {
                        for ((d, gx), ax) in dr.iter_mut().zip(gc).zip(ac) {
                            *d += gx * ax;
                        }
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, factor) => {
                accumulate(grads, *a, g.iter().map(|x| x * factor).collect());
            }
            Op::Shift(a) | Op::Reshape(a) => {
                accumulate(grads, *a, g.to_vec());
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = g
                    .iter()
                    .zip(av.data())
                    .map(|(&gx, &x)| if x > 0.0 { gx } else { 0.0 })
                    .collect();
                accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = g
                    .iter()
                    .zip(av.data())
                    .map(|(&gx, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gx * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, *a, da);
            }
            Op::LayerNorm { input, inv_std } => {
                let cols = *out.shape().last().unwrap();
                let n = cols as f64;
                let mut da = vec![0.0; g.len()];
                for (row, ((gc, yc), dc)) in g
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(da.chunks_mut(cols))
                    .enumerate()
                {
                    let mut mean_g = 0.0;
                    let mut mean_gy = 0.0;
                    for (&gx, &y) in gc.iter().zip(yc) {
                        mean_g += gx;
                        mean_gy += gx * y;
                    }
                    mean_g /= n;
                    mean_gy /= n;
                    let inv = inv_std[row];
                    for ((d, &gx), &y) in dc.iter_mut().zip(gc).zip(yc) {
                        *d = inv * (gx - mean_g - y * mean_gy);
                    }
                }
                accumulate(grads, *input, da);
            }
            Op::Softmax(a) => {
                let cols = *out.shape().last().unwrap();
                let mut da = vec![0.0; g.len()];
                for ((gc, yc), dc) in g
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(da.chunks_mut(cols))
                {
                    let mut dot = 0.0;
                    for (&gx, &y) in gc.iter().zip(yc) {
                        dot += gx * y;
                    }
                    for ((d, &gx), &y) in dc.iter_mut().zip(gc).zip(yc) {
                        *d = y * (gx - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let cols = *out.shape().last().unwrap();
                let mut da = vec![0.0; g.len()];
                for ((gc, yc), dc) in g
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(da.chunks_mut(cols))
                {
                    let mut total = 0.0;
                    for &gx in gc {
                        total += gx;
                    }
                    for ((d, &gx), &y) in dc.iter_mut().zip(gc).zip(yc) {
                        *d = gx - y.exp() * total;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (da, _) = permute_data(g, out.shape(), &inverse);
                accumulate(grads, *input, da);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let dim = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * dim..(id + 1) * dim];
                    for (d, x) in dst.iter_mut().zip(&g[row * dim..(row + 1) * dim]) {
                        *d += x;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::MeanAxis1(a) => {
                let shape = self.value(*a).shape();
                let (b, s, d) = (shape[0], shape[1], shape[2]);
                let mut da = vec![0.0; b * s * d];
                for bi in 0..b {
                    for si in 0..s {
                        let dst = &mut da[(bi * s + si) * d..(bi * s + si + 1) * d];
                        for (o, x) in dst.iter_mut().zip(&g[bi * d..(bi + 1) * d]) {
                            *o = x / s as f64;
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Pick { input, indices } => {
                let cols = self.value(*input).shape()[1];
                let mut da = vec![0.0; indices.len() * cols];
                for (row, &c) in indices.iter().enumerate() {
                    da[row * cols + c] = g[row];
                }
                accumulate(grads, *input, da);
            }
        }
    }
}
