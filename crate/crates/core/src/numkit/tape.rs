//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation pushes one node holding its forward value. `backward`
//! walks the record in reverse and accumulates vector-Jacobian products
//! into per-node buffers. Nothing is parallel; replaying the same ops on
//! the same inputs produces bit-identical gradients.

use crate::error::{Error, Result};

use super::ops::{self, gemm_acc, layernorm_raw, sigmoid, softmax_rows_in_place, transpose_raw};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    ScaleByEntry {
        x: NodeId,
        coeffs: NodeId,
        index: usize,
    },
    AddRowVec(NodeId, NodeId),
    AddConst(NodeId),
    Silu(NodeId),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(NodeId),
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`, or `None` when the node
    /// does not influence the loss through any differentiable path.
    pub fn get(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[id.0].clone(), g.clone()))
    }

    pub fn get_slice(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf whose gradient is tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = ops::transpose(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<T>, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `coeffs[index] · x`, differentiable in both operands.
    pub fn scale_by_entry(&mut self, x: NodeId, coeffs: NodeId, index: usize) -> Result<NodeId> {
        let n = self.value(coeffs).len();
        if index >= n {
            return Err(Error::shape("scale_by_entry", format!("index {index} of {n} coefficients")));
        }
        let c = self.value(coeffs).data()[index];
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(coeffs);
        Ok(self.push(out, Op::ScaleByEntry { x, coeffs, index }, rg))
    }

    /// `x[n×d] + b[d]`, the bias broadcast across rows.
    pub fn add_row_vec(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, d) = dims(self.value(x));
        if self.value(b).len() != d {
            return Err(Error::shape(
                "add_row_vec",
                format!("bias length {} vs width {d}", self.value(b).len()),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for (v, &bv) in data[r * d..(r + 1) * d].iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRowVec(x, b), rg))
    }

    /// Adds a constant (non-differentiable) tensor, e.g. an attention bias.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor<T>) -> Result<NodeId> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape(
                "add_const",
                format!("{:?} vs {:?}", self.value(x).shape(), c.shape()),
            ));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let out = Tensor::from_parts(c.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::EmptyInput("mean of an empty tensor"));
        }
        let m = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, d) = dims(self.value(x));
        if d < 2 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layernorm", format!("width {d}")));
        }
        let (out, cache) = layernorm_raw(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            rows,
            d,
        );
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: cache.xhat,
                rstd: cache.rstd,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = dims(self.value(x));
        let mut data = self.value(x).data().to_vec();
        softmax_rows_in_place(&mut data, rows, cols)?;
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Row lookup `table[indices[i]]`.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, d) = dims(self.value(table));
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::Vocabulary { id: i, vocab: rows });
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let out = Tensor::from_parts(vec![indices.len(), d], data);
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let d = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or(Error::EmptyInput("concat_rows"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != d {
                return Err(Error::shape("concat_rows", format!("width {} vs {d}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        if start + len > v.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}+{len} exceeds {} rows", v.rows()),
            ));
        }
        let out = v.slice_rows(start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or(Error::EmptyInput("concat_cols"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = dims(self.value(x));
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} exceeds {cols} columns"),
            ));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(a));
                let n = self.value(b).cols();
                if self.rg(a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(self.value(b).data(), k, n);
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(g, &bt, &mut da, m, n, k);
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(self.value(a).data(), m, k);
                    let mut db = vec![T::zero(); k * n];
                    gemm_acc(&at, g, &mut db, k, m, n);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = dims(&node.value);
                self.accumulate(grads, a, transpose_raw(g, r, c));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    self.accumulate(grads, a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::Scale(a, s) => {
                self.accumulate(grads, a, g.iter().map(|&v| v * s).collect());
            }
            &Op::ScaleByEntry { x, coeffs, index } => {
                let c = self.value(coeffs).data()[index];
                if self.rg(x) {
                    self.accumulate(grads, x, g.iter().map(|&v| v * c).collect());
                }
                if self.rg(coeffs) {
                    let mut dc = vec![T::zero(); self.value(coeffs).len()];
                    dc[index] = g
                        .iter()
                        .zip(self.value(x).data())
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    self.accumulate(grads, coeffs, dc);
                }
            }
            &Op::AddRowVec(x, b) => {
                self.accumulate(grads, x, g.to_vec());
                if self.rg(b) {
                    let d = self.value(b).len();
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::AddConst(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Silu(x) => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Square(x) => {
                let two = T::lit(2.0);
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| two * v * gv)
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                let v = g[0] / T::lit(n as f64);
                self.accumulate(grads, x, vec![v; n]);
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, d) = dims(self.value(*x));
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gij = g[r * d + j];
                            dg[j] += gij * xhat[r * d + j];
                            db[j] += gij;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
                if self.rg(*x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            let h = xhat[r * d + j];
                            dx[r * d + j] = rstd[r] * (dh - inv_d * sum_dh - h * inv_d * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::Softmax(x) => {
                let (rows, cols) = dims(&node.value);
                let y = node.value.data();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::Gather { table, indices } => {
                if self.rg(*table) {
                    let d = self.value(*table).cols();
                    let mut dt = vec![T::zero(); self.value(*table).len()];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[k * d + j];
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            &Op::SliceRows { x, start } => {
                if self.rg(x) {
                    let d = self.value(x).cols();
                    let mut dx = vec![T::zero(); self.value(x).len()];
                    dx[start * d..start * d + g.len()].copy_from_slice(g);
                    self.accumulate(grads, x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = dims(&node.value);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            &Op::SliceCols { x, start } => {
                if self.rg(x) {
                    let (rows, cols) = dims(self.value(x));
                    let len = node.value.cols();
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accumulate(grads, x, dx);
                }
            }
        }
    }
}
