//! Define-by-run computation tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the recipe
//! needed to push gradients back to its inputs. Inputs always precede their
//! consumers, so a single reverse sweep over the node list is a valid
//! topological traversal.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[rows, cols] + [cols]`, broadcast over rows.
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        width: usize,
        c_in: usize,
        c_out: usize,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
}

/// Kind tag for a recorded operation, used for introspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    MatMul,
    Transpose,
    Relu,
    Softmax,
    LayerNorm,
    Conv1d,
    GatherRows,
    SliceCols,
    ConcatCols,
    Sum,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    matmul_grad_fault: Option<f64>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Scales every matmul left-operand gradient by `scale` during backward.
    /// Only exists so the self-check can prove it notices a broken rule.
    #[doc(hidden)]
    pub fn inject_matmul_grad_fault(&mut self, scale: Option<f64>) {
        self.matmul_grad_fault = scale;
    }

    /// Records a tensor as a graph input. Gradients are tracked when the
    /// tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        match &self.nodes[v.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Sum(..) => OpKind::Sum,
        }
    }

    /// All recorded nodes of the given kind, in recording order.
    pub fn nodes_of_kind(&self, kind: OpKind) -> Vec<Var> {
        (0..self.nodes.len())
            .map(Var)
            .filter(|&v| self.op_kind(v) == kind)
            .collect()
    }

    /// Hash of every ReLU's on/off pattern. Two forward passes with equal
    /// signatures lie in the same linear region of all ReLUs.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.nodes[x.0].value.data() {
                    (v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let rg = self.rg(inputs);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op, rg))
    }

    fn mat_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!(
                "{op}: expected a 2-D tensor, got shape {s:?}"
            ))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.make(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.make(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.make(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        self.make(self.shape(a).to_vec(), data, Op::Scale(a, s), &[a])
    }

    /// Adds a `[cols]` (or `[1, cols]`) vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(b).len() != cols {
            return Err(shape_mismatch("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(a, c)| a + c))
            .collect();
        self.make(self.shape(x).to_vec(), data, Op::AddRow(x, b), &[x, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.make(vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "transpose")?;
        let data = transpose_kernel(self.value(a).data(), r, c);
        self.make(vec![c, r], data, Op::Transpose(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        self.make(self.shape(a).to_vec(), data, Op::Relu(a), &[a])
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| src[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        self.make(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: last dim {d} but gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let xh = (row[j] - mean) * s;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        self.make(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Same-padded 1-D convolution over time.
    ///
    /// `x: [T, C_in]`, `kernel: [K, C_in, C_out]`, `bias: [C_out]`; `K` must
    /// be odd and samples outside `0..T` read as zero.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (t_len, c_in) = self.mat_dims(x, "conv1d")?;
        let (width, kc_in, c_out) = match self.shape(kernel) {
            [k, ci, co] => (*k, *ci, *co),
            s => {
                return Err(Error::Dimension(format!(
                    "conv1d: kernel must be [K, C_in, C_out], got {s:?}"
                )))
            }
        };
        if width % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d: kernel width {width} must be odd for same padding"
            )));
        }
        if kc_in != c_in || self.value(bias).len() != c_out {
            return Err(Error::Dimension(format!(
                "conv1d: input {:?}, kernel {:?}, bias {:?}",
                self.shape(x),
                self.shape(kernel),
                self.shape(bias)
            )));
        }
        let xs = self.value(x).data();
        let w = self.value(kernel).data();
        let b = self.value(bias).data();
        let pad = width / 2;
        let mut out = Vec::with_capacity(t_len * c_out);
        for _ in 0..t_len {
            out.extend_from_slice(b);
        }
        for t in 0..t_len {
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for k in 0..width {
                let Some(s) = (t + k).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                let xrow = &xs[s * c_in..(s + 1) * c_in];
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = &w[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        self.make(
            vec![t_len, c_out],
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                width,
                c_in,
                c_out,
            },
            &[x, kernel, bias],
        )
    }

    /// Row gather: output row `i` is `src[idx[i]]`. Backs both embedding
    /// lookup and length regulation.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.mat_dims(src, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Input("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::OutOfVocabulary {
                id: bad,
                size: rows,
            });
        }
        let s = self.value(src).data();
        let data = idx
            .iter()
            .flat_map(|&i| s[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        self.make(
            vec![idx.len(), cols],
            data,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::Dimension(format!(
                "slice_cols: {start}..{} outside {cols} columns",
                start + len
            )));
        }
        let s = self.value(x).data();
        let data = (0..rows)
            .flat_map(|r| s[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        self.make(vec![rows, len], data, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols: nothing to concatenate".into()))?;
        let (rows, _) = self.mat_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if r != rows {
                return Err(shape_mismatch(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.make(
            vec![rows, total],
            data,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.make(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// `Σ (a - b)²` as a scalar node.
    pub fn sum_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }

    /// Reverse sweep from a scalar `loss`. Populates `grad` on every node
    /// that requires it; calling twice recomputes rather than accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        for (i, g) in grads.into_iter().enumerate() {
            if self.nodes[i].requires_grad {
                self.nodes[i].value.grad = g;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                });
                acc(*b, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| axpy(s, g, *k)),
            Op::AddRow(x, b) => {
                acc(*x, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| {
                    let c = s.len();
                    for row in g.chunks(c) {
                        axpy(s, row, 1.0);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let fault = self.matmul_grad_fault;
                acc(*a, &|s| {
                    // dA = dC · Bᵀ
                    for r in 0..m {
                        for kk in 0..k {
                            let mut t = 0.0;
                            for c in 0..n {
                                t += g[r * n + c] * bv[kk * n + c];
                            }
                            s[r * k + kk] += fault.map_or(t, |f| t * f);
                        }
                    }
                });
                acc(*b, &|s| {
                    // dB = Aᵀ · dC
                    for r in 0..m {
                        for kk in 0..k {
                            let x = av[r * k + kk];
                            for c in 0..n {
                                s[kk * n + c] += x * g[r * n + c];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = rstd.len();
                acc(*x, &|s| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        let k = rstd[r] / d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            s[r * d + j] += k * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                });
                acc(*gain, &|s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &|s| {
                    for row in g.chunks(d) {
                        axpy(s, row, 1.0);
                    }
                });
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                width,
                c_in,
                c_out,
            } => {
                let (width, c_in, c_out) = (*width, *c_in, *c_out);
                let t_len = self.shape(*x)[0];
                let pad = width / 2;
                let xs = self.value(*x).data();
                let w = self.value(*kernel).data();
                let taps = |t: usize, k: usize| (t + k).checked_sub(pad).filter(|&s| s < t_len);
                acc(*x, &|s| {
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for k in 0..width {
                            let Some(src) = taps(t, k) else { continue };
                            for c in 0..c_in {
                                let wrow = &w[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                s[src * c_in + c] +=
                                    grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*kernel, &|s| {
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for k in 0..width {
                            let Some(src) = taps(t, k) else { continue };
                            for c in 0..c_in {
                                let xv = xs[src * c_in + c];
                                let srow =
                                    &mut s[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                axpy(srow, grow, xv);
                            }
                        }
                    }
                });
                acc(*bias, &|s| {
                    for row in g.chunks(c_out) {
                        axpy(s, row, 1.0);
                    }
                });
            }
            Op::GatherRows { src, idx } => {
                let cols = self.value(*src).cols();
                acc(*src, &|s| {
                    for (i, &r) in idx.iter().enumerate() {
                        axpy(
                            &mut s[r * cols..(r + 1) * cols],
                            &g[i * cols..(i + 1) * cols],
                            1.0,
                        );
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let len = node.value.cols();
                acc(*x, &|s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        axpy(&mut s[r * cols + start..r * cols + start + len], grow, 1.0);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &|s| {
                        for (r, srow) in s.chunks_mut(w).enumerate() {
                            axpy(srow, &g[r * total + offset..r * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => acc(*x, &|s| {
                for v in s.iter_mut() {
                    *v += g[0];
                }
            }),
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let x = a[i * k + kk];
            axpy(orow, &b[kk * n..(kk + 1) * n], x);
        }
    }
    out
}

fn transpose_kernel(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
