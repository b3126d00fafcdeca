//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to replay its adjoint. Nodes are appended after their inputs, so the
//! tape is already in topological order and `backward` is a single reverse
//! sweep.

mod check;

pub use check::{finite_diff_check, GradCheck};

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    TileRows(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax { input: a, .. }
            | Op::SliceRows { input: a, .. }
            | Op::SliceCols { input: a, .. }
            | Op::GatherRows { input: a, .. }
            | Op::TileRows(a)
            | Op::L2NormalizeRows { input: a, .. }
            | Op::CrossEntropy { logits: a, .. } => vec![*a],
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
///
/// A tape is single-use for differentiation: after [`Tape::backward`] it is
/// marked consumed and further `backward` calls fail. Values and leaf
/// gradients stay readable; intermediate gradients are not kept.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            ref op => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    fn zip_same_shape(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                op,
                format!("shapes differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "add_row")?;
        let tb = self.value(bias);
        if tb.numel() != cols {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} does not match {rows}x{cols}", tb.shape()),
            ));
        }
        let b = tb.data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Exact GELU, `x·Φ(x)` with the erf-based normal CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, t: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(t).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(t).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    y[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    y[at(k)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, y)?;
        Ok(self.push(
            out,
            Op::Softmax {
                input: t,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, t: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let shape = self.shape(t).to_vec();
        let n = *shape.last().unwrap();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != n {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{name} {:?} does not match last axis {n}", self.shape(v)),
                ));
            }
        }
        let x = self.value(t).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                y[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(shape, y)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: t,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of 0..{rows}", start + len),
            ));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::matrix(len, cols, data)?;
        Ok(self.push(out, Op::SliceRows { input: x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} out of 0..{cols}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.push(out, Op::SliceCols { input: x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts differ: {cols} vs {c}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims2(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Stacks `times` copies of a matrix vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "tile_rows")?;
        if times == 0 {
            return Err(Error::dim("tile_rows", "times must be positive"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(times * src.len());
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let out = Tensor::matrix(rows * times, cols, data)?;
        Ok(self.push(out, Op::TileRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(x))
    }

    /// Scales each row to unit Euclidean norm. A zero row is an error rather
    /// than being nudged off zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "l2_normalize_rows")?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(src.len());
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding { row: r });
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::L2NormalizeRows { input: x, norms }))
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::dim(
                "cross_entropy",
                format!("target {bad} out of range for {cols} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &z[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[targets[r]];
            for j in 0..cols {
                probs[r * cols + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Accumulates adjoints of `loss` into every reachable node that requires
    /// a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.consumed = true;

        let mut reachable = vec![false; loss.0 + 1];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reachable[i] {
                for v in self.nodes[i].op.inputs() {
                    reachable[v.0] = true;
                }
            }
        }
        // Leaves get a buffer even if nothing flows into them; intermediate
        // buffers are created on first use and dropped once propagated.
        for (i, &r) in reachable.iter().enumerate() {
            let node = &self.nodes[i];
            if r && node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, g.data());
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => add_into(g.data_mut(), delta),
            slot => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta.to_vec()).expect("delta matches node shape"));
            }
        }
    }

    fn grad_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let node = &self.nodes[v.0];
        let g = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        Some(g.data_mut())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Saved state is moved out while adjoints are written, then restored.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2("matmul").unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                if self.wants(*a) {
                    let bt = transpose_raw(self.nodes[b.0].value.data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.wants(*b) {
                    let at = transpose_raw(self.nodes[a.0].value.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2("transpose").unwrap();
                let d = transpose_raw(g, c, r);
                self.accumulate(*a, &d);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::AddRow(x, bias) => {
                self.accumulate(*x, g);
                let cols = self.nodes[bias.0].value.numel();
                let mut db = vec![0.0; cols];
                for row in g.chunks(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(*a, &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                let y = self.nodes[i].value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..*outer {
                    for c in 0..*inner {
                        let at = |k: usize| (o * len + k) * inner + c;
                        let dot: f64 = (0..*len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..*len {
                            d[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.nodes[gamma.0].value.numel();
                let gam = self.nodes[gamma.0].value.data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        dx[r * n + j] = is / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(*input, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::SliceRows { input, start } => {
                let cols = self.nodes[input.0].value.shape()[1];
                if let Some(d) = self.grad_mut(*input) {
                    add_into(&mut d[start * cols..start * cols + g.len()], g);
                }
            }
            Op::SliceCols { input, start } => {
                let (rows, cols) = self.nodes[input.0].value.dims2("slice_cols").unwrap();
                let len = g.len() / rows;
                if let Some(d) = self.grad_mut(*input) {
                    for r in 0..rows {
                        let at = r * cols + start;
                        add_into(&mut d[at..at + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(*p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.shape()[0];
                let total = self.nodes[i].value.shape()[1];
                let mut col = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    if let Some(d) = self.grad_mut(*p) {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * c..(r + 1) * c],
                                &g[r * total + col..r * total + col + c],
                            );
                        }
                    }
                    col += c;
                }
            }
            Op::GatherRows { input, rows } => {
                let cols = self.nodes[input.0].value.shape()[1];
                if let Some(d) = self.grad_mut(*input) {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut d[r * cols..(r + 1) * cols],
                            &g[k * cols..(k + 1) * cols],
                        );
                    }
                }
            }
            Op::TileRows(input) => {
                let n = self.nodes[input.0].value.numel();
                let mut d = vec![0.0; n];
                for block in g.chunks(n) {
                    for (a, v) in d.iter_mut().zip(block) {
                        *a += v;
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.nodes[a.0].value.numel()];
                self.accumulate(*a, &d);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let d = vec![g[0] / n as f64; n];
                self.accumulate(*a, &d);
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = self.nodes[i].value.data();
                let cols = y.len() / norms.len();
                let mut d = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= scale;
                }
                self.accumulate(*logits, &d);
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, d) in dst.iter_mut().zip(src) {
        *a += d;
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}
