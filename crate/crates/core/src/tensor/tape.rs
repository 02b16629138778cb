//! Computation tape recording forward operations for reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so every node's inputs precede it
//! and the backward pass is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{log_softmax_slice, softmax_slice, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: Option<usize>,
        count: usize,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf sharing storage with the caller.
    pub fn param(&mut self, value: Arc<Tensor<F>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf sharing storage with the caller.
    pub fn constant_arc(&mut self, value: Arc<Tensor<F>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `a * b^T`, used for attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Transpose(x), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Adds a bias vector of length `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let cols = vx.last_dim();
        if vb.numel() != cols {
            return Err(shape_err(
                "add_row",
                format!("bias of {} for rows of {cols}", vb.numel()),
            ));
        }
        let b = vb.data();
        let data = vx
            .data()
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(F::tanh);
        let needs = self.needs(x);
        self.push(out, Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| F::one() / (F::one() + (-v).exp()));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    fn rowwise(&mut self, x: Var, log: bool) -> Var {
        let vx = self.value(x);
        let cols = vx.last_dim().max(1);
        let mut out = vec![F::zero(); vx.numel()];
        for (src, dst) in vx.data().chunks(cols).zip(out.chunks_mut(cols)) {
            if log {
                log_softmax_slice(src, dst);
            } else {
                softmax_slice(src, dst);
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        let op = if log { Op::LogSoftmax(x) } else { Op::Softmax(x) };
        self.push(t, op, needs)
    }

    fn along_axis(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank == 0 || axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        if axis == rank - 1 {
            Ok(self.rowwise(x, log))
        } else if rank == 2 {
            let t = self.transpose(x)?;
            let s = self.rowwise(t, log);
            self.transpose(s)
        } else {
            Err(TensorError::InvalidAxis { axis, rank })
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.along_axis(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.along_axis(x, axis, true)
    }

    /// Normalizes each row over the last axis with population variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.last_dim();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {} / bias {} for rows of {cols}",
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let n = F::of(cols as f64);
        let rows = vx.outer();
        let mut xhat = vec![F::zero(); vx.numel()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, cols) = vt.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), cols], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&values)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).dims2("concat_cols")?.0,
            None => return Err(shape_err("concat_cols", "no inputs".into())),
        };
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("row count {r} != {rows}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("slice_rows")?;
        if start + len > rows {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{} of {rows}", start + len),
            ));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(vec![len, cols], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SliceRows { x, start }, needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("slice_cols")?;
        if start + len > cols {
            return Err(shape_err(
                "slice_cols",
                format!("{start}..{} of {cols}", start + len),
            ));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SliceCols { x, start }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(t, Op::Sum(x), needs)
    }

    /// Mean over non-pad rows of `-log_softmax(logits)[t, target_t]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad: Option<usize>,
    ) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, vocab) = vl.dims2("cross_entropy")?;
        if rows != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} logit rows for {} targets", targets.len()),
            ));
        }
        let mut probs = vec![F::zero(); rows * vocab];
        let mut logp = vec![F::zero(); vocab];
        let mut total = F::zero();
        let mut count = 0usize;
        for (t, &target) in targets.iter().enumerate() {
            if target >= vocab {
                return Err(TensorError::TargetOutOfRange { id: target, vocab });
            }
            if Some(target) == pad {
                continue;
            }
            let row = vl.row(t);
            log_softmax_slice(row, &mut logp);
            total += -logp[target];
            for (p, &l) in probs[t * vocab..(t + 1) * vocab].iter_mut().zip(&logp) {
                *p = l.exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::AllPadding);
        }
        let loss = total / F::of(count as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                count,
                probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// differentiable leaf and clears the tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<F>> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), F::one()));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.needs_grad => {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                }
                _ => None,
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    let ga = acc(grads, *a, va.shape());
                    matmul_nt(dyd, vb.data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, vb.shape());
                    matmul_tn(va.data(), dyd, gb, k, m, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                if self.needs(*a) {
                    let ga = acc(grads, *a, va.shape());
                    matmul_nn(dyd, vb.data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, vb.shape());
                    matmul_tn(dyd, va.data(), gb, n, m, k);
                }
            }
            Op::Transpose(x) => {
                let t = dy.transpose().expect("rank-2 gradient");
                add_into(acc(grads, *x, self.value(*x).shape()), t.data());
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(acc(grads, v, y.shape()), dyd);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs(*x) {
                    add_into(acc(grads, *x, y.shape()), dyd);
                }
                if self.needs(*bias) {
                    let cols = y.last_dim().max(1);
                    let gb = acc(grads, *bias, self.value(*bias).shape());
                    for row in dyd.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = acc(grads, *a, y.shape());
                    for ((g, &d), &o) in ga.iter_mut().zip(dyd).zip(vb.data()) {
                        *g += d * o;
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, y.shape());
                    for ((g, &d), &o) in gb.iter_mut().zip(dyd).zip(va.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(x, f) => {
                let gx = acc(grads, *x, y.shape());
                for (g, &d) in gx.iter_mut().zip(dyd) {
                    *g += d * *f;
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let gx = acc(grads, *x, y.shape());
                for ((g, &d), &v) in gx.iter_mut().zip(dyd).zip(vx.data()) {
                    if v > F::zero() {
                        *g += d;
                    }
                }
            }
            Op::Tanh(x) => {
                let gx = acc(grads, *x, y.shape());
                for ((g, &d), &o) in gx.iter_mut().zip(dyd).zip(y.data()) {
                    *g += d * (F::one() - o * o);
                }
            }
            Op::Sigmoid(x) => {
                let gx = acc(grads, *x, y.shape());
                for ((g, &d), &o) in gx.iter_mut().zip(dyd).zip(y.data()) {
                    *g += d * o * (F::one() - o);
                }
            }
            Op::Softmax(x) => {
                let cols = y.last_dim().max(1);
                let gx = acc(grads, *x, y.shape());
                for ((g, d), o) in gx
                    .chunks_mut(cols)
                    .zip(dyd.chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let dot: F = d.iter().zip(o).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        g[c] += o[c] * (d[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = y.last_dim().max(1);
                let gx = acc(grads, *x, y.shape());
                for ((g, d), o) in gx
                    .chunks_mut(cols)
                    .zip(dyd.chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let total: F = d.iter().copied().sum();
                    for c in 0..cols {
                        g[c] += d[c] - o[c].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = y.last_dim().max(1);
                let gv = self.value(*gain).data();
                if self.needs(*gain) {
                    let gg = acc(grads, *gain, self.value(*gain).shape());
                    for (d, h) in dyd.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += d[c] * h[c];
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = acc(grads, *bias, self.value(*bias).shape());
                    for d in dyd.chunks(cols) {
                        add_into(gb, d);
                    }
                }
                if self.needs(*x) {
                    let n = F::of(cols as f64);
                    let gx = acc(grads, *x, y.shape());
                    let mut dh = vec![F::zero(); cols];
                    for (r, ((g, d), h)) in gx
                        .chunks_mut(cols)
                        .zip(dyd.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        for c in 0..cols {
                            dh[c] = d[c] * gv[c];
                        }
                        let sum_dh: F = dh.iter().copied().sum();
                        let sum_dh_h: F = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[r] / n;
                        for c in 0..cols {
                            g[c] += scale * (n * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let cols = vt.last_dim();
                let gt = acc(grads, *table, vt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(
                        &mut gt[id * cols..(id + 1) * cols],
                        &dyd[r * cols..(r + 1) * cols],
                    );
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        add_into(
                            acc(grads, p, self.value(p).shape()),
                            &dyd[offset..offset + len],
                        );
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.last_dim();
                let mut start = 0;
                for &p in parts {
                    let (rows, cols) = (self.value(p).shape()[0], self.value(p).shape()[1]);
                    if self.needs(p) {
                        let gp = acc(grads, p, self.value(p).shape());
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * cols..(r + 1) * cols],
                                &dyd[r * total + start..r * total + start + cols],
                            );
                        }
                    }
                    start += cols;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = y.last_dim();
                let gx = acc(grads, *x, self.value(*x).shape());
                add_into(&mut gx[start * cols..start * cols + dyd.len()], dyd);
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = (y.shape()[0], y.shape()[1]);
                let cols = self.value(*x).last_dim();
                let gx = acc(grads, *x, self.value(*x).shape());
                for r in 0..rows {
                    add_into(
                        &mut gx[r * cols + start..r * cols + start + len],
                        &dyd[r * len..(r + 1) * len],
                    );
                }
            }
            Op::Reshape(x) => {
                add_into(acc(grads, *x, self.value(*x).shape()), dyd);
            }
            Op::Sum(x) => {
                let d = dyd[0];
                for g in acc(grads, *x, self.value(*x).shape()) {
                    *g += d;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                count,
                probs,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = dyd[0] / F::of(*count as f64);
                let gl = acc(grads, *logits, self.value(*logits).shape());
                for (t, &target) in targets.iter().enumerate() {
                    if Some(target) == *pad {
                        continue;
                    }
                    let row = &mut gl[t * vocab..(t + 1) * vocab];
                    for (g, &p) in row.iter_mut().zip(&probs[t * vocab..(t + 1) * vocab]) {
                        *g += scale * p;
                    }
                    row[target] -= scale;
                }
            }
        }
    }
}

fn acc<'g, F: Scalar>(grads: &'g mut [Option<Tensor<F>>], v: Var, shape: &[usize]) -> &'g mut [F] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, -2.0], vec![3.0, 0.5]]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
        assert!(tape.is_empty());
    }

    #[test]
    fn grad_of_squared_norm_is_twice_x() {
        let xv = t(&[vec![1.5], vec![-2.0], vec![0.25]]);
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone(), true);
        let xt = tape.transpose(x).unwrap();
        let q = tape.matmul(xt, x).unwrap();
        let s = tape.sum(q);
        let g = tape.backward(s).unwrap();
        let want: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2, 2]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0]]), true);
        let c = tape.constant(t(&[vec![3.0, 4.0]]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0]]), true);
        let unused = tape.leaf(t(&[vec![5.0]]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![0.1, 2.0, -3.0], vec![5.0, 5.0, 5.0]]));
        let shifted = tape.constant(t(&[vec![100.1, 102.0, 97.0], vec![-2.0, -2.0, -2.0]]));
        let s = tape.softmax(x, 1).unwrap();
        let s2 = tape.softmax(shifted, 1).unwrap();
        let (a, b) = (tape.value(s).clone(), tape.value(s2).clone());
        for r in 0..2 {
            let total: f64 = a.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        for (p, q) in a.row(0).iter().zip(b.row(0)) {
            assert!((p - q).abs() < 1e-12);
        }
        for &p in a.row(1) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_axis_zero_normalizes_columns() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![0.0, 1.0], vec![3f64.ln(), 1.0]]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        assert!((v.at(0, 0) - 0.25).abs() < 1e-15);
        assert!((v.at(1, 0) - 0.75).abs() < 1e-15);
        assert!((v.at(0, 1) - 0.5).abs() < 1e-15);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![4.0; 6]]));
        let g = tape.constant(Tensor::full(&[6], 1.0));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape = Tape::<f64>::new();
        let row: Vec<f64> = (0..32).map(|i| (i as f64 * 1.7).sin() * 3.0 + 2.0).collect();
        let x = tape.constant(t(&[row]));
        let g = tape.constant(Tensor::full(&[32], 1.0));
        let b = tape.constant(Tensor::zeros(&[32]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        let mean = v.iter().sum::<f64>() / 32.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = t(&[vec![0.3, -1.2, 2.0, 0.7], vec![1.0, 1.5, -0.5, 0.0]]);
        let report = grad_check(
            |tape, x| {
                let g = tape.constant(Tensor::from_f64(&[4], &[1.0, 0.5, -2.0, 1.5]).unwrap());
                let b = tape.constant(Tensor::from_f64(&[4], &[0.1, 0.0, 0.2, -0.3]).unwrap());
                let w = tape.constant(t(&[vec![0.5], vec![-1.0], vec![2.0], vec![0.25]]));
                let y = tape.layer_norm(x, g, b, 1e-5)?;
                let z = tape.matmul(y, w)?;
                let z = tape.tanh(z);
                Ok(tape.sum(z))
            },
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[3, 7]));
        let loss = tape.cross_entropy(l, &[1, 4, 6], None).unwrap();
        assert!((tape.value(loss).data()[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logits_is_zero() {
        let mut tape = Tape::<f64>::new();
        let mut logits = Tensor::full(&[2, 4], -1e4);
        logits.data_mut()[2] = 1e4;
        logits.data_mut()[4 + 1] = 1e4;
        let l = tape.constant(logits);
        let loss = tape.cross_entropy(l, &[2, 1], None).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn cross_entropy_matches_one_hot_sum() {
        let rows: Vec<Vec<f64>> = vec![
            vec![0.2, -1.0, 0.5, 1.5, 0.0],
            vec![2.0, 0.1, -0.3, 0.0, 1.1],
            vec![-0.5, -0.5, 3.0, 0.2, 0.7],
        ];
        let targets = [3usize, 0, 2];
        // Direct evaluation: -sum_w y_w log(yhat_w), yhat = exp(x)/sum(exp(x)).
        let mut want = 0.0;
        for (row, &tgt) in rows.iter().zip(&targets) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (w, &v) in row.iter().enumerate() {
                let y = if w == tgt { 1.0 } else { 0.0 };
                want -= y * (v.exp() / z).ln();
            }
        }
        want /= 3.0;
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t(&rows));
        let loss = tape.cross_entropy(l, &targets, None).unwrap();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_padding() {
        let rows = vec![vec![0.2, -1.0, 0.5], vec![9.0, 0.1, -0.3]];
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t(&rows));
        let padded = tape.cross_entropy(l, &[2, 0], Some(0)).unwrap();
        let l1 = tape.constant(t(&rows[..1]));
        let single = tape.cross_entropy(l1, &[2], Some(0)).unwrap();
        assert_eq!(tape.value(padded).data(), tape.value(single).data());
        let l2 = tape.constant(t(&rows));
        assert_eq!(
            tape.cross_entropy(l2, &[0, 0], Some(0)).unwrap_err(),
            TensorError::AllPadding
        );
        assert!(matches!(
            tape.cross_entropy(l2, &[3, 0], Some(0)),
            Err(TensorError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let x = t(&[vec![0.2, -1.0, 0.5], vec![1.0, 0.1, -0.3], vec![0.0, 0.4, 0.9]]);
        let report = grad_check(
            |tape, x| tape.cross_entropy(x, &[1, 0, 2], Some(2)),
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn structural_ops_gradients() {
        let x = t(&[vec![0.2, -1.0, 0.5, 0.3], vec![1.0, 0.1, -0.3, 2.0]]);
        let report = grad_check(
            |tape, x| {
                let a = tape.slice_cols(x, 0, 2)?;
                let b = tape.slice_cols(x, 2, 2)?;
                let c = tape.concat_cols(&[b, a])?;
                let r0 = tape.slice_rows(c, 0, 1)?;
                let r1 = tape.slice_rows(c, 1, 1)?;
                let stacked = tape.concat_rows(&[r1, r0, r1])?;
                let sm = tape.sigmoid(stacked);
                let flat = tape.reshape(sm, &[1, 12])?;
                let e = tape.constant(t(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![0.0, 3.0]]));
                let rows = tape.gather_rows(e, &[2, 0])?;
                let bias = tape.constant(Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap());
                let rows = tape.add_row(rows, bias)?;
                let s1 = tape.sum(rows);
                let s2 = tape.sum(flat);
                let both = tape.mul(s1, s2)?;
                let r = tape.relu(both);
                Ok(tape.scale(r, 0.5))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn softmax_matmul_composite_gradient() {
        let x = t(&[vec![0.2, -1.0, 0.5], vec![1.0, 0.1, -0.3]]);
        let report = grad_check(
            |tape, x| {
                let w = tape.constant(t(&[vec![0.3, 1.0], vec![-0.5, 0.2], vec![1.5, -1.0]]));
                let h = tape.matmul(x, w)?;
                let p = tape.softmax(h, 1)?;
                let lp = tape.log_softmax(h, 0)?;
                let q = tape.matmul_nt(p, lp)?;
                let sq = tape.mul(q, q)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gather_rejects_out_of_range_ids() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.gather_rows(e, &[3]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }
}
