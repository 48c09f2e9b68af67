use super::gemm::gemm;
use super::{Mask, Tensor};
use crate::error::{Error, Result};
use crate::lattice::{self, LatticeProbs};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Borrowed(&'a Tensor),
    Owned(Tensor),
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Glu(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: Var, kernel: Var, stride: usize, cols: Vec<f64> },
    SelectRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { x: Var, idx: Vec<usize> },
    Sum(Var),
    LatticeNll { blank: Var, label: Var, grad_blank: Vec<f64>, grad_label: Vec<f64> },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are computed eagerly when an op is recorded, so nodes are always in
/// topological order. Leaves may borrow tensors (model parameters) for the
/// lifetime of the graph. Gradients of leaves accumulate across calls to
/// [`Graph::backward`] until [`Graph::zero_grad`].
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Tensor>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Value::Owned(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Borrowed leaf, used for parameters so a forward pass copies nothing.
    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Value::Borrowed(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Value<'a>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {} (node {})",
                op_name(&op),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nothing upstream needs a gradient: drop the saved backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes its stored matrix.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul lhs")?;
        let (br, bc) = self.dims2(b, "matmul rhs")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions disagree: {m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() {
            return Err(Error::Shape(format!(
                "add_row: bias of {} values for rows of width {}",
                bv.numel(),
                xv.cols()
            )));
        }
        let d = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Relu(x), &[x])
    }

    /// Gated linear unit over the last dimension: `a ⊙ σ(b)` for `x = [a, b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if !c.is_multiple_of(2) {
            return Err(Error::Shape(format!("glu: odd last dimension {c}")));
        }
        let h = c / 2;
        let mut data = Vec::with_capacity(xv.numel() / 2);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            for j in 0..h {
                data.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        self.push(Tensor::new(shape, data)?, Op::Glu(x), &[x])
    }

    /// Row-wise softmax where masked (`false`) entries receive exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if mask.rows() != rows || mask.cols() != cols {
            return Err(Error::Shape(format!(
                "masked_softmax: mask {}x{} for scores {rows}x{cols}",
                mask.rows(),
                mask.cols()
            )));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let s = xv.row(r);
            let m = mask.row(r);
            let max = s.iter().zip(m).filter(|(_, &ok)| ok).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidMask { row: r });
            }
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if m[j] {
                    let e = (s[j] - max).exp();
                    out[j] = e;
                    total += e;
                }
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::MaskedSoftmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.numel());
        for r in 0..xv.rows() {
            let s = xv.row(r);
            let lse = log_sum_exp(s);
            data.extend(s.iter().map(|v| v - lse));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Per-row normalisation to zero mean and unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d == 0 {
            return Err(Error::Shape("layer_norm: empty rows".into()));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != d || b.numel() != d {
            return Err(Error::Shape(format!("layer_norm: gain/bias sizes {}/{} for width {d}", g.numel(), b.numel())));
        }
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                data.push(h * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Convolution along the time axis of a `[T, d_in]` input with a
    /// `[k, d_in, d_out]` kernel. Zero padding of `(k-1)/2` frames on the
    /// left (and as many as needed on the right) gives `⌈T/stride⌉` outputs.
    pub fn conv1d_time(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (t, d_in) = self.dims2(x, "conv1d_time input")?;
        if t == 0 {
            return Err(Error::EmptyInput("conv1d_time on zero frames".into()));
        }
        let (k, kd_in, d_out) = match self.value(kernel).shape() {
            [k, i, o] => (*k, *i, *o),
            s => return Err(Error::Shape(format!("conv1d_time kernel shape {s:?}"))),
        };
        if stride == 0 || k == 0 {
            return Err(Error::Shape("conv1d_time: stride and kernel size must be ≥ 1".into()));
        }
        if kd_in != d_in {
            return Err(Error::Shape(format!("conv1d_time: kernel expects {kd_in} input channels, got {d_in}")));
        }
        let t_out = t.div_ceil(stride);
        let pad = (k - 1) / 2;
        let xd = self.value(x).data();
        let width = k * d_in;
        let mut cols = vec![0.0; t_out * width];
        for o in 0..t_out {
            for j in 0..k {
                let src = (o * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let src = src as usize;
                    cols[o * width + j * d_in..o * width + (j + 1) * d_in]
                        .copy_from_slice(&xd[src * d_in..(src + 1) * d_in]);
                }
            }
        }
        let mut out = vec![0.0; t_out * d_out];
        gemm(t_out, width, d_out, &cols, false, self.value(kernel).data(), false, 0.0, &mut out);
        let out = Tensor::matrix(t_out, d_out, out)?;
        self.push(out, Op::Conv1d { x, kernel, stride, cols }, &[x, kernel])
    }

    /// Gathers rows of a matrix (rows may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_rows")?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("select_rows: row {bad} of {r}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.select_rows(x, &rows)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Shape(format!("slice_cols: [{start}, {}) of {c}", start + len)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let (r, _) = self.dims2(*first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape(format!("concat_cols: {pr} rows vs {r}")));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        if tensors.iter().any(|t| t.shape().len() != 2) {
            return Err(Error::Shape("concat_rows expects matrices".into()));
        }
        let out = Tensor::concat_rows(&tensors)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Picks entries by flat index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= xv.numel()) {
            return Err(Error::Shape(format!("gather: index {bad} of {}", xv.numel())));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(vec![idx.len()], data)?;
        self.push(out, Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Negative log-probability of a target over the chunk × label lattice.
    ///
    /// `blank` holds `chunks × (labels+1)` log-probabilities and `label` holds
    /// `chunks × labels`, both row-major by chunk.
    pub fn lattice_nll(&mut self, blank: Var, label: Var, chunks: usize, labels: usize) -> Result<Var> {
        let probs =
            LatticeProbs::new(chunks, labels, self.value(blank).data().to_vec(), self.value(label).data().to_vec())?;
        let loss = lattice::lattice_grad(&probs)?;
        let out = Tensor::scalar(-loss.log_prob);
        self.push(
            out,
            Op::LatticeNll { blank, label, grad_blank: loss.grad_blank, grad_label: loss.grad_label },
            &[blank, label],
        )
    }

    /// Reverse sweep from a scalar `loss`; accumulates into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = match &node.value {
                Value::Borrowed(t) => *t,
                Value::Owned(t) => t,
            };
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let n = value_of(nodes, v).numel();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[i].get_or_insert_with(|| Tensor::zeros(out.shape().to_vec()));
                    slot.data_mut().iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (value_of(nodes, *a), value_of(nodes, *b));
                    let (ta, tb) = (*ta, *tb);
                    let (m, k) = if ta { (av.shape()[1], av.shape()[0]) } else { (av.shape()[0], av.shape()[1]) };
                    let n = out.shape()[1];
                    acc(*a, &mut |da| {
                        if ta {
                            gemm(k, n, m, bv.data(), tb, &g, true, 1.0, da);
                        } else {
                            gemm(m, n, k, &g, false, bv.data(), !tb, 1.0, da);
                        }
                    });
                    acc(*b, &mut |db| {
                        if tb {
                            gemm(n, m, k, &g, true, av.data(), ta, 1.0, db);
                        } else {
                            gemm(k, m, n, av.data(), !ta, &g, false, 1.0, db);
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| add_into(d, &g));
                }
                Op::AddRow(x, bias) => {
                    acc(*x, &mut |d| add_into(d, &g));
                    let w = value_of(nodes, *bias).numel();
                    acc(*bias, &mut |d| {
                        for row in g.chunks(w.max(1)) {
                            add_into(d, row);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (value_of(nodes, *a), value_of(nodes, *b));
                    acc(*a, &mut |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(bv.data()) {
                            *d += g * y;
                        }
                    });
                    acc(*b, &mut |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(av.data()) {
                            *d += g * x;
                        }
                    });
                }
                Op::Scale(x, f) => {
                    acc(*x, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += g * f));
                }
                Op::Relu(x) => {
                    let xv = value_of(nodes, *x);
                    acc(*x, &mut |d| {
                        for ((d, g), v) in d.iter_mut().zip(&g).zip(xv.data()) {
                            if *v > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Glu(x) => {
                    let xv = value_of(nodes, *x);
                    let c = xv.cols();
                    let h = c / 2;
                    acc(*x, &mut |d| {
                        for r in 0..xv.rows() {
                            let row = xv.row(r);
                            for j in 0..h {
                                let s = sigmoid(row[h + j]);
                                let gy = g[r * h + j];
                                d[r * c + j] += gy * s;
                                d[r * c + h + j] += gy * row[j] * s * (1.0 - s);
                            }
                        }
                    });
                }
                Op::MaskedSoftmax(x) => {
                    let c = out.cols();
                    acc(*x, &mut |d| {
                        for r in 0..out.rows() {
                            let p = out.row(r);
                            let gr = &g[r * c..(r + 1) * c];
                            let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                            for j in 0..c {
                                d[r * c + j] += p[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let c = out.cols();
                    acc(*x, &mut |d| {
                        for r in 0..out.rows() {
                            let lp = out.row(r);
                            let gr = &g[r * c..(r + 1) * c];
                            let total: f64 = gr.iter().sum();
                            for j in 0..c {
                                d[r * c + j] += gr[j] - lp[j].exp() * total;
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = value_of(nodes, *gain);
                    let dcols = gv.numel();
                    acc(*gain, &mut |d| {
                        for (r, gr) in g.chunks(dcols).enumerate() {
                            for j in 0..dcols {
                                d[j] += gr[j] * xhat[r * dcols + j];
                            }
                        }
                    });
                    acc(*bias, &mut |d| {
                        for gr in g.chunks(dcols) {
                            add_into(d, gr);
                        }
                    });
                    acc(*x, &mut |d| {
                        let n = dcols as f64;
                        for (r, gr) in g.chunks(dcols).enumerate() {
                            let xh = &xhat[r * dcols..(r + 1) * dcols];
                            let mut mean_dh = 0.0;
                            let mut mean_dh_xh = 0.0;
                            for j in 0..dcols {
                                let dh = gr[j] * gv.data()[j];
                                mean_dh += dh;
                                mean_dh_xh += dh * xh[j];
                            }
                            mean_dh /= n;
                            mean_dh_xh /= n;
                            for j in 0..dcols {
                                let dh = gr[j] * gv.data()[j];
                                d[r * dcols + j] += rstd[r] * (dh - mean_dh - xh[j] * mean_dh_xh);
                            }
                        }
                    });
                }
                Op::Conv1d { x, kernel, stride, cols } => {
                    let kv = value_of(nodes, *kernel);
                    let (k, d_in, d_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                    let t = value_of(nodes, *x).shape()[0];
                    let t_out = out.shape()[0];
                    let width = k * d_in;
                    acc(*kernel, &mut |d| {
                        gemm(width, t_out, d_out, cols, true, &g, false, 1.0, d);
                    });
                    acc(*x, &mut |d| {
                        let mut dcols = vec![0.0; t_out * width];
                        gemm(t_out, d_out, width, &g, false, kv.data(), true, 0.0, &mut dcols);
                        let pad = (k - 1) / 2;
                        for o in 0..t_out {
                            for j in 0..k {
                                let src = (o * stride + j) as isize - pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    let src = src as usize;
                                    let from = &dcols[o * width + j * d_in..o * width + (j + 1) * d_in];
                                    add_into(&mut d[src * d_in..(src + 1) * d_in], from);
                                }
                            }
                        }
                    });
                }
                Op::SelectRows { x, rows } => {
                    let c = out.cols();
                    acc(*x, &mut |d| {
                        for (o, &src) in rows.iter().enumerate() {
                            add_into(&mut d[src * c..(src + 1) * c], &g[o * c..(o + 1) * c]);
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let len = out.cols();
                    let c = value_of(nodes, *x).cols();
                    acc(*x, &mut |d| {
                        for r in 0..out.rows() {
                            add_into(&mut d[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len]);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = value_of(nodes, p).cols();
                        acc(p, &mut |d| {
                            for r in 0..out.rows() {
                                add_into(&mut d[r * pc..(r + 1) * pc], &g[r * total + offset..r * total + offset + pc]);
                            }
                        });
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = value_of(nodes, p).numel();
                        acc(p, &mut |d| add_into(d, &g[offset..offset + n]));
                        offset += n;
                    }
                }
                Op::Gather { x, idx } => {
                    acc(*x, &mut |d| {
                        for (o, &i) in idx.iter().enumerate() {
                            d[i] += g[o];
                        }
                    });
                }
                Op::Sum(x) => {
                    acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0]));
                }
                Op::LatticeNll { blank, label, grad_blank, grad_label } => {
                    acc(*blank, &mut |d| {
                        for (d, gb) in d.iter_mut().zip(grad_blank) {
                            *d -= g[0] * gb;
                        }
                    });
                    acc(*label, &mut |d| {
                        for (d, gl) in d.iter_mut().zip(grad_label) {
                            *d -= g[0] * gl;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn value_of<'n>(nodes: &'n [Node<'_>], v: Var) -> &'n Tensor {
    match &nodes[v.0].value {
        Value::Borrowed(t) => t,
        Value::Owned(t) => t,
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Glu(_) => "glu",
        Op::MaskedSoftmax(_) => "masked_softmax",
        Op::LogSoftmax(_) => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1d { .. } => "conv1d_time",
        Op::SelectRows { .. } => "select_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::Gather { .. } => "gather",
        Op::Sum(_) => "sum",
        Op::LatticeNll { .. } => "lattice_nll",
    }
}
