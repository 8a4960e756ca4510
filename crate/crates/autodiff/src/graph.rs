//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{AutodiffError, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Handle to a node recorded on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Square(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    TokenLinear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    StopGradient,
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "dilated_conv1d",
            Op::TokenLinear { .. } => "token_linear",
            Op::Gather { .. } => "gather",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough(..) => "straight_through",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::StraightThrough(a) => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SliceRows { src, .. } | Op::SliceCols { src, .. } => vec![*src],
            Op::LayerNorm { x, gain, bias, .. } => std::iter::once(*x).chain(*gain).chain(*bias).collect(),
            Op::Conv1d { x, w, b, .. } | Op::TokenLinear { x, w, b } => {
                std::iter::once(*x).chain(std::iter::once(*w)).chain(*b).collect()
            }
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
///
/// Stop-gradient and straight-through nodes remember the constant they
/// inject; a graph built with [`Graph::replaying`] reuses those constants
/// instead of recomputing them, which is what a finite-difference check of a
/// stop-gradient loss has to hold fixed.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    replay: Option<VecDeque<Tensor>>,
    constants: Vec<Tensor>,
    retained: Vec<usize>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose stop-gradient and straight-through nodes emit the given
    /// constants, in recording order.
    pub fn replaying(constants: Vec<Tensor>) -> Self {
        Self {
            replay: Some(constants.into()),
            ..Self::default()
        }
    }

    /// Constants injected by stop-gradient / straight-through nodes so far.
    pub fn constants(&self) -> &[Tensor] {
        &self.constants
    }

    pub fn into_constants(self) -> Vec<Tensor> {
        self.constants
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep the gradient of an intermediate node after backward; by default
    /// only leaf gradients survive.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained.push(v.0);
    }

    /// Gradient accumulated into `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::StopGradient => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(AutodiffError::Degenerate {
                op,
                reason: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(AutodiffError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        self.push(Op::MatMul(a, b), value)
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(AutodiffError::shape(op.name(), va.shape(), vb.shape()));
        }
        let value = va.zip_map(vb, f)?;
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn check_row(&self, a: Var, r: Var, op: &'static str) -> Result<usize> {
        let cols = self.value(a).cols();
        let rs = self.shape(r);
        let ok = match rs {
            [n] => *n == cols,
            [1, n] => *n == cols,
            _ => false,
        };
        if !ok {
            return Err(AutodiffError::shape(op, self.shape(a), rs));
        }
        Ok(cols)
    }

    /// `a + r` with `r` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let cols = self.check_row(a, r, "add_row")?;
        let row = self.value(r).data();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(row) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, r), value)
    }

    /// `a * r` with `r` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let cols = self.check_row(a, r, "mul_row")?;
        let row = self.value(r).data();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(row) {
                *x *= b;
            }
        }
        self.push(Op::MulRow(a, r), value)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), value)
    }

    /// Concatenate along `axis` 0 (any rank, leading dimension) or 1 (matrices).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        match axis {
            0 => {
                let mut lead = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != base.len() || s[1..] != base[1..] {
                        return Err(AutodiffError::shape("concat", &base, s));
                    }
                    lead += s[0];
                    data.extend_from_slice(self.value(p).data());
                }
                let mut shape = base.clone();
                shape[0] = lead;
                let value = Tensor::new(&shape, data)?;
                self.push(
                    Op::Concat {
                        parts: parts.to_vec(),
                        axis,
                    },
                    value,
                )
            }
            1 => {
                let (rows, _) = self.matrix_dims(first, "concat")?;
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (r, c) = self.matrix_dims(p, "concat")?;
                    if r != rows {
                        return Err(AutodiffError::shape("concat", &base, self.shape(p)));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                let value = Tensor::new(&[rows, total], data)?;
                self.push(
                    Op::Concat {
                        parts: parts.to_vec(),
                        axis,
                    },
                    value,
                )
            }
            _ => Err(AutodiffError::Config(format!("concat axis {axis} unsupported"))),
        }
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if start >= end || end > s[0] {
            return Err(AutodiffError::Degenerate {
                op: "slice_rows",
                reason: format!("range {start}..{end} outside leading extent {}", s[0]),
            });
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * inner..end * inner].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let value = Tensor::new(&shape, data)?;
        self.push(Op::SliceRows { src: a, start }, value)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "slice_cols")?;
        if start >= end || end > cols {
            return Err(AutodiffError::Degenerate {
                op: "slice_cols",
                reason: format!("range {start}..{end} outside {cols} columns"),
            });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let value = Tensor::new(&[rows, end - start], data)?;
        self.push(Op::SliceCols { src: a, start }, value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let value = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        self.push(Op::Transpose(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), value)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), value)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(Op::Gelu(a), value)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(Op::Softmax(a), value)
    }

    /// Layer normalization over the last dimension with optional affine terms.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if cols < 2 {
            return Err(AutodiffError::Degenerate {
                op: "layer_norm",
                reason: format!("last dimension {cols} < 2"),
            });
        }
        for p in [gain, bias].into_iter().flatten() {
            self.check_row(x, p, "layer_norm")?;
        }
        let src = self.value(x);
        let rows = src.rows();
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            xhat.extend(row.iter().map(|v| (v - mu) * rs));
        }
        let g = gain.map(|g| self.value(g).data().to_vec());
        let b = bias.map(|b| self.value(b).data().to_vec());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % cols;
                let y = g.as_ref().map_or(h, |g| h * g[j]);
                b.as_ref().map_or(y, |b| y + b[j])
            })
            .collect();
        let value = Tensor::new(src.shape(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            value,
        )
    }

    /// Causal dilated 1-D convolution over a `[time, in]` sequence with
    /// weights `[kernel, in, out]`. Output keeps the input time length.
    pub fn dilated_conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (t, cin) = self.matrix_dims(x, "dilated_conv1d")?;
        let ws = self.shape(w).to_vec();
        let [k, wcin, cout] = ws[..] else {
            return Err(AutodiffError::shape("dilated_conv1d", self.shape(x), &ws));
        };
        if wcin != cin {
            return Err(AutodiffError::shape("dilated_conv1d", self.shape(x), &ws));
        }
        if dilation == 0 {
            return Err(AutodiffError::Config("dilation must be positive".into()));
        }
        let span = (k - 1) * dilation + 1;
        if span > t {
            return Err(AutodiffError::Config(format!(
                "kernel span {span} (size {k}, dilation {dilation}) exceeds sequence length {t}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(AutodiffError::shape("dilated_conv1d", &[cout], self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b).data();
                (0..t * cout).map(|i| bv[i % cout]).collect()
            }
            None => vec![0.0; t * cout],
        };
        for tap in 0..k {
            let shift = (k - 1 - tap) * dilation;
            let rows = t - shift;
            let wk = &wv[tap * cin * cout..(tap + 1) * cin * cout];
            let partial = matmul_raw(&xv[..rows * cin], wk, rows, cin, cout);
            for (o, p) in out[shift * cout..].iter_mut().zip(partial) {
                *o += p;
            }
        }
        let value = Tensor::new(&[t, cout], out)?;
        self.push(Op::Conv1d { x, w, b, dilation }, value)
    }

    /// Row `n` of `x: [n, in]` through its own weight `w[n]: [in, out]`.
    pub fn token_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, win) = self.matrix_dims(x, "token_linear")?;
        let ws = self.shape(w).to_vec();
        let [wn, wwin, wout] = ws[..] else {
            return Err(AutodiffError::shape("token_linear", self.shape(x), &ws));
        };
        if wn != n || wwin != win {
            return Err(AutodiffError::shape("token_linear", self.shape(x), &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [n, wout] {
                return Err(AutodiffError::shape("token_linear", &[n, wout], self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = Vec::with_capacity(n * wout);
        for i in 0..n {
            out.extend(matmul_raw(
                &xv[i * win..(i + 1) * win],
                &wv[i * win * wout..(i + 1) * win * wout],
                1,
                win,
                wout,
            ));
        }
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(&[n, wout], out)?;
        self.push(Op::TokenLinear { x, w, b }, value)
    }

    /// Rows of `table` picked by `idx`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (p, d) = self.matrix_dims(table, "gather")?;
        if idx.is_empty() {
            return Err(AutodiffError::Contract("gather with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= p) {
            return Err(AutodiffError::Degenerate {
                op: "gather",
                reason: format!("index {bad} out of range for {p} rows"),
            });
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(&[idx.len(), d], data)?;
        self.push(
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            value,
        )
    }

    fn next_replayed(&mut self, shape: &[usize], op: &'static str) -> Result<Option<Tensor>> {
        let Some(queue) = self.replay.as_mut() else {
            return Ok(None);
        };
        let c = queue
            .pop_front()
            .ok_or_else(|| AutodiffError::Contract(format!("{op}: replay constants exhausted")))?;
        if c.shape() != shape {
            return Err(AutodiffError::shape(op, shape, c.shape()));
        }
        Ok(Some(c))
    }

    /// Forward identity, backward zero.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let value = match self.next_replayed(&shape, "stop_gradient")? {
            Some(c) => c,
            None => self.value(x).clone(),
        };
        self.constants.push(value.clone());
        self.push(Op::StopGradient, value)
    }

    /// Forward value of `zq`, gradient copied unchanged into `z`.
    ///
    /// Equivalent to `z + stop_gradient(zq - z)`; under replay the recorded
    /// offset is added back to `z`.
    pub fn straight_through(&mut self, z: Var, zq: Var) -> Result<Var> {
        if self.shape(z) != self.shape(zq) {
            return Err(AutodiffError::shape("straight_through", self.shape(z), self.shape(zq)));
        }
        let shape = self.shape(z).to_vec();
        let (value, offset) = match self.next_replayed(&shape, "straight_through")? {
            Some(c) => (self.value(z).zip_map(&c, |a, b| a + b)?, c),
            None => {
                let (vz, vq) = (self.value(z), self.value(zq));
                (vq.clone(), vq.zip_map(vz, |q, z| q - z)?)
            }
        };
        self.constants.push(offset);
        self.push(Op::StraightThrough(z), value)
    }

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::Contract("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let keep = matches!(node.op, Op::Leaf) || self.retained.contains(&i);
            if !keep || !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let ga = matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga)?);
                }
                if self.wants(*b) {
                    let gb = matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*r) {
                    let cols = g.cols();
                    let mut gr = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (acc, v) in gr.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *r, Tensor::new(self.shape(*r), gr)?);
                }
            }
            Op::MulRow(a, r) => {
                let cols = g.cols();
                let rv = self.value(*r).data();
                if self.wants(*a) {
                    let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * rv[i % cols]);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*r) {
                    let av = self.value(*a).data();
                    let mut gr = vec![0.0; cols];
                    for (i, gv) in g.data().iter().enumerate() {
                        gr[i % cols] += gv * av[i];
                    }
                    self.accumulate(grads, *r, Tensor::new(self.shape(*r), gr)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.shape(*a))?);
            }
            Op::Concat { parts, axis } => match axis {
                0 => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.wants(p) {
                            let part = g.data()[offset..offset + len].to_vec();
                            self.accumulate(grads, p, Tensor::new(self.shape(p), part)?);
                        }
                        offset += len;
                    }
                }
                _ => {
                    let total = g.cols();
                    let rows = g.rows();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        if self.wants(p) {
                            let part = Tensor::from_fn(&[rows, w], |i| g.data()[(i / w) * total + col + i % w]);
                            self.accumulate(grads, p, part);
                        }
                        col += w;
                    }
                }
            },
            Op::SliceRows { src, start } => {
                let mut full = Tensor::zeros(self.shape(*src));
                let inner: usize = self.shape(*src)[1..].iter().product();
                full.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *src, full);
            }
            Op::SliceCols { src, start } => {
                let cols = self.shape(*src)[1];
                let w = g.cols();
                let mut full = Tensor::zeros(self.shape(*src));
                let fd = full.data_mut();
                for (r, row) in g.data().chunks(w).enumerate() {
                    fd[r * cols + start..r * cols + start + w].copy_from_slice(row);
                }
                self.accumulate(grads, *src, full);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let gd = g.data();
                let ga = Tensor::from_fn(&[r, c], |i| gd[(i % c) * r + i / c]);
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.data()[0] / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv)?;
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    ga.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(y.shape(), ga)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = g.cols();
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut gb = vec![0.0; cols];
                        for (j, gv) in g.data().iter().enumerate() {
                            gb[j % cols] += gv;
                        }
                        self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb)?);
                    }
                }
                if let Some(gn) = gain {
                    if self.wants(*gn) {
                        let mut gg = vec![0.0; cols];
                        for (j, gv) in g.data().iter().enumerate() {
                            gg[j % cols] += gv * xhat[j];
                        }
                        self.accumulate(grads, *gn, Tensor::new(self.shape(*gn), gg)?);
                    }
                }
                if self.wants(*x) {
                    let gainv = gain.map(|gn| self.value(gn).data().to_vec());
                    let mut gx = Vec::with_capacity(g.len());
                    for (r, gr) in g.data().chunks(cols).enumerate() {
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let gh: Vec<f64> = gr
                            .iter()
                            .enumerate()
                            .map(|(j, gv)| gainv.as_ref().map_or(*gv, |gn| gv * gn[j]))
                            .collect();
                        let mean_gh = gh.iter().sum::<f64>() / cols as f64;
                        let mean_ghh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        gx.extend(gh.iter().zip(hr).map(|(a, h)| rstd[r] * (a - mean_gh - h * mean_ghh)));
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (t, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (k, cout) = (self.shape(*w)[0], self.shape(*w)[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gd = g.data();
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![0.0; cout];
                        for (j, gv) in gd.iter().enumerate() {
                            gb[j % cout] += gv;
                        }
                        self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb)?);
                    }
                }
                let mut gx = self.wants(*x).then(|| vec![0.0; t * cin]);
                let mut gw = self.wants(*w).then(|| vec![0.0; k * cin * cout]);
                for tap in 0..k {
                    let shift = (k - 1 - tap) * dilation;
                    let rows = t - shift;
                    let gs = &gd[shift * cout..];
                    if let Some(gw) = gw.as_mut() {
                        let part = matmul_tn(&xv[..rows * cin], gs, rows, cin, cout);
                        for (a, p) in gw[tap * cin * cout..].iter_mut().zip(part) {
                            *a += p;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wk = &wv[tap * cin * cout..(tap + 1) * cin * cout];
                        let part = matmul_nt(gs, wk, rows, cout, cin);
                        for (a, p) in gx.iter_mut().zip(part) {
                            *a += p;
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, Tensor::new(&[t, cin], gx)?);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, Tensor::new(&[k, cin, cout], gw)?);
                }
            }
            Op::TokenLinear { x, w, b } => {
                let (n, win) = (self.shape(*x)[0], self.shape(*x)[1]);
                let wout = g.cols();
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.clone());
                }
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gd = g.data();
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(n * win);
                    for r in 0..n {
                        gx.extend(matmul_nt(
                            &gd[r * wout..(r + 1) * wout],
                            &wv[r * win * wout..(r + 1) * win * wout],
                            1,
                            wout,
                            win,
                        ));
                    }
                    self.accumulate(grads, *x, Tensor::new(&[n, win], gx)?);
                }
                if self.wants(*w) {
                    let mut gw = Vec::with_capacity(n * win * wout);
                    for r in 0..n {
                        gw.extend(matmul_raw(
                            &xv[r * win..(r + 1) * win],
                            &gd[r * wout..(r + 1) * wout],
                            win,
                            1,
                            wout,
                        ));
                    }
                    self.accumulate(grads, *w, Tensor::new(&[n, win, wout], gw)?);
                }
            }
            Op::Gather { table, idx } => {
                if self.wants(*table) {
                    let d = g.cols();
                    let mut gt = Tensor::zeros(self.shape(*table));
                    let gtd = gt.data_mut();
                    for (row, &i) in g.data().chunks(d).zip(idx) {
                        for (a, v) in gtd[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::StraightThrough(z) => {
                self.accumulate(grads, *z, g.clone());
            }
        }
        Ok(())
    }

    /// Human-readable listing of the recorded ops.
    pub fn trace(&self) -> String {
        let mut out = String::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let parents: Vec<String> = node.op.parents().iter().map(|p| format!("%{}", p.0)).collect();
            let _ = writeln!(
                out,
                "%{i} = {}({}) {:?}{}",
                node.op.name(),
                parents.join(", "),
                node.value.shape(),
                if node.requires_grad { " grad" } else { "" }
            );
        }
        out
    }
}
