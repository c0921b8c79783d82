//! Reverse-mode tape. Every operation appends a node; node indices are a
//! topological order, so backward is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::TensorError;
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    RowNorm(Var),
    GroupNorm(Var, usize),
    RepeatRows(Var, usize),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Confined to one execution context; build a fresh tape
/// per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Parameters whose name starts with one of `prefixes` are loaded as
    /// constants: they never receive gradient.
    pub fn with_frozen(prefixes: &[String]) -> Self {
        Tape {
            frozen: prefixes.to_vec(),
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> Result<(usize, usize), TensorError> {
        self.nodes[v.0].value.dims2()
    }

    /// Accumulated gradient of a node; `None` until a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone())
                .unwrap_or_else(|_| Tensor::scalar(0.0))
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Loads a named parameter. Repeated loads of the same name share a node,
    /// so gradients from every use accumulate in one slot.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .clone();
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Op::Leaf, !frozen);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every loaded, trainable parameter. Parameters that were
    /// loaded but not reached by backward get zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, &v)| {
                let t = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), t)
            })
            .collect()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    // ----- forward operations -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast, TensorError> {
        let (r, c) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        match (br, bc) {
            _ if (br, bc) == (r, c) => Ok(Broadcast::Same),
            (1, 1) => Ok(Broadcast::Scalar),
            (1, x) if x == c => Ok(Broadcast::Row),
            (x, 1) if x == r => Ok(Broadcast::Col),
            _ => Err(self.mismatch(op, a, b)),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var, TensorError> {
        let mode = self.broadcast(name, a, b)?;
        let (r, c) = self.dims(a)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(av[i * c + j], bv[bidx(mode, i, j, c)]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op(a, b, mode), rg))
    }

    /// `a + b`; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// Concatenate along columns.
    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::BadShape(vec![]))?;
        let r = self.dims(first)?.0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(self.mismatch("hcat", first, p));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::HCat(parts.to_vec()), rg))
    }

    /// Concatenate along rows.
    pub fn vcat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::BadShape(vec![]))?;
        let c = self.dims(first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pc != c {
                return Err(self.mismatch("vcat", first, p));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::VCat(parts.to_vec()), rg))
    }

    /// Euclidean norm of each row: `r x c -> r x 1`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        let av = self.value(a).data();
        let out: Vec<f64> = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, 1, out)?, Op::RowNorm(a), rg))
    }

    /// Norm over blocks of `group` consecutive rows, per column:
    /// `(group*n) x c -> n x c`. With `group = 3` this is the per-channel
    /// length of stacked 3-vectors.
    pub fn group_norm(&mut self, a: Var, group: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        if group == 0 || r % group != 0 {
            return Err(TensorError::BadShape(vec![r, c]));
        }
        let n = r / group;
        let av = self.value(a).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let s: f64 = (0..group).map(|g| av[(i * group + g) * c + j].powi(2)).sum();
                out[i * c + j] = s.sqrt();
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::GroupNorm(a, group), rg))
    }

    /// Repeat each row `k` times consecutively: `n x c -> (k*n) x c`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        let mut out = Vec::with_capacity(r * k * c);
        for i in 0..r {
            for _ in 0..k {
                out.extend_from_slice(self.value(a).row_slice(i));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r * k, c, out)?, Op::RepeatRows(a, k), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(v, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        let out = softmax_rows(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        let out = log_softmax_rows(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::LogSoftmax(a), rg))
    }

    /// Row-wise normalization to zero mean and unit variance, without affine
    /// parameters. The variance is floored by [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        let av = self.value(a).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * s;
            }
        }
        let rg = self.rg(a);
        let value = Tensor::matrix(r, c, xhat.clone())?;
        Ok(self.push(value, Op::LayerNorm { x: a, xhat, rstd }, rg))
    }

    /// Row gather: `out[i] = table[ids[i]]`. This is the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims(table)?;
        if ids.is_empty() {
            return Err(TensorError::BadShape(vec![0, c]));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::IndexOutOfRange { index: id, len: r });
            }
            out.extend_from_slice(self.value(table).row_slice(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), c, out)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.gather_rows(table, ids)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows with `None` targets are masked out; with no active
    /// rows the loss is exactly zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, TensorError> {
        let (r, c) = self.dims(logits)?;
        if targets.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![r, c],
                right: vec![targets.len()],
            });
        }
        let lv = self.value(logits).data();
        let logp = log_softmax_rows(lv, r, c);
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(TensorError::IndexOutOfRange { index: t, len: c });
                }
                total -= logp[i * c + t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let probs = logp.iter().map(|x| x.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("mse", a, b));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = av.len() as f64;
        let loss = av.iter().zip(bv).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        out.iter_mut().for_each(|x| *x /= r as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        if len == 0 || start + len > r {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: r,
            });
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(len, c, out)?, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a)?;
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: c,
            });
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols(a, start), rg))
    }

    // ----- backward -----

    /// Propagates d(loss)/d(node) to every node that requires gradient and
    /// adds it to the node's gradient slot. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let slot = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (s, x) in slot.iter_mut().zip(&g) {
                *s += x;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let (r, c) = out.dims2().unwrap_or((1, out.len()));
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap_or((0, 0));
                let n = c;
                if self.rg(*a) {
                    let buf = acc(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.value(*b).data(), true, buf, true);
                }
                if self.rg(*b) {
                    let buf = acc(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a).data(), true, g, false, buf, true);
                }
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.rg(*b) {
                    let blen = self.value(*b).len();
                    let buf = acc(grads, *b, blen);
                    for ii in 0..r {
                        for jj in 0..c {
                            buf[bidx(*mode, ii, jj, c)] += sign * g[ii * c + jj];
                        }
                    }
                }
            }
            Op::Mul(a, b, mode) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let buf = acc(grads, *a, g.len());
                    for ii in 0..r {
                        for jj in 0..c {
                            buf[ii * c + jj] += g[ii * c + jj] * bv[bidx(*mode, ii, jj, c)];
                        }
                    }
                }
                if self.rg(*b) {
                    let buf = acc(grads, *b, bv.len());
                    for ii in 0..r {
                        for jj in 0..c {
                            buf[bidx(*mode, ii, jj, c)] += g[ii * c + jj] * av[ii * c + jj];
                        }
                    }
                }
            }
            Op::Div(a, b, mode) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let buf = acc(grads, *a, g.len());
                    for ii in 0..r {
                        for jj in 0..c {
                            buf[ii * c + jj] += g[ii * c + jj] / bv[bidx(*mode, ii, jj, c)];
                        }
                    }
                }
                if self.rg(*b) {
                    let buf = acc(grads, *b, bv.len());
                    for ii in 0..r {
                        for jj in 0..c {
                            let y = bv[bidx(*mode, ii, jj, c)];
                            buf[bidx(*mode, ii, jj, c)] -= g[ii * c + jj] * av[ii * c + jj] / (y * y);
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                let buf = acc(grads, *a, g.len());
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += k * x;
                }
            }
            Op::AddScalar(a) => add_into(acc(grads, *a, g.len()), g),
            Op::HCat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.rg(*p) {
                        let buf = acc(grads, *p, r * pc);
                        for ii in 0..r {
                            for jj in 0..pc {
                                buf[ii * pc + jj] += g[ii * c + offset + jj];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::VCat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.rg(*p) {
                        add_into(acc(grads, *p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::RowNorm(a) => {
                let av = self.value(*a).data();
                let ac = self.value(*a).cols();
                let buf = acc(grads, *a, av.len());
                for ii in 0..r {
                    let norm = out.data()[ii];
                    if norm > 0.0 {
                        for jj in 0..ac {
                            buf[ii * ac + jj] += g[ii] * av[ii * ac + jj] / norm;
                        }
                    }
                }
            }
            Op::GroupNorm(a, group) => {
                let av = self.value(*a).data();
                let buf = acc(grads, *a, av.len());
                for ii in 0..r {
                    for jj in 0..c {
                        let norm = out.data()[ii * c + jj];
                        if norm > 0.0 {
                            for gg in 0..*group {
                                let idx = (ii * group + gg) * c + jj;
                                buf[idx] += g[ii * c + jj] * av[idx] / norm;
                            }
                        }
                    }
                }
            }
            Op::RepeatRows(a, k) => {
                let ar = self.value(*a).rows();
                let buf = acc(grads, *a, ar * c);
                for ii in 0..ar {
                    for kk in 0..*k {
                        for jj in 0..c {
                            buf[ii * c + jj] += g[(ii * k + kk) * c + jj];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let buf = acc(grads, *a, g.len());
                for ((b, y), x) in buf.iter_mut().zip(out.data()).zip(g) {
                    *b += x * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let buf = acc(grads, *a, g.len());
                for ((b, xin), x) in buf.iter_mut().zip(av).zip(g) {
                    if *xin > 0.0 {
                        *b += x;
                    }
                }
            }
            Op::Tanh(a) => {
                let buf = acc(grads, *a, g.len());
                for ((b, y), x) in buf.iter_mut().zip(out.data()).zip(g) {
                    *b += x * (1.0 - y * y);
                }
            }
            Op::Softmax(a) => {
                let y = out.data();
                let buf = acc(grads, *a, g.len());
                for ii in 0..r {
                    let row = ii * c..(ii + 1) * c;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(p, q)| p * q).sum();
                    for jj in row {
                        buf[jj] += y[jj] * (g[jj] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                let buf = acc(grads, *a, g.len());
                for ii in 0..r {
                    let row = ii * c..(ii + 1) * c;
                    let total: f64 = g[row.clone()].iter().sum();
                    for jj in row {
                        buf[jj] += g[jj] - y[jj].exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let buf = acc(grads, *x, g.len());
                for ii in 0..r {
                    let row = ii * c..(ii + 1) * c;
                    let mean_g: f64 = g[row.clone()].iter().sum::<f64>() / c as f64;
                    let mean_gx: f64 = g[row.clone()]
                        .iter()
                        .zip(&xhat[row.clone()])
                        .map(|(p, q)| p * q)
                        .sum::<f64>()
                        / c as f64;
                    for jj in row {
                        buf[jj] += rstd[ii] * (g[jj] - mean_g - xhat[jj] * mean_gx);
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let tl = self.value(*table).len();
                let buf = acc(grads, *table, tl);
                for (ii, &id) in ids.iter().enumerate() {
                    for jj in 0..c {
                        buf[id * c + jj] += g[ii * c + jj];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count > 0 {
                    let lc = self.value(*logits).cols();
                    let scale = g[0] / *count as f64;
                    let buf = acc(grads, *logits, probs.len());
                    for (ii, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for jj in 0..lc {
                                let onehot = if jj == t { 1.0 } else { 0.0 };
                                buf[ii * lc + jj] += scale * (probs[ii * lc + jj] - onehot);
                            }
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = 2.0 * g[0] / av.len() as f64;
                if self.rg(*a) {
                    let buf = acc(grads, *a, av.len());
                    for ((o, x), y) in buf.iter_mut().zip(av).zip(bv) {
                        *o += k * (x - y);
                    }
                }
                if self.rg(*b) {
                    let buf = acc(grads, *b, bv.len());
                    for ((o, x), y) in buf.iter_mut().zip(av).zip(bv) {
                        *o -= k * (x - y);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, n).iter_mut().for_each(|b| *b += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let k = g[0] / n as f64;
                acc(grads, *a, n).iter_mut().for_each(|b| *b += k);
            }
            Op::MeanRows(a) => {
                let ar = self.value(*a).rows();
                let buf = acc(grads, *a, ar * c);
                for ii in 0..ar {
                    for jj in 0..c {
                        buf[ii * c + jj] += g[jj] / ar as f64;
                    }
                }
            }
            Op::Transpose(a) => {
                let buf = acc(grads, *a, g.len());
                // out is r x c, input is c x r
                for ii in 0..r {
                    for jj in 0..c {
                        buf[jj * r + ii] += g[ii * c + jj];
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let n = self.value(*a).len();
                let buf = acc(grads, *a, n);
                add_into(&mut buf[start * c..start * c + g.len()], g);
            }
            Op::SliceCols(a, start) => {
                let ac = self.value(*a).cols();
                let n = self.value(*a).len();
                let buf = acc(grads, *a, n);
                for ii in 0..r {
                    for jj in 0..c {
                        buf[ii * ac + start + jj] += g[ii * c + jj];
                    }
                }
            }
        }
    }
}

fn bidx(mode: Broadcast, i: usize, j: usize, cols: usize) -> usize {
    match mode {
        Broadcast::Same => i * cols + j,
        Broadcast::Row => j,
        Broadcast::Col => i,
        Broadcast::Scalar => 0,
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[i * c + j] /= z;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    out
}
