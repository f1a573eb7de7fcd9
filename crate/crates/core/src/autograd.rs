//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the indices of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for nodes that require them. Parameters
//! are borrowed from a [`ParamStore`]; a [`TrainMask`] decides which of them
//! are differentiable leaves. Frozen parameters are constants on the tape
//! and never receive a gradient.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::{ParamStore, TrainMask};
use crate::tensor::{softmax_rows, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    RmsNorm(Var, Vec<f64>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
    },
    MeanAll(Var),
    WeightedSum(Var, Matrix),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    store: Option<&'a ParamStore>,
    mask: TrainMask,
    bound: HashMap<String, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Graph<'a> {
    /// A tape without parameters; only constants and explicit leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            mask: TrainMask::Nothing,
            bound: HashMap::new(),
        }
    }

    /// A tape that binds parameters from `store`; names in `mask` become
    /// differentiable leaves.
    pub fn with_params(store: &'a ParamStore, mask: TrainMask) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            mask,
            bound: HashMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf owning its value.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// A leaf borrowing its value.
    pub fn input(&mut self, value: &'a Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.is_some_and(|s| s.contains(name))
    }

    /// Bind the parameter `name`, reusing the node if already bound.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::invalid("graph has no parameter store"))?;
        let value = store.require(name)?;
        let trainable = self.mask.contains(name);
        let v = self.input(value, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter bound so far.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn check(&self, ok: bool, what: &str, a: Var, b: Var) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: incompatible shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a).1 == self.shape(b).0, "matmul", a, b)?;
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a) == self.shape(b), "add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a) == self.shape(b), "sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a) == self.shape(b), "mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Add a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.shape(a);
        self.check(self.shape(row) == (1, c), "add_row", a, row)?;
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(&r) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiply every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.shape(a);
        self.check(self.shape(row) == (1, c), "mul_row", a, row)?;
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= y;
            }
        }
        Ok(self.push(v, Op::MulRow(a, row), &[a, row]))
    }

    /// Multiply `a` by a `1 × 1` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(self.shape(s) == (1, 1), "mul_scalar", a, s)?;
        let k = self.value(s).get(0, 0);
        let v = self.value(a).scale(k);
        Ok(self.push(v, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax, optionally with a causal mask (entry `(i, j)` is
    /// zero for `j > i`).
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let v = softmax_rows(self.value(a), causal);
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Row-wise RMS normalization without gain.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len().max(1) as f64;
            let k = 1.0 / (ms + eps).sqrt();
            inv.push(k);
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        self.push(out, Op::RmsNorm(a, inv), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::invalid(format!("slice rows {start}+{len} of {r}")));
        }
        let v = Matrix::from_vec(len, c, self.value(a).data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(v, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::invalid(format!("slice cols {start}+{len} of {c}")));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let v = Matrix::from_vec(r, len, data)?;
        Ok(self.push(v, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != c {
                return Err(Error::invalid("concat_rows column mismatch"));
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let v = Matrix::from_vec(rows, c, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::invalid("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Matrix::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            for i in 0..r {
                v.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean over rows, giving `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let n = self.shape(table).0;
        if let Some(bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("index {bad} out of range for {n} rows")));
        }
        let v = self.value(table).select_rows(ids);
        Ok(self.push(v, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Unfold `x` (`L × C`) into convolution windows: row `t` is the
    /// concatenation of rows `t·stride + j − pad` for `j < kernel`, zero
    /// outside the input.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (l, c) = self.shape(x);
        if kernel == 0 || stride == 0 || l + 2 * pad < kernel {
            return Err(Error::invalid(format!(
                "conv window kernel={kernel} stride={stride} pad={pad} on length {l}"
            )));
        }
        let l_out = (l + 2 * pad - kernel) / stride + 1;
        let src = self.value(x);
        let mut v = Matrix::zeros(l_out, kernel * c);
        for t in 0..l_out {
            for j in 0..kernel {
                let pos = (t * stride + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l {
                    v.row_mut(t)[j * c..(j + 1) * c].copy_from_slice(src.row(pos as usize));
                }
            }
        }
        Ok(self.push(
            v,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            },
            &[x],
        ))
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::invalid(format!("{} targets for {r} rows", targets.len())));
        }
        if targets.iter().flatten().any(|&t| t >= c) {
            return Err(Error::invalid("target id out of vocabulary"));
        }
        let probs = softmax_rows(self.value(logits), false);
        let n = targets.iter().flatten().count();
        let mut loss = 0.0;
        let x = self.value(logits);
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = x.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        let value = if n == 0 { 0.0 } else { loss / n as f64 };
        Ok(self.push(
            Matrix::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = m.sum() / m.len().max(1) as f64;
        self.push(Matrix::scalar(v), Op::MeanAll(a), &[a])
    }

    /// `Σ a ⊙ weights` as a `1 × 1` value.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix) -> Result<Var> {
        if self.shape(a) != weights.shape() {
            return Err(Error::invalid("weighted_sum shape mismatch"));
        }
        let v: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(x, w)| x * w)
            .sum();
        Ok(self.push(Matrix::scalar(v), Op::WeightedSum(a, weights), &[a]))
    }

    /// Affine map `x · w + b` for parameters `{prefix}.w` / `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.shape(loss);
        grads[loss.0] = Some(Matrix::filled(r, c, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, d) in s.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += d;
                        }
                    }
                    self.acc(grads, *row, s);
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, y) in ga.row_mut(i).iter_mut().zip(rv.data()) {
                            *x *= y;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.requires_grad(*row) {
                    let av = self.value(*a);
                    let mut gr = Matrix::zeros(1, rv.cols());
                    for i in 0..g.rows() {
                        for ((o, x), y) in gr.row_mut(0).iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *o += x * y;
                        }
                    }
                    self.acc(grads, *row, gr);
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).get(0, 0);
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g.scale(k));
                }
                if self.requires_grad(*s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.acc(grads, *s, Matrix::scalar(d));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g.scale(*k)),
            Op::Tanh(a) => self.acc(grads, *a, g.zip_map(out, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(out, |d, y| d * y * (1.0 - y))),
            Op::Gelu(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x)))
            }
            Op::Softmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let d = g.row(i);
                    let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                    for ((o, yv), dv) in ga.row_mut(i).iter_mut().zip(y).zip(d) {
                        *o = yv * (dv - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::RmsNorm(a, inv) => {
                let n = out.cols().max(1) as f64;
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for (i, k) in inv.iter().enumerate() {
                    let y = out.row(i);
                    let d = g.row(i);
                    let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, yv), dv) in ga.row_mut(i).iter_mut().zip(y).zip(d) {
                        *o = (dv - yv * dot) * k;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.requires_grad(p) {
                        let slice = g.data()[off * c..(off + r) * c].to_vec();
                        self.acc(grads, p, Matrix::from_vec(r, c, slice).expect("shape"));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.requires_grad(p) {
                        let mut gp = Matrix::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.acc(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                let k = 1.0 / r.max(1) as f64;
                for i in 0..r {
                    for (o, d) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *o = d * k;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Gather(table, ids) => {
                let (r, c) = self.shape(*table);
                let mut gt = Matrix::zeros(r, c);
                for (row, &id) in ids.iter().enumerate() {
                    for (o, d) in gt.row_mut(id).iter_mut().zip(g.row(row)) {
                        *o += d;
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (l, c) = self.shape(*x);
                let mut gx = Matrix::zeros(l, c);
                for t in 0..g.rows() {
                    for j in 0..*kernel {
                        let pos = (t * stride + j) as isize - *pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            let src = &g.row(t)[j * c..(j + 1) * c];
                            for (o, d) in gx.row_mut(pos as usize).iter_mut().zip(src) {
                                *o += d;
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.iter().flatten().count();
                let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                if n > 0 {
                    let k = g.get(0, 0) / n as f64;
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (o, p) in gl.row_mut(i).iter_mut().zip(probs.row(i)) {
                                *o = p * k;
                            }
                            let cur = gl.get(i, t);
                            gl.set(i, t, cur - k);
                        }
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape(*a);
                let k = g.get(0, 0) / (r * c).max(1) as f64;
                self.acc(grads, *a, Matrix::filled(r, c, k));
            }
            Op::WeightedSum(a, w) => {
                let k = g.get(0, 0);
                self.acc(grads, *a, w.scale(k));
            }
        }
    }

    /// Gradients of all bound parameters, keyed by name. Frozen parameters
    /// and parameters off the loss path get an all-zero gradient.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.shape(v);
                    Matrix::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }
}

/// Output of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::xavier;
    use crate::rng::stream;

    /// Central-difference check of `f` at the leaf values in `inputs`.
    fn check_grad(
        inputs: &[Matrix],
        f: impl Fn(&mut Graph, &[Var]) -> Var,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut moved: Vec<Matrix> = inputs.to_vec();
                    moved[k].data_mut()[idx] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = moved.into_iter().map(|m| g2.leaf(m, true)).collect();
                    let o = f(&mut g2, &vs);
                    g2.value(o).get(0, 0)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} idx {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rand(r: usize, c: usize, label: &str) -> Matrix {
        xavier(r, c, &mut stream(3, label))
    }

    #[test]
    fn grad_matmul_softmax_causal() {
        check_grad(&[rand(3, 4, "a"), rand(4, 3, "b"), rand(3, 3, "w")], |g, v| {
            let m = g.matmul(v[0], v[1]).unwrap();
            let s = g.softmax(m, true);
            let p = g.mul(s, v[2]).unwrap();
            g.mean_all(p)
        });
    }

    #[test]
    fn grad_rmsnorm_gelu_rows() {
        check_grad(&[rand(3, 5, "x"), rand(1, 5, "g"), rand(1, 5, "b")], |g, v| {
            let n = g.rms_norm(v[0], 1e-6);
            let n = g.mul_row(n, v[1]).unwrap();
            let n = g.add_row(n, v[2]).unwrap();
            let a = g.gelu(n);
            let t = g.tanh(a);
            let s = g.sigmoid(t);
            let w = Matrix::from_vec(3, 5, (0..15).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
            g.weighted_sum(s, w).unwrap()
        });
    }

    #[test]
    fn grad_structural_ops() {
        check_grad(&[rand(5, 2, "x"), rand(6, 3, "w"), rand(1, 1, "s")], |g, v| {
            let cols = g.im2col(v[0], 3, 2, 1).unwrap();
            let y = g.matmul(cols, v[1]).unwrap();
            let a = g.slice_rows(y, 1, 2).unwrap();
            let b = g.slice_cols(y, 0, 2).unwrap();
            let bt = g.transpose(b);
            let c = g.concat_cols(&[bt, bt]).unwrap();
            let d = g.concat_rows(&[a, a]).unwrap();
            let e = g.mul_scalar(d, v[2]).unwrap();
            let m = g.mean_rows(e);
            let mc = g.mean_rows(c);
            let x = g.mean_all(m);
            let y2 = g.mean_all(mc);
            let s = g.sub(x, y2).unwrap();
            g.scale(s, 3.0)
        });
    }

    #[test]
    fn grad_cross_entropy_gather() {
        check_grad(&[rand(6, 4, "emb"), rand(4, 6, "head")], |g, v| {
            let x = g.gather(v[0], &[0, 3, 3, 5]).unwrap();
            let l = g.matmul(x, v[1]).unwrap();
            g.cross_entropy(l, &[Some(1), None, Some(5), Some(0)]).unwrap()
        });
    }

    #[test]
    fn im2col_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros(25, 3));
        let c = g.im2col(x, 3, 2, 1).unwrap();
        assert_eq!(g.value(c).shape(), (13, 9));
        let x1 = g.constant(Matrix::zeros(1, 3));
        let c1 = g.im2col(x1, 3, 2, 1).unwrap();
        assert_eq!(g.value(c1).shape(), (1, 9));
    }

    #[test]
    fn frozen_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("a.w", rand(2, 2, "aw"));
        store.insert("b.w", rand(2, 2, "bw"));
        let mut g = Graph::with_params(&store, TrainMask::prefixes(["a."]));
        let x = g.constant(Matrix::identity(2));
        let a = g.param("a.w").unwrap();
        let b = g.param("b.w").unwrap();
        let y = g.matmul(x, a).unwrap();
        let y = g.matmul(y, b).unwrap();
        let l = g.mean_all(y);
        let grads = g.backward(l);
        let pg = g.param_grads(&grads);
        assert!(pg["a.w"].data().iter().any(|v| *v != 0.0));
        assert!(pg["b.w"].data().iter().all(|v| *v == 0.0));
    }
}
