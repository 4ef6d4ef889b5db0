//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op applied during a forward pass. Each node
//! keeps the value it produced plus whatever the backward rule needs
//! (softmax probabilities, normalization statistics). [`Graph::backward`]
//! walks the tape in reverse and returns a [`Gradients`] table.
//!
//! Nodes are addressed by [`Var`] handles. Parameters are bound lazily from
//! a [`ParamStore`]: the first use of a parameter inside a graph creates one
//! leaf node that all later uses share, so gradients accumulate per
//! parameter without a separate reduction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Mask, NumericsError, ParamId, ParamStore, Tensor};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, degenerate: Vec<bool> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T>, degenerate: Vec<bool> },
    Embedding { table: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    Rows { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Dropout { x: Var, keep: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::OneMinus(..) => "one_minus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "masked_softmax",
            Op::Attention { .. } => "attention",
            Op::Embedding { .. } => "embedding",
            Op::ConcatRows(..) => "concat_rows",
            Op::Rows { .. } => "rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dropout { .. } => "dropout",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-node gradients from one backward pass.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }
}

/// Recording tape for one forward/backward pass.
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    dropout: Option<(T, ChaCha8Rng)>,
    degenerate_rows: usize,
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph without parameter bindings (pure tensor math).
    pub fn new() -> Self {
        Self { params: None, param_vars: Vec::new(), nodes: Vec::new(), dropout: None, degenerate_rows: 0 }
    }

    /// Graph that can bind leaves from `params`.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            dropout: None,
            degenerate_rows: 0,
        }
    }

    /// Enables dropout with the given rate, drawing masks from `rng`.
    pub fn enable_dropout(&mut self, rate: f64, rng: ChaCha8Rng) {
        if rate > 0.0 {
            self.dropout = Some((T::lit(rate), rng));
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of attention/softmax rows that had every position masked.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Cached attention probabilities `[heads, q, k]` for an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        let needs_grad = match op {
            Op::Param => true,
            Op::Input => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var, NumericsError> {
        self.push(value, Op::Input, &[])
    }

    /// Differentiable leaf not tied to a parameter store (used by checks).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var, NumericsError> {
        self.push(value, Op::Param, &[])
    }

    /// Shared leaf for a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let value = store.get(id).clone();
        self.nodes.push(Node { value, op: Op::Param, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Gradient for each stored parameter, `None` where the graph never used it.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }

    /// Copies the value into a constant node, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var, NumericsError> {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    fn shape_err(msg: String) -> NumericsError {
        NumericsError::Shape(msg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = crate::numerics::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        if wv.rows() != k {
            return Err(Self::shape_err(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Self::shape_err(format!("linear: bias {:?} vs width {n}", bv.shape())));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(m, k, n, T::one(), MatRef::dense(xv.data(), k), MatRef::dense(wv.data(), n), beta, MatMut::dense(&mut out, n));
        let value = Tensor::new(vec![m, n], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Linear { x, w, b }, &parents)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Self::shape_err(format!(
                "{}: {:?} vs {:?}",
                op.name(),
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| T::one() - x);
        self.push(value, Op::OneMinus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(T::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| gelu(x).0);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return Err(Self::shape_err(format!("layer_norm: width {d} vs gain {:?}", gv.shape())));
        }
        let inv_d = T::one() / T::lit(d as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Softmax along the last axis; masked-out positions get exactly zero.
    ///
    /// A row with every position masked falls back to uniform weights over
    /// the row and is counted in [`Graph::degenerate_rows`].
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(m) = mask {
            m.check(rows, cols)?;
        }
        let mut out = vec![T::zero(); rows * cols];
        let mut degenerate = vec![false; rows];
        for r in 0..rows {
            let allowed = |j: usize| mask.is_none_or(|m| m.allowed(r, j));
            degenerate[r] = softmax_row(xv.row(r), &allowed, &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.note_degenerate(&degenerate);
        self.push(value, Op::Softmax { x, degenerate }, &[x])
    }

    fn note_degenerate(&mut self, rows: &[bool]) {
        let n = rows.iter().filter(|&&d| d).count();
        if n > 0 {
            log::warn!("{n} attention row(s) fully masked; using uniform weights");
            self.degenerate_rows += n;
        }
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q [Tq x d]`, `k [Tk x d]`, `v [Tk x d]`.
    ///
    /// Head `h` uses columns `h*d/heads .. (h+1)*d/heads`; scores are scaled
    /// by `1/sqrt(d/heads)`. Masked keys receive exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Result<Var, NumericsError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        if kv.cols() != d || vv.cols() != d || vv.rows() != tk {
            return Err(Self::shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Self::shape_err(format!("attention: width {d} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            m.check(tq, tk)?;
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut degenerate = vec![false; heads * tq];
        let mut out = vec![T::zero(); tq * d];
        let mut scores = vec![T::zero(); tq * tk];
        for h in 0..heads {
            let off = h * dh;
            gemm(
                tq,
                dh,
                tk,
                scale,
                MatRef::dense(qv.data(), d).at(off),
                MatRef::dense_t(kv.data(), d).at(off),
                T::zero(),
                MatMut::dense(&mut scores, tk),
            );
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            for r in 0..tq {
                let allowed = |j: usize| mask.is_none_or(|m| m.allowed(r, j));
                degenerate[h * tq + r] = softmax_row(&scores[r * tk..(r + 1) * tk], &allowed, &mut p[r * tk..(r + 1) * tk]);
            }
            gemm(
                tq,
                tk,
                dh,
                T::one(),
                MatRef::dense(p, tk),
                MatRef::dense(vv.data(), d).at(off),
                T::zero(),
                MatMut::dense(&mut out, d).at(off),
            );
        }
        let value = Tensor::new(vec![tq, d], out)?;
        self.note_degenerate(&degenerate);
        self.push(value, Op::Attention { q, k, v, heads, probs, degenerate }, &[q, k, v])
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let d = tv.cols();
        if indices.is_empty() {
            return Err(Self::shape_err("embedding: empty index list".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= tv.rows() {
                return Err(NumericsError::Index { index: i, bound: tv.rows() });
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        self.push(value, Op::Embedding { table, indices: indices.to_vec() }, &[table])
    }

    /// Stacks 2-D nodes along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let d = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return Err(Self::shape_err(format!("concat_rows: width {} vs {d}", pv.cols())));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start .. start+len` of a 2-D node.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let d = xv.cols();
        if len == 0 || start + len > xv.rows() {
            return Err(Self::shape_err(format!("rows {start}..{} of {}", start + len, xv.rows())));
        }
        let value = Tensor::new(vec![len, d], xv.data()[start * d..(start + len) * d].to_vec())?;
        self.push(value, Op::Rows { x, start }, &[x])
    }

    /// Summed token negative log-likelihood `sum_i -log softmax(logits_i)[t_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Self::shape_err(format!("cross_entropy: {n} rows vs {} targets", targets.len())));
        }
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(NumericsError::Index { index: t, bound: vocab });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * vocab + j] = e;
                z += e;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            total += z.ln() + max - row[t];
        }
        let value = Tensor::scalar(total);
        self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    /// Inverted dropout; identity when dropout is disabled on this graph.
    pub fn dropout(&mut self, x: Var) -> Result<Var, NumericsError> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let rate = *rate;
        let scale = T::one() / (T::one() - rate);
        let rate64 = rate.as_f64();
        let n = self.nodes[x.0].value.len();
        let keep: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate64 { T::zero() } else { scale })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&keep).map(|(&a, &k)| a * k).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x, keep }, &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(Self::shape_err("backward: loss must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { by_node: grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), MatRef::dense(gy.data(), n), MatRef::dense_t(bv.data(), n), T::zero(), MatMut::dense(&mut ga, k));
                    acc(grads, *a, Tensor::new(av.shape().to_vec(), ga).expect("shape"));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), MatRef::dense_t(av.data(), k), MatRef::dense(gy.data(), n), T::zero(), MatMut::dense(&mut gb, n));
                    acc(grads, *b, Tensor::new(bv.shape().to_vec(), gb).expect("shape"));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), MatRef::dense(gy.data(), n), MatRef::dense_t(wv.data(), n), T::zero(), MatMut::dense(&mut gx, k));
                    acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx).expect("shape"));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), MatRef::dense_t(xv.data(), k), MatRef::dense(gy.data(), n), T::zero(), MatMut::dense(&mut gw, n));
                    acc(grads, *w, Tensor::new(wv.shape().to_vec(), gw).expect("shape"));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut gb = vec![T::zero(); n];
                    for row in gy.data().chunks(n) {
                        for (g, &r) in gb.iter_mut().zip(row) {
                            *g += r;
                        }
                    }
                    acc(grads, b, Tensor::new(self.value(b).shape().to_vec(), gb).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, gy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(grads, *a, zip_map(gy, bv, |g, y| g * y));
                }
                if self.wants(*b) {
                    acc(grads, *b, zip_map(gy, av, |g, x| g * x));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, gy.map(|g| g * *s)),
            Op::OneMinus(a) => acc(grads, *a, gy.map(|g| -g)),
            Op::Sigmoid(a) => acc(grads, *a, zip_map(gy, &node.value, |g, s| g * s * (T::one() - s))),
            Op::Tanh(a) => acc(grads, *a, zip_map(gy, &node.value, |g, t| g * (T::one() - t * t))),
            Op::Gelu(a) => acc(grads, *a, zip_map(gy, self.value(*a), |g, x| g * gelu(x).1)),
            Op::Sum(a) => {
                let g = gy.item();
                acc(grads, *a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                let inv_d = T::one() / T::lit(d as f64);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gyr = &gy.data()[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gyr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            let dxh = gyr[j] * gv[j];
                            gx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    acc(grads, *x, Tensor::new(node.value.shape().to_vec(), gx).expect("shape"));
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let g = gy.data()[r * d + j];
                            gg[j] += g * xhat[r * d + j];
                            gb[j] += g;
                        }
                    }
                    if self.wants(*gain) {
                        acc(grads, *gain, Tensor::new(self.value(*gain).shape().to_vec(), gg).expect("shape"));
                    }
                    if self.wants(*bias) {
                        acc(grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), gb).expect("shape"));
                    }
                }
            }
            Op::Softmax { x, degenerate } => {
                let cols = node.value.cols();
                let mut gx = vec![T::zero(); node.value.len()];
                for (r, &deg) in degenerate.iter().enumerate() {
                    if deg {
                        continue;
                    }
                    let p = node.value.row(r);
                    let g = &gy.data()[r * cols..(r + 1) * cols];
                    softmax_row_backward(p, g, T::one(), &mut gx[r * cols..(r + 1) * cols]);
                }
                acc(grads, *x, Tensor::new(node.value.shape().to_vec(), gx).expect("shape"));
            }
            Op::Attention { q, k, v, heads, probs, degenerate } => {
                self.attention_backward(*q, *k, *v, *heads, probs, degenerate, gy, grads);
            }
            Op::Embedding { table, indices } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut gt = vec![T::zero(); tv.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += gy.data()[r * d + j];
                    }
                }
                acc(grads, *table, Tensor::new(tv.shape().to_vec(), gt).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.wants(p) {
                        let g = Tensor::new(pv.shape().to_vec(), gy.data()[offset..offset + n].to_vec()).expect("shape");
                        acc(grads, p, g);
                    }
                    offset += n;
                }
            }
            Op::Rows { x, start } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut gx = vec![T::zero(); xv.len()];
                gx[start * d..start * d + gy.len()].copy_from_slice(gy.data());
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx).expect("shape"));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let vocab = lv.cols();
                let g = gy.item();
                let mut gl: Vec<T> = probs.iter().map(|&p| p * g).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * vocab + t] -= g;
                }
                acc(grads, *logits, Tensor::new(lv.shape().to_vec(), gl).expect("shape"));
            }
            Op::Dropout { x, keep } => {
                let data = gy.data().iter().zip(keep).map(|(&g, &k)| g * k).collect();
                acc(grads, *x, Tensor::new(gy.shape().to_vec(), data).expect("shape"));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        degenerate: &[bool],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d, tk) = (qv.rows(), qv.cols(), kv.rows());
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut gq = vec![T::zero(); tq * d];
        let mut gk = vec![T::zero(); tk * d];
        let mut gv = vec![T::zero(); tk * d];
        let mut dp = vec![T::zero(); tq * tk];
        let mut ds = vec![T::zero(); tq * tk];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            // dV_h = P^T dO_h
            gemm(tk, tq, dh, T::one(), MatRef::dense_t(p, tk), MatRef::dense(gy.data(), d).at(off), T::zero(), MatMut::dense(&mut gv, d).at(off));
            // dP = dO_h V_h^T
            gemm(tq, dh, tk, T::one(), MatRef::dense(gy.data(), d).at(off), MatRef::dense_t(vv.data(), d).at(off), T::zero(), MatMut::dense(&mut dp, tk));
            for r in 0..tq {
                let row = &mut ds[r * tk..(r + 1) * tk];
                if degenerate[h * tq + r] {
                    row.fill(T::zero());
                } else {
                    softmax_row_backward(&p[r * tk..(r + 1) * tk], &dp[r * tk..(r + 1) * tk], scale, row);
                }
            }
            // dQ_h = dS K_h ; dK_h = dS^T Q_h
            gemm(tq, tk, dh, T::one(), MatRef::dense(&ds, tk), MatRef::dense(kv.data(), d).at(off), T::zero(), MatMut::dense(&mut gq, d).at(off));
            gemm(tk, tq, dh, T::one(), MatRef::dense_t(&ds, tk), MatRef::dense(qv.data(), d).at(off), T::zero(), MatMut::dense(&mut gk, d).at(off));
        }
        let acc = |grads: &mut [Option<Tensor<T>>], var: Var, g: Vec<T>, shape: &[usize]| {
            let g = Tensor::new(shape.to_vec(), g).expect("shape");
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        if self.wants(q) {
            acc(grads, q, gq, qv.shape());
        }
        if self.wants(k) {
            acc(grads, k, gk, kv.shape());
        }
        if self.wants(v) {
            acc(grads, v, gv, vv.shape());
        }
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}

/// Writes masked softmax of `x` into `out`; returns true when every
/// position was masked (uniform fallback).
fn softmax_row<T: Scalar>(x: &[T], allowed: &dyn Fn(usize) -> bool, out: &mut [T]) -> bool {
    let mut max = T::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        let u = T::one() / T::lit(x.len() as f64);
        out.fill(u);
        return true;
    }
    let mut z = T::zero();
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) {
            let e = (v - max).exp();
            out[j] = e;
            z += e;
        } else {
            out[j] = T::zero();
        }
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    false
}

/// `out = scale * p ⊙ (g - <p, g>)`.
fn softmax_row_backward<T: Scalar>(p: &[T], g: &[T], scale: T, out: &mut [T]) {
    let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((o, &pj), &gj) in out.iter_mut().zip(p).zip(g) {
        *o = scale * pj * (gj - dot);
    }
}
