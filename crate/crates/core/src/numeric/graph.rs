//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order. Calling [`Graph::gradients`] on a one-element node walks the tape
//! backwards once and returns derivatives for every parameter of the bound
//! [`ParamStore`]; parameters that did not take part get zero gradients.
//!
//! Parameter tensors are borrowed, never copied, so building a graph over a
//! large embedding table is cheap.

use std::collections::HashMap;

use super::{Gradients, NumericError, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(v))` without overflow for large `|v|`.
pub fn log_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}

enum Op {
    Leaf,
    Param(String),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Act(Var, Activation),
    LogSigmoid(Var),
    Gather { src: Var, index: Vec<Option<usize>> },
    Concat { parts: Vec<(Var, usize)>, rows: usize },
    SegmentMean { src: Var, segments: Vec<(usize, usize)>, cols: usize },
    Sum(Var),
    PairwiseSum { a: Var, b: Var, rows_a: usize, rows_b: usize, cols: usize },
    MaxPool { src: Var, argmax: Vec<usize> },
    Reshape(Var),
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

/// A recorded computation over a borrowed [`ParamStore`].
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    bound: HashMap<String, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var, NumericError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Param(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// `a @ b` where `a` is `[.., k]` (leading dims flattened into rows) and
    /// `b` is `[k, n]`. The result keeps `a`'s leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(NumericError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }))
    }

    /// Adds a `[c]` bias along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let c = *sx.last().unwrap();
        if sb != [c] {
            return Err(NumericError::Shape {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::Offset(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(t, Op::Act(x, kind))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(log_sigmoid);
        self.push(t, Op::LogSigmoid(x))
    }

    /// Builds a tensor of `shape` whose i-th value is `src.data[index[i]]`,
    /// or zero where the index is `None`. Covers embedding lookup, sliding
    /// windows, row selection and slicing.
    pub fn gather(
        &mut self,
        src: Var,
        index: Vec<Option<usize>>,
        shape: Vec<usize>,
    ) -> Result<Var, NumericError> {
        let data = self.value(src).data();
        let mut out = Vec::with_capacity(index.len());
        for ix in &index {
            match *ix {
                Some(i) if i < data.len() => out.push(data[i]),
                Some(i) => {
                    return Err(NumericError::Contract(format!(
                        "gather index {i} out of range for tensor of {} values",
                        data.len()
                    )))
                }
                None => out.push(0.0),
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Gather { src, index }))
    }

    /// Row `i` of a `[rows, cols]` node as a `[cols]` vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || i >= shape[0] {
            return Err(NumericError::Contract(format!(
                "row {i} of tensor with shape {shape:?}"
            )));
        }
        let cols = shape[1];
        let index = (i * cols..(i + 1) * cols).map(Some).collect();
        self.gather(x, index, vec![cols])
    }

    /// Concatenates along the last dimension. All parts must share their
    /// leading dimensions.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(NumericError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push((p, *s.last().unwrap()));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: widths, rows }))
    }

    /// Mean over consecutive row ranges `(start, len)` of a `[rows, cols]`
    /// node, giving `[segments, cols]`.
    pub fn segment_mean(
        &mut self,
        x: Var,
        segments: Vec<(usize, usize)>,
    ) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(NumericError::Contract(format!(
                "segment_mean needs a matrix, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let data = self.value(x).data();
        let mut out = vec![0.0; segments.len() * cols];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > rows {
                return Err(NumericError::Contract(format!(
                    "segment ({start}, {len}) outside {rows} rows"
                )));
            }
            let dst = &mut out[s * cols..(s + 1) * cols];
            for r in start..start + len {
                for (d, v) in dst.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                    *d += v;
                }
            }
            let inv = 1.0 / len as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let t = Tensor::new(vec![segments.len(), cols], out)?;
        Ok(self.push(t, Op::SegmentMean { src: x, segments, cols }))
    }

    /// Mean over the rows of a `[rows, cols]` node.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(NumericError::Contract(format!(
                "mean_rows needs a matrix, got {shape:?}"
            )));
        }
        let m = self.segment_mean(x, vec![(0, shape[0])])?;
        self.reshape(m, vec![shape[1]])
    }

    /// Sum of every value, as a one-element node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `out[i, j, :] = a[i, :] + b[j, :]` for `a: [p, c]`, `b: [q, c]`.
    pub fn pairwise_sum(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(NumericError::Shape {
                op: "pairwise_sum",
                lhs: sa,
                rhs: sb,
            });
        }
        let (p, q, c) = (sa[0], sb[0], sa[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(p * q * c);
        for i in 0..p {
            let ra = &da[i * c..(i + 1) * c];
            for j in 0..q {
                let rb = &db[j * c..(j + 1) * c];
                out.extend(ra.iter().zip(rb).map(|(x, y)| x + y));
            }
        }
        let t = Tensor::new(vec![p, q, c], out)?;
        Ok(self.push(
            t,
            Op::PairwiseSum {
                a,
                b,
                rows_a: p,
                rows_b: q,
                cols: c,
            },
        ))
    }

    /// Channel-wise max over disjoint 2x2 blocks of a `[h, w, c]` grid. A
    /// trailing odd row or column is dropped.
    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] < 2 || shape[1] < 2 {
            return Err(NumericError::Shape {
                op: "max_pool_2x2",
                lhs: shape,
                rhs: vec![2, 2],
            });
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(oh * ow * c);
        let mut argmax = Vec::with_capacity(oh * ow * c);
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = (2 * i * w + 2 * j) * c + ch;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * i + di) * w + 2 * j + dj) * c + ch;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(t, Op::MaxPool { src: x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericError> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reverse-mode derivatives of the one-element node `loss` with respect
    /// to every parameter of the bound store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, NumericError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericError::Contract(format!(
                "gradients need a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.store);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out_val = match &node.value {
                Value::Owned(t) => t,
                Value::Borrowed(t) => t,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => out.accumulate(name, &g)?,
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    // dA = dC B^T
                    let da = acc(&mut grads, *a, m * k);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        if gr.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[r * k + p] += dot(gr, brow);
                        }
                    }
                    // dB = A^T dC
                    let db = acc(&mut grads, *b, k * n);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            let dst = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(gr) {
                                *d += a_rp * gv;
                            }
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    let c = self.value(*bias).numel();
                    axpy(acc(&mut grads, *x, g.len()), &g, 1.0);
                    let db = acc(&mut grads, *bias, c);
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                Op::Add(a, b) => {
                    axpy(acc(&mut grads, *a, g.len()), &g, 1.0);
                    axpy(acc(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    axpy(acc(&mut grads, *a, g.len()), &g, 1.0);
                    axpy(acc(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da = acc(&mut grads, *a, g.len());
                    for ((d, gv), y) in da.iter_mut().zip(&g).zip(bv) {
                        *d += gv * y;
                    }
                    let db = acc(&mut grads, *b, g.len());
                    for ((d, gv), x) in db.iter_mut().zip(&g).zip(av) {
                        *d += gv * x;
                    }
                }
                Op::Scale(x, f) => axpy(acc(&mut grads, *x, g.len()), &g, *f),
                Op::Offset(x) => axpy(acc(&mut grads, *x, g.len()), &g, 1.0),
                Op::Act(x, kind) => {
                    let xv = self.value(*x).data();
                    let yv = out_val.data();
                    let dx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        let local = match kind {
                            Activation::Sigmoid => yv[i] * (1.0 - yv[i]),
                            Activation::Tanh => 1.0 - yv[i] * yv[i],
                            Activation::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        dx[i] += g[i] * local;
                    }
                }
                Op::LogSigmoid(x) => {
                    let xv = self.value(*x).data();
                    let dx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        // d/dv ln sigmoid(v) = sigmoid(-v)
                        dx[i] += g[i] * sigmoid(-xv[i]);
                    }
                }
                Op::Gather { src, index } => {
                    let n = self.value(*src).numel();
                    let ds = acc(&mut grads, *src, n);
                    for (gv, ix) in g.iter().zip(index) {
                        if let Some(j) = ix {
                            ds[*j] += gv;
                        }
                    }
                }
                Op::Concat { parts, rows } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(p, w) in parts {
                        let dp = acc(&mut grads, p, rows * w);
                        for r in 0..*rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (d, v) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                        offset += w;
                    }
                }
                Op::SegmentMean { src, segments, cols } => {
                    let cols = *cols;
                    let n = self.value(*src).numel();
                    let ds = acc(&mut grads, *src, n);
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        let gs = &g[s * cols..(s + 1) * cols];
                        for r in start..start + len {
                            for (d, v) in ds[r * cols..(r + 1) * cols].iter_mut().zip(gs) {
                                *d += v * inv;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    let dx = acc(&mut grads, *x, n);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::PairwiseSum {
                    a,
                    b,
                    rows_a,
                    rows_b,
                    cols,
                } => {
                    let (p, q, c) = (*rows_a, *rows_b, *cols);
                    {
                        let da = acc(&mut grads, *a, p * c);
                        for i in 0..p {
                            for j in 0..q {
                                let src = &g[(i * q + j) * c..(i * q + j + 1) * c];
                                for (d, v) in da[i * c..(i + 1) * c].iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    let db = acc(&mut grads, *b, q * c);
                    for i in 0..p {
                        for j in 0..q {
                            let src = &g[(i * q + j) * c..(i * q + j + 1) * c];
                            for (d, v) in db[j * c..(j + 1) * c].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::MaxPool { src, argmax } => {
                    let n = self.value(*src).numel();
                    let ds = acc(&mut grads, *src, n);
                    for (gv, &j) in g.iter().zip(argmax) {
                        ds[j] += gv;
                    }
                }
                Op::Reshape(x) => axpy(acc(&mut grads, *x, g.len()), &g, 1.0),
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
