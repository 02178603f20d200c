//! Reverse-mode automatic differentiation over dense row-major 2-D `f64`
//! arrays.
//!
//! A [`Tape`] records every kernel in execution order; [`Tape::backward`]
//! walks the records once in reverse and returns gradients for every
//! [`Parameter`] that was read through [`Tape::param`]. Tapes are single-use:
//! a second backward call fails with [`Error::TapeConsumed`].

use std::borrow::Cow;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `a` (m x k) times `b` (k x n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    Ok(Tensor {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `a` (m x k) times the transpose of `b` (n x k).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, n) = (a.rows, b.rows);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)));
        }
    }
    Ok(Tensor {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Transpose of `a` (k x m) times `b` (k x n).
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let (m, n) = (a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..a.rows {
        let ar = a.row(i);
        let br = b.row(i);
        for (p, &x) in ar.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &y) in out_row.iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `ln Σ exp(xs)`; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Stable `ln σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
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

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let (r, c) = value.shape();
        Parameter {
            name: name.into(),
            grad: Tensor::zeros(r, c),
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
            value,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.grads {
            self.params[id.0].grad.add_assign(g);
        }
    }
}

/// Per-parameter gradients produced by one backward pass, ordered by id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|i| &self.grads[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(i, t)| (*i, t))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    RowMean(Var),
    Gather { table: Var, ids: Vec<u32> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { src: Var, start: usize },
    LogSoftmax(Var),
    LogSumExp(Var),
    MaskedLogSumExp { src: Var, mask: Vec<bool> },
    MaskedSoftmax(Var),
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Recording of one forward computation.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_nodes: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Reads a parameter. The same node is reused for repeated reads.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store: &'a ParamStore = self.store;
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(a),
            right: self.shape(b),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    /// Adds a 1 x c row vector to every row of an r x c matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows != 1 || bv.cols != av.cols {
            return Err(self.mismatch("add_row", a, bias));
        }
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scalar_mul(b, -1.0);
        self.add(a, neg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a))
    }

    /// Mean over rows: r x c to 1 x c.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows == 0 {
            return Err(Error::EmptySequence);
        }
        let mut out = vec![0.0; av.cols];
        for r in 0..av.rows {
            for (o, v) in out.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / av.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::row_vector(out), Op::RowMean(a)))
    }

    /// Rows of `table` selected by `ids`, in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * tv.cols);
        for &id in ids {
            if id as usize >= tv.rows {
                return Err(Error::TokenOutOfRange { id, vocab: tv.rows });
            }
            data.extend_from_slice(tv.row(id as usize));
        }
        let out = Tensor {
            rows: ids.len(),
            cols: tv.cols,
            data,
        };
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols != cols {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            rows += pv.rows;
            data.extend_from_slice(&pv.data);
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..start + len` of `src`.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let sv = self.value(src);
        if start + len > sv.rows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: sv.shape(),
                right: (start + len, sv.cols),
            });
        }
        let out = Tensor {
            rows: len,
            cols: sv.cols,
            data: sv.data[start * sv.cols..(start + len) * sv.cols].to_vec(),
        };
        Ok(self.push(out, Op::SliceRows { src, start }))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..av.rows {
            let lse = logsumexp(av.row(r));
            out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row-wise log-sum-exp: r x c to r x 1.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| logsumexp(av.row(r))).collect();
        let out = Tensor {
            rows: av.rows,
            cols: 1,
            data,
        };
        self.push(out, Op::LogSumExp(a))
    }

    fn check_mask(&self, a: Var, mask: &[bool], op: &'static str) -> Result<()> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(Error::ShapeMismatch {
                op,
                left: (r, c),
                right: (mask.len(), 1),
            });
        }
        if (0..r).any(|i| !mask[i * c..(i + 1) * c].iter().any(|&m| m)) {
            return Err(Error::invalid(format!(
                "{op}: a row has no selected entries"
            )));
        }
        Ok(())
    }

    /// Row-wise log-sum-exp over entries where `mask` is true.
    pub fn masked_logsumexp(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        self.check_mask(a, mask, "masked_logsumexp")?;
        let av = self.value(a);
        let c = av.cols;
        let data = (0..av.rows)
            .map(|r| {
                let sel: Vec<f64> = av
                    .row(r)
                    .iter()
                    .zip(&mask[r * c..(r + 1) * c])
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .collect();
                logsumexp(&sel)
            })
            .collect();
        let out = Tensor {
            rows: av.rows,
            cols: 1,
            data,
        };
        Ok(self.push(
            out,
            Op::MaskedLogSumExp {
                src: a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Row-wise softmax over entries where `mask` is true; masked-out
    /// entries get weight 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        self.check_mask(a, mask, "masked_softmax")?;
        let av = self.value(a);
        let c = av.cols;
        let mut out = Tensor::zeros(av.rows, c);
        for r in 0..av.rows {
            let row = av.row(r);
            let m = &mask[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &s)| s)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut total = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(out, Op::MaskedSoftmax(a)))
    }

    /// Sum of all entries as 1 x 1.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1) as f64;
        let s = self.sum(a);
        self.scalar_mul(s, 1.0 / n)
    }

    /// Propagates d(loss)/d(node) back to every parameter leaf and releases
    /// the recorded intermediates.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &*node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.push((*id, g)),
                Op::MatMul(a, b) => {
                    let av = &*self.nodes[a.0].value;
                    let bv = &*self.nodes[b.0].value;
                    let ga = matmul_nt(&g, bv)?;
                    let gb = matmul_tn(av, &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let av = &*self.nodes[a.0].value;
                    let bv = &*self.nodes[b.0].value;
                    let ga = matmul(&g, bv)?;
                    let gb = matmul_tn(&g, av);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        for (o, v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *bias, Tensor::row_vector(gb));
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = &*self.nodes[a.0].value;
                    let bv = &*self.nodes[b.0].value;
                    let ga = zip_map(&g, bv, |x, y| x * y);
                    let gb = zip_map(&g, av, |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Tanh(a) => acc(&mut grads, *a, zip_map(&g, y, |d, t| d * (1.0 - t * t))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip_map(&g, y, |d, s| d * s * (1.0 - s))),
                Op::LogSigmoid(a) => {
                    let xv = &*self.nodes[a.0].value;
                    acc(&mut grads, *a, zip_map(&g, xv, |d, x| d * sigmoid(-x)));
                }
                Op::RowMean(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let inv = 1.0 / r as f64;
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        for (o, v) in ga.row_mut(row).iter_mut().zip(&g.data) {
                            *o = v * inv;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather { table, ids } => {
                    let (r, c) = self.nodes[table.0].value.shape();
                    let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for (k, &id) in ids.iter().enumerate() {
                        for (o, v) in slot.row_mut(id as usize).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.nodes[p.0].value.shape();
                        let part = Tensor {
                            rows: r,
                            cols: c,
                            data: g.data[offset * c..(offset + r) * c].to_vec(),
                        };
                        offset += r;
                        acc(&mut grads, *p, part);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.nodes[p.0].value.shape();
                        let mut part = Tensor::zeros(r, c);
                        for row in 0..r {
                            part.row_mut(row)
                                .copy_from_slice(&g.row(row)[offset..offset + c]);
                        }
                        offset += c;
                        acc(&mut grads, *p, part);
                    }
                }
                Op::SliceRows { src, start } => {
                    let (r, c) = self.nodes[src.0].value.shape();
                    let slot = grads[src.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    let dst = &mut slot.data[start * c..(start + g.rows) * c];
                    for (o, v) in dst.iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
                Op::LogSoftmax(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows {
                        let total: f64 = g.row(r).iter().sum();
                        for (o, ly) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= ly.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExp(a) => {
                    let xv = &*self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let lse = y.data[r];
                        let d = g.data[r];
                        for (o, x) in ga.row_mut(r).iter_mut().zip(xv.row(r)) {
                            *o = d * (x - lse).exp();
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedLogSumExp { src, mask } => {
                    let xv = &*self.nodes[src.0].value;
                    let c = xv.cols;
                    let mut ga = Tensor::zeros(xv.rows, c);
                    for r in 0..xv.rows {
                        let lse = y.data[r];
                        let d = g.data[r];
                        let row = xv.row(r);
                        let o = ga.row_mut(r);
                        for j in 0..c {
                            if mask[r * c + j] {
                                o[j] = d * (row[j] - lse).exp();
                            }
                        }
                    }
                    acc(&mut grads, *src, ga);
                }
                Op::MaskedSoftmax(src) => {
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let inner = dot(y.row(r), g.row(r));
                        for ((o, p), d) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = p * (d - inner);
                        }
                    }
                    acc(&mut grads, *src, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
            }
        }

        self.nodes.clear();
        self.param_nodes.clear();
        out.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads: out })
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 200,
        }
    }
}

impl AdamConfig {
    /// Learning rate at 1-based `step`: linear ramp from 0 over the warmup.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// One bias-corrected Adam update of every parameter from its current
/// gradient. Returns the learning rate used by the last parameter.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> f64 {
    let mut lr_used = 0.0;
    for p in store.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let lr = cfg.lr_at(p.step);
        lr_used = lr;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let values = p.value.data.iter_mut();
        let grads = p.grad.data.iter();
        let ms = p.first_moment.data.iter_mut();
        let vs = p.second_moment.data.iter_mut();
        for (((w, &g), m), v) in values.zip(grads).zip(ms).zip(vs) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    lr_used
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite-difference gradient checks for tests across the crate.

    use super::*;

    /// Max relative error between the analytic gradient of `f` and central
    /// differences with step `h`, over every coordinate of every parameter.
    pub fn max_rel_error<F>(store: &mut ParamStore, h: f64, f: F) -> f64
    where
        F: Fn(&mut Tape<'_>) -> Var,
    {
        let analytic = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss).unwrap()
        };
        let eval = |store: &ParamStore| {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.value(loss).item()
        };
        let mut worst: f64 = 0.0;
        for pid in 0..store.len() {
            let id = ParamId(pid);
            let n = store.value(id).data().len();
            for k in 0..n {
                let orig = store.value(id).data()[k];
                store.get_mut(id).value.data_mut()[k] = orig + h;
                let up = eval(store);
                store.get_mut(id).value.data_mut()[k] = orig - h;
                let down = eval(store);
                store.get_mut(id).value.data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}
