//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] borrows the parameter store, records every operation with the
//! values it needs for the backward pass, and hands out [`Var`] handles.
//! Tensors are treated as matrices: the last dimension is the column count,
//! all leading dimensions are flattened into rows.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, axpy, dot};
use crate::params::{ParamId, ParamStore};
use crate::rope::RopeTable;
use crate::tensor::{Scalar, Tensor};

/// Sentinel index used by the gather ops to produce a zero.
pub const ZERO_INDEX: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention mask over a packed batch: tokens attend only within their own
/// segment, and additionally only to earlier positions when `causal`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Arc<Vec<usize>>,
    pub causal: bool,
}

impl AttnLayout {
    pub fn single(len: usize, causal: bool) -> Self {
        Self { segments: Arc::new(vec![len]), causal }
    }

    pub fn packed(lengths: Vec<usize>, causal: bool) -> Self {
        Self { segments: Arc::new(lengths), causal }
    }

    pub fn total(&self) -> usize {
        self.segments.iter().sum()
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AffineMod { x: Var, scale: Var, shift: Var },
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    RmsNorm { x: Var, w: Option<Var>, inv_rms: Vec<T> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: AttnLayout, probs: Vec<T> },
    Rope { x: Var, table: Arc<RopeTable<T>> },
    GatherRows { x: Var, idx: Arc<Vec<u32>> },
    GatherElems { x: Var, idx: Arc<Vec<u32>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<Option<u32>>, probs: Vec<T>, count: usize },
    SegmentMean { x: Var, segments: Arc<Vec<usize>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    store: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    checked: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new(), checked: true }
    }

    /// A graph without a parameter store, for standalone op use.
    pub fn detached() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new(), checked: true }
    }

    /// Enables or disables NaN/Inf trapping on every op output.
    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store.expect("graph has no parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf for a stored parameter; reused if already referenced in this graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store().get(id);
        self.nodes.push(Node { value: p.tensor.clone(), op: Op::Leaf, requires_grad: p.trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient in [`Gradients::of`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = kernels::matmul_nn(av.data(), bv.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        av.zip_map(bv, f).map_err(|_| shape_err(name, av.shape(), bv.shape()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    fn row_broadcast(&self, x: Var, r: Var, name: &str) -> Result<()> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.numel() != xv.cols() {
            return Err(shape_err(name, xv.shape(), rv.shape()));
        }
        Ok(())
    }

    /// `x + r` with `r` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, "add_row")?;
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, r]);
        self.push(t, Op::AddRow(x, r), rg, "add_row")
    }

    /// `x * r` with `r` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, "mul_row")?;
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, r]);
        self.push(t, Op::MulRow(x, r), rg, "mul_row")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg, "scale")
    }

    /// Adaptive modulation `x * (1 + scale) + shift`, all three the same shape.
    pub fn affine_mod(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xv, sv, hv) = (self.value(x), self.value(scale), self.value(shift));
        if xv.shape() != sv.shape() || xv.shape() != hv.shape() {
            return Err(shape_err("affine_mod", xv.shape(), sv.shape()));
        }
        let out: Vec<T> = xv
            .data()
            .iter()
            .zip(sv.data())
            .zip(hv.data())
            .map(|((&a, &s), &h)| a * (T::one() + s) + h)
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, scale, shift]);
        self.push(t, Op::AffineMod { x, scale, shift }, rg, "affine_mod")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Silu(x), rg, "silu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.exp());
        let rg = self.rg(&[x]);
        self.push(t, Op::Exp(x), rg, "exp")
    }

    /// Row-wise RMS normalization with an optional learned gain.
    pub fn rms_norm(&mut self, x: Var, w: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(w) = w {
            if self.value(w).numel() != c {
                return Err(shape_err("rms_norm", xv.shape(), self.value(w).shape()));
            }
        }
        let eps = T::from_f64_lossy(eps);
        let cn = T::from_usize(c).unwrap();
        let mut out = xv.data().to_vec();
        let mut inv = Vec::with_capacity(xv.rows());
        for row in out.chunks_exact_mut(c) {
            let ms = dot(row, row) / cn;
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            for v in row.iter_mut() {
                *v *= r;
            }
            if let Some(w) = w {
                for (v, &g) in row.iter_mut().zip(self.nodes[w.0].value.data()) {
                    *v *= g;
                }
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let mut deps = vec![x];
        deps.extend(w);
        let rg = self.rg(&deps);
        self.push(t, Op::RmsNorm { x, w, inv_rms: inv }, rg, "rms_norm")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            kernels::softmax_row(row, c);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg, "softmax")
    }

    /// Multi-head attention `softmax(q k^T / sqrt(d)) v` over `[tokens, heads*d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: &AttnLayout) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || qv.cols() % heads != 0 {
            return Err(Error::Shape(format!("attention: width {} not divisible into {heads} heads", qv.cols())));
        }
        if layout.total() != qv.rows() {
            return Err(Error::Structure(format!(
                "attention: segment lengths sum to {} but there are {} tokens",
                layout.total(),
                qv.rows()
            )));
        }
        let hd = qv.cols() / heads;
        let (out, probs) =
            kernels::attention_forward(qv.data(), kv.data(), vv.data(), heads, hd, &layout.segments, layout.causal);
        let t = Tensor::from_parts(qv.shape().to_vec(), out);
        let rg = self.rg(&[q, k, v]);
        self.push(t, Op::Attention { q, k, v, heads, layout: layout.clone(), probs }, rg, "attention")
    }

    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable<T>>) -> Result<Var> {
        let xv = self.value(x);
        table.check(xv)?;
        let mut t = xv.clone();
        table.apply_in_place(t.data_mut(), false);
        let rg = self.rg(&[x]);
        self.push(t, Op::Rope { x, table: table.clone() }, rg, "rope")
    }

    /// Output row `i` is input row `idx[i]` (or zeros for [`ZERO_INDEX`]).
    pub fn gather_rows(&mut self, x: Var, idx: &Arc<Vec<u32>>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); idx.len() * c];
        for (o, &i) in out.chunks_exact_mut(c).zip(idx.iter()) {
            if i == ZERO_INDEX {
                continue;
            }
            let i = i as usize;
            if i >= r {
                return Err(Error::Shape(format!("gather_rows: index {i} out of {r} rows")));
            }
            o.copy_from_slice(xv.row(i));
        }
        let t = Tensor::new(&[idx.len(), c], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::GatherRows { x, idx: idx.clone() }, rg, "gather_rows")
    }

    /// Element-level gather into `shape`; pure index rearrangement.
    pub fn gather_elems(&mut self, x: Var, idx: &Arc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i == ZERO_INDEX {
                out.push(T::zero());
            } else if (i as usize) < n {
                out.push(xv.data()[i as usize]);
            } else {
                return Err(Error::Shape(format!("gather_elems: index {i} out of {n}")));
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::GatherElems { x, idx: idx.clone() }, rg, "gather_elems")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let t = Tensor::concat_rows(&vals)?;
        let rg = self.rg(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), self.value(*p).shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::from_parts(vec![rows, total], out);
        let rg = self.rg(parts);
        self.push(t, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!("slice_cols {start}..{} of width {c}", start + len)));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::from_parts(vec![xv.rows(), len], out);
        let rg = self.rg(&[x]);
        self.push(t, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::scalar(xv.sum() / T::from_usize(xv.numel()).unwrap());
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean(x), rg, "mean")
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mse", av.shape(), bv.shape()));
        }
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / T::from_usize(av.numel()).unwrap());
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mse(a, b), rg, "mse")
    }

    /// Mean cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r {
            return Err(Error::Shape(format!("cross_entropy: {} targets for {r} rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: no target positions".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (row, tgt) in probs.chunks_exact_mut(c).zip(targets) {
            kernels::softmax_row(row, c);
            if let Some(t) = tgt {
                let t = *t as usize;
                if t >= c {
                    return Err(Error::Shape(format!("cross_entropy: target {t} >= vocab {c}")));
                }
                loss -= row[t].max(T::min_positive_value()).ln();
            }
        }
        let t = Tensor::scalar(loss / T::from_usize(count).unwrap());
        let rg = self.rg(&[logits]);
        self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
            "cross_entropy",
        )
    }

    /// Mean of the rows of each contiguous segment: `[sum(lengths), c] -> [segments, c]`.
    pub fn segment_mean(&mut self, x: Var, segments: &Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if segments.iter().sum::<usize>() != xv.rows() || segments.iter().any(|&l| l == 0) {
            return Err(Error::Structure(format!(
                "segment_mean: lengths {:?} vs {} rows",
                segments,
                xv.rows()
            )));
        }
        let mut out = vec![T::zero(); segments.len() * c];
        let mut start = 0;
        for (s, &len) in segments.iter().enumerate() {
            let o = &mut out[s * c..(s + 1) * c];
            for r in start..start + len {
                for (a, &b) in o.iter_mut().zip(xv.row(r)) {
                    *a += b;
                }
            }
            let inv = T::one() / T::from_usize(len).unwrap();
            for a in o.iter_mut() {
                *a *= inv;
            }
            start += len;
        }
        let t = Tensor::from_parts(vec![segments.len(), c], out);
        let rg = self.rg(&[x]);
        self.push(t, Op::SegmentMean { x, segments: segments.clone() }, rg, "segment_mean")
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves.insert(i, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let mut params: Vec<(ParamId, Tensor<T>)> = self
            .param_vars
            .iter()
            .filter_map(|(&pid, v)| leaves.get(&v.0).map(|t| (pid, t.clone())))
            .collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { leaves, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(g, bv.data(), m, n, k, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(av.data(), g, k, m, n, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(T::one(), g, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(T::one(), g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(T::one(), g, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(-T::one(), g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRow(x, r) => {
                let c = val(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(T::one(), g, gx);
                }
                if let Some(gr) = self.acc(grads, *r) {
                    for row in g.chunks_exact(c) {
                        axpy(T::one(), row, gr);
                    }
                }
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(*x), val(*r));
                let c = xv.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (orow, grow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((o, &gi), &ri) in orow.iter_mut().zip(grow).zip(rv.data()) {
                            *o += gi * ri;
                        }
                    }
                }
                if let Some(gr) = self.acc(grads, *r) {
                    for (grow, xrow) in g.chunks_exact(c).zip(xv.data().chunks_exact(c)) {
                        for ((o, &gi), &xi) in gr.iter_mut().zip(grow).zip(xrow) {
                            *o += gi * xi;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(*c, g, gx);
                }
            }
            Op::AffineMod { x, scale, shift } => {
                let (xv, sv) = (val(*x).data(), val(*scale).data());
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &si) in gx.iter_mut().zip(g).zip(sv) {
                        *o += gi * (T::one() + si);
                    }
                }
                if let Some(gs) = self.acc(grads, *scale) {
                    for ((o, &gi), &xi) in gs.iter_mut().zip(g).zip(xv) {
                        *o += gi * xi;
                    }
                }
                if let Some(gh) = self.acc(grads, *shift) {
                    axpy(T::one(), g, gh);
                }
            }
            Op::Silu(x) => {
                let xv = val(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        let sg = T::one() / (T::one() + (-xi).exp());
                        *o += gi * sg * (T::one() + xi * (T::one() - sg));
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(yv) {
                        *o += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(yv) {
                        *o += gi * yi;
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xv = val(*x);
                let c = xv.cols();
                let cn = T::from_usize(c).unwrap();
                let wv = w.map(|w| val(w).data());
                if let Some(w) = w {
                    if let Some(gw) = self.acc(grads, *w) {
                        for ((grow, xrow), &r) in g.chunks_exact(c).zip(xv.data().chunks_exact(c)).zip(inv_rms) {
                            for ((o, &gi), &xi) in gw.iter_mut().zip(grow).zip(xrow) {
                                *o += gi * xi * r;
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut gy = vec![T::zero(); c];
                    for (((orow, grow), xrow), &r) in
                        gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xv.data().chunks_exact(c)).zip(inv_rms)
                    {
                        for j in 0..c {
                            gy[j] = match wv {
                                Some(wv) => grow[j] * wv[j],
                                None => grow[j],
                            };
                        }
                        // d/dx of x*r: r * (gy - xhat * mean(gy * xhat))
                        let m = dot(&gy, xrow) * r / cn;
                        for j in 0..c {
                            let xhat = xrow[j] * r;
                            orow[j] += r * (gy[j] - xhat * m);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((orow, grow), yrow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let d = dot(grow, yrow);
                        for j in 0..c {
                            orow[j] += yrow[j] * (grow[j] - d);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, layout, probs } => {
                let qv = val(*q);
                let hd = qv.cols() / heads;
                let (dq, dk, dv) = kernels::attention_backward(
                    g,
                    qv.data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    *heads,
                    hd,
                    &layout.segments,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(gv) = self.acc(grads, var) {
                        axpy(T::one(), &d, gv);
                    }
                }
            }
            Op::Rope { x, table } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let mut d = g.to_vec();
                    table.apply_in_place(&mut d, true);
                    axpy(T::one(), &d, gx);
                }
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (grow, &i) in g.chunks_exact(c).zip(idx.iter()) {
                        if i != ZERO_INDEX {
                            let i = i as usize;
                            axpy(T::one(), grow, &mut gx[i * c..(i + 1) * c]);
                        }
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&gi, &i) in g.iter().zip(idx.iter()) {
                        if i != ZERO_INDEX {
                            gx[i as usize] += gi;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        axpy(T::one(), &g[off..off + n], gp);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if let Some(gp) = self.acc(grads, *p) {
                        for (orow, grow) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            axpy(T::one(), &grow[off..off + w], orow);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(T::one(), g, &mut gx[start * c..start * c + g.len()]);
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (orow, grow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                        axpy(T::one(), grow, &mut orow[*start..start + w]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(T::one(), g, gx);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize(val(*x).numel()).unwrap();
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let f = g[0] * T::from_f64_lossy(2.0) / T::from_usize(av.len()).unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += f * (x - y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= f * (x - y);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = val(*logits).cols();
                let f = g[0] / T::from_usize(*count).unwrap();
                if let Some(gl) = self.acc(grads, *logits) {
                    for ((orow, prow), tgt) in gl.chunks_exact_mut(c).zip(probs.chunks_exact(c)).zip(targets) {
                        if let Some(t) = tgt {
                            for j in 0..c {
                                orow[j] += f * prow[j];
                            }
                            orow[*t as usize] -= f;
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let c = val(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    let mut start = 0;
                    for (s, &len) in segments.iter().enumerate() {
                        let inv = T::one() / T::from_usize(len).unwrap();
                        for r in start..start + len {
                            axpy(inv, &g[s * c..(s + 1) * c], &mut gx[r * c..(r + 1) * c]);
                        }
                        start += len;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::detached();
        let x = t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 9.0, 1.5]);
        let i = g.constant(Tensor::eye(3));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::detached();
        let a = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gives_ones_and_unrelated_gives_nothing() {
        let mut g = Graph::<f64>::detached();
        let p = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let q = g.input(t(&[2], &[1.0, 2.0]));
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.of(p).unwrap().data(), &[1.0; 4]);
        assert!(grads.of(q).is_none());
    }

    #[test]
    fn checked_mode_traps_overflow() {
        let mut g = Graph::<f32>::detached();
        let a = g.constant(Tensor::full(&[2], 1000.0));
        assert!(matches!(g.exp(a), Err(Error::NonFinite { .. })));
        let mut g = Graph::<f32>::detached().with_checked(false);
        let a = g.constant(Tensor::full(&[2], 1000.0));
        assert!(g.exp(a).is_ok());
    }

    #[test]
    fn softmax_symmetric_cases() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let b = g.constant(t(&[1, 4], &[3.3; 4]));
        let s = g.softmax(b).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
    }

    #[test]
    fn cross_entropy_requires_targets() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.cross_entropy(a, &[None, None]), Err(Error::Contract(_))));
    }
}
