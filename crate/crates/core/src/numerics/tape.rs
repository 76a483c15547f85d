//! Eager gradient tape.
//!
//! Every operation evaluates immediately and appends a node holding its value
//! and the operands it read. Operands always precede their consumers, so
//! walking node indices downwards is a reverse topological order and each node
//! is visited exactly once during [`Tape::backward`].

use super::kernels::{self, gemm};
use super::{NumericsError, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    BmmNt(NodeId, NodeId),
    Sum(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    Concat { a: NodeId, b: NodeId, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Permute { a: NodeId, axes: Vec<usize> },
    BroadcastBatch(NodeId),
    Rotary { a: NodeId, positions: Vec<usize>, base: f64 },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<T>, normalizer: T, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of primitive operations over dense tensors.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `id`; zeros when the node did not participate.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn finite<T: Real>(op: &'static str, data: &[T]) -> Result<(), NumericsError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }
}

/// `b` broadcasts over `a` when it is a scalar or a trailing suffix of `a`'s shape.
fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

/// Sum `g` (shaped like the broadcast result) down to `period` elements.
fn reduce_broadcast<T: Real>(g: &[T], period: usize) -> Vec<T> {
    let mut out = vec![T::zero(); period];
    for chunk in g.chunks_exact(period) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, requires_grad: bool) -> Result<NodeId, NumericsError> {
        finite(op, value.data())?;
        self.nodes.push(Node { value, op: kind, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId, NumericsError> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId, NumericsError> {
        self.push("constant", value, Op::Leaf, false)
    }

    fn binary_broadcast(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        kind: Op<T>,
    ) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !broadcasts(va.shape(), vb.shape()) {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let period = vb.numel();
        let bd = vb.data();
        let data: Vec<T> = va
            .data()
            .chunks_exact(period)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(op, value, kind, rg)
    }

    /// Elementwise sum; `b` may broadcast as a scalar or a trailing-shape suffix.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId, NumericsError> {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push("scale", value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: T) -> Result<NodeId, NumericsError> {
        let value = self.value(a).map(|x| x + offset);
        let rg = self.rg(&[a]);
        self.push("add_scalar", value, Op::AddScalar(a), rg)
    }

    /// `[..., m, k] · [k, n] -> [..., m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = va.numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), rg)
    }

    /// `[..., k] · [n, k]ᵀ -> [..., n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let k = sb[1];
        let n = sb[0];
        let m = va.numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), true, &mut out, false);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", Tensor::from_parts(shape, out), Op::MatMulNt(a, b), rg)
    }

    fn batch_dims(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<usize, NumericsError> {
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err(op, sa, sb));
        }
        Ok(sa[..sa.len() - 2].iter().product())
    }

    /// Batched `[..., m, k] · [..., k, n] -> [..., m, n]` with equal leading dims.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let batch = Self::batch_dims("bmm", sa, sb)?;
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(shape_err("bmm", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..],
                false,
                &vb.data()[i * k * n..],
                false,
                &mut out[i * m * n..],
                false,
            );
        }
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        self.push("bmm", Tensor::from_parts(shape, out), Op::Bmm(a, b), rg)
    }

    /// Batched `[..., m, k] · [..., n, k]ᵀ -> [..., m, n]`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let batch = Self::batch_dims("bmm_nt", sa, sb)?;
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 2]);
        if sb[r - 1] != k {
            return Err(shape_err("bmm_nt", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..],
                false,
                &vb.data()[i * n * k..],
                true,
                &mut out[i * m * n..],
                false,
            );
        }
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        self.push("bmm_nt", Tensor::from_parts(shape, out), Op::BmmNt(a, b), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Softmax over the last axis. Entries with `mask[i] == false` get
    /// probability exactly zero and do not influence the row max or sum.
    pub fn softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId, NumericsError> {
        let va = self.value(a);
        if va.rank() == 0 {
            return Err(NumericsError::InvalidArgument { op: "softmax", detail: "scalar input".into() });
        }
        if let Some(m) = mask {
            if m.len() != va.numel() {
                return Err(shape_err("softmax", va.shape(), &[m.len()]));
            }
        }
        let w = *va.shape().last().unwrap();
        let mut out = vec![T::zero(); va.numel()];
        for (r, (row, dst)) in va.data().chunks_exact(w).zip(out.chunks_exact_mut(w)).enumerate() {
            let visible = |j: usize| mask.is_none_or(|m| m[r * w + j]);
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if visible(j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                continue; // fully masked row
            }
            let mut total = T::zero();
            for (j, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if visible(j) {
                    *d = (x - max).exp();
                    total += *d;
                }
            }
            let inv = T::one() / total;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let rg = self.rg(&[a]);
        self.push("softmax", Tensor::from_parts(va.shape().to_vec(), out), Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, NumericsError> {
        let vx = self.value(x);
        let w = *vx.shape().last().ok_or_else(|| shape_err("layer_norm", &[], &[]))?;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [w] || vb.shape() != [w] {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let mut out = vec![T::zero(); vx.numel()];
        for (row, dst) in vx.data().chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            let (xhat, _) = normalize_row(row);
            for j in 0..w {
                dst[j] = vg.data()[j] * xhat[j] + vb.data()[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            Tensor::from_parts(vx.shape().to_vec(), out),
            Op::LayerNorm { x, gamma, beta },
            rg,
        )
    }

    fn unary(&mut self, op: &'static str, a: NodeId, f: impl Fn(T) -> T, kind: Op<T>) -> Result<NodeId, NumericsError> {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, value, kind, rg)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary("gelu", a, kernels::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Gathers rows of `table` (`[V, d]`); output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], lead: &[usize]) -> Result<NodeId, NumericsError> {
        let vt = self.value(table);
        if vt.rank() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", vt.shape(), lead));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange { op: "embedding", index: id, bound: v });
            }
            out.extend_from_slice(vt.row(id));
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        self.push("embedding", Tensor::from_parts(shape, out), Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err("concat", sa, sb));
        }
        let (outer, inner) = outer_inner(sa, axis);
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for o in 0..outer {
            out.extend_from_slice(&va.data()[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&vb.data()[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let rg = self.rg(&[a, b]);
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat { a, b, axis }, rg)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let va = self.value(a);
        let sa = va.shape();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(NumericsError::InvalidArgument {
                op: "slice",
                detail: format!("axis {axis} range {start}..{} of shape {sa:?}", start + len),
            });
        }
        let (outer, inner) = outer_inner(sa, axis);
        let full = sa[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push("slice", Tensor::from_parts(shape, out), Op::Slice { a, axis, start }, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// Output axis `j` is input axis `axes[j]`.
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, NumericsError> {
        let va = self.value(a);
        let mut seen = vec![false; va.rank()];
        let valid = axes.len() == va.rank()
            && axes.iter().all(|&x| x < seen.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(shape_err("permute", va.shape(), axes));
        }
        let (shape, data) = kernels::permute(va.data(), va.shape(), axes);
        let rg = self.rg(&[a]);
        self.push("permute", Tensor::from_parts(shape, data), Op::Permute { a, axes: axes.to_vec() }, rg)
    }

    /// Repeats `a` along a new leading axis of size `n`.
    pub fn broadcast_batch(&mut self, a: NodeId, n: usize) -> Result<NodeId, NumericsError> {
        let va = self.value(a);
        if n == 0 {
            return Err(NumericsError::InvalidArgument { op: "broadcast_batch", detail: "n = 0".into() });
        }
        let mut out = Vec::with_capacity(n * va.numel());
        for _ in 0..n {
            out.extend_from_slice(va.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(va.shape());
        let rg = self.rg(&[a]);
        self.push("broadcast_batch", Tensor::from_parts(shape, out), Op::BroadcastBatch(a), rg)
    }

    /// Rotary position encoding of `a` viewed as `[..., positions.len(), d]`.
    pub fn rotary(&mut self, a: NodeId, positions: &[usize], base: f64) -> Result<NodeId, NumericsError> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() < 2 || s[s.len() - 2] != positions.len() {
            return Err(shape_err("rotary", s, &[positions.len()]));
        }
        let d = s[s.len() - 1];
        if !d.is_multiple_of(2) {
            return Err(NumericsError::InvalidArgument { op: "rotary", detail: format!("odd head dimension {d}") });
        }
        let mut data = va.data().to_vec();
        kernels::rotate_pairs(&mut data, positions, d, base, false);
        let value = Tensor::from_parts(s.to_vec(), data);
        let rg = self.rg(&[a]);
        self.push("rotary", value, Op::Rotary { a, positions: positions.to_vec(), base }, rg)
    }

    /// Weighted negative log-likelihood:
    /// `Σ_i weights[i]·(−log softmax(logits_i)[targets[i]]) / normalizer`.
    ///
    /// `logits` is viewed as `[rows, V]`. Rows with zero weight are ignored
    /// (their targets are not read). When `col_mask` is given the softmax is
    /// restricted to columns where it is `true`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[T],
        normalizer: T,
        col_mask: Option<&[bool]>,
    ) -> Result<NodeId, NumericsError> {
        let vl = self.value(logits);
        let v = *vl.shape().last().ok_or_else(|| shape_err("cross_entropy", &[], &[]))?;
        let rows = vl.numel() / v;
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err("cross_entropy", vl.shape(), &[targets.len(), weights.len()]));
        }
        if col_mask.is_some_and(|m| m.len() != v) {
            return Err(shape_err("cross_entropy", vl.shape(), &[col_mask.unwrap().len()]));
        }
        if !(normalizer > T::zero()) {
            return Err(NumericsError::InvalidArgument { op: "cross_entropy", detail: "normalizer must be positive".into() });
        }
        let visible = |j: usize| col_mask.is_none_or(|m| m[j]);
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        for (r, row) in vl.data().chunks_exact(v).enumerate() {
            if weights[r] == T::zero() {
                continue;
            }
            let t = targets[r];
            if t >= v || !visible(t) {
                return Err(NumericsError::IndexOutOfRange { op: "cross_entropy", index: t, bound: v });
            }
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if visible(j) && x > max {
                    max = x;
                }
            }
            let mut sum = T::zero();
            let p = &mut probs[r * v..(r + 1) * v];
            for (j, &x) in row.iter().enumerate() {
                if visible(j) {
                    p[j] = (x - max).exp();
                    sum += p[j];
                }
            }
            let lse = max + sum.ln();
            let inv = T::one() / sum;
            p.iter_mut().for_each(|q| *q *= inv);
            total += weights[r] * (lse - row[t]);
        }
        let value = Tensor::scalar(total / normalizer);
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), normalizer, probs },
            rg,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.rank() != 0 {
            return Err(NumericsError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, contrib: Vec<T>) -> Result<(), NumericsError> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        finite("backward", &contrib)?;
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.nodes[id.0].value.shape().to_vec(), contrib));
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), NumericsError> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec())?;
                if self.wants(*b) {
                    let mut gb = reduce_broadcast(gd, self.value(*b).numel());
                    if matches!(node.op, Op::Sub(..)) {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.acc(grads, *b, gb)?;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let period = vb.numel();
                if self.wants(*a) {
                    let ga: Vec<T> = gd
                        .chunks_exact(period)
                        .flat_map(|c| c.iter().zip(vb.data()).map(|(&x, &y)| x * y))
                        .collect();
                    self.acc(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let prod: Vec<T> = gd.iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, reduce_broadcast(&prod, period))?;
                }
            }
            Op::Scale(a, f) => self.acc(grads, *a, gd.iter().map(|&x| x * *f).collect())?,
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, gd.to_vec())?,
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, vb.data(), true, &mut ga, false);
                    self.acc(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, va.data(), true, gd, false, &mut gb, false);
                    self.acc(grads, *b, gb)?;
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, vb.data(), false, &mut ga, false);
                    self.acc(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); n * k];
                    gemm(n, m, k, gd, true, va.data(), false, &mut gb, false);
                    self.acc(grads, *b, gb)?;
                }
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = va.shape();
                let r = s.len();
                let (m, k, n) = (s[r - 2], s[r - 1], vb.shape()[r - 1]);
                let batch = va.numel() / (m * k);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(m, n, k, &gd[i * m * n..], false, &vb.data()[i * k * n..], true, &mut ga[i * m * k..], false);
                    }
                    self.acc(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(k, m, n, &va.data()[i * m * k..], true, &gd[i * m * n..], false, &mut gb[i * k * n..], false);
                    }
                    self.acc(grads, *b, gb)?;
                }
            }
            Op::BmmNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = va.shape();
                let r = s.len();
                let (m, k, n) = (s[r - 2], s[r - 1], vb.shape()[r - 2]);
                let batch = va.numel() / (m * k);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(m, n, k, &gd[i * m * n..], false, &vb.data()[i * n * k..], false, &mut ga[i * m * k..], false);
                    }
                    self.acc(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * n * k];
                    for i in 0..batch {
                        gemm(n, m, k, &gd[i * m * n..], true, &va.data()[i * m * k..], false, &mut gb[i * n * k..], false);
                    }
                    self.acc(grads, *b, gb)?;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![gd[0]; n])?;
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                let mut ga = vec![T::zero(); y.len()];
                for ((yr, gr), dst) in y.chunks_exact(w).zip(gd.chunks_exact(w)).zip(ga.chunks_exact_mut(w)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                    for j in 0..w {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, ga)?;
            }
            Op::LayerNorm { x, gamma, beta } => {
                let vx = self.value(*x);
                let gam = self.value(*gamma).data();
                let w = gam.len();
                let rows = vx.numel() / w;
                let mut gx = vec![T::zero(); vx.numel()];
                let mut gg = vec![T::zero(); w];
                let mut gbeta = vec![T::zero(); w];
                let wt = T::of(w as f64);
                for r in 0..rows {
                    let xr = &vx.data()[r * w..(r + 1) * w];
                    let gr = &gd[r * w..(r + 1) * w];
                    let (xhat, rstd) = normalize_row(xr);
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..w {
                        gg[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xhat[j];
                    }
                    mean_d /= wt;
                    mean_dx /= wt;
                    for j in 0..w {
                        let d = gr[j] * gam[j];
                        gx[r * w + j] = rstd * (d - mean_d - xhat[j] * mean_dx);
                    }
                }
                self.acc(grads, *x, gx)?;
                self.acc(grads, *gamma, gg)?;
                self.acc(grads, *beta, gbeta)?;
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, gd.iter().zip(va).map(|(&g, &x)| g * kernels::gelu_grad(x)).collect())?;
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc(grads, *a, gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect())?;
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc(grads, *a, gd.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect())?;
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    gd.iter().zip(va).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect(),
                )?;
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let mut gt = vec![T::zero(); vt.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gd[i * d + j];
                    }
                }
                self.acc(grads, *table, gt)?;
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (outer, inner) = outer_inner(sa, *axis);
                let (ca, cb) = (sa[*axis] * inner, sb[*axis] * inner);
                let mut ga = Vec::with_capacity(outer * ca);
                let mut gb = Vec::with_capacity(outer * cb);
                for o in 0..outer {
                    let base = o * (ca + cb);
                    ga.extend_from_slice(&gd[base..base + ca]);
                    gb.extend_from_slice(&gd[base + ca..base + ca + cb]);
                }
                self.acc(grads, *a, ga)?;
                self.acc(grads, *b, gb)?;
            }
            Op::Slice { a, axis, start } => {
                let sa = self.value(*a).shape();
                let (outer, inner) = outer_inner(sa, *axis);
                let len = node.value.shape()[*axis];
                let full = sa[*axis] * inner;
                let mut ga = vec![T::zero(); outer * full];
                for o in 0..outer {
                    let dst = o * full + start * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *a, ga)?;
            }
            Op::Permute { a, axes } => {
                let (_, ga) = kernels::permute(gd, node.value.shape(), &kernels::inverse_axes(axes));
                self.acc(grads, *a, ga)?;
            }
            Op::BroadcastBatch(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, reduce_broadcast(gd, n))?;
            }
            Op::Rotary { a, positions, base } => {
                let d = *node.value.shape().last().unwrap();
                let mut ga = gd.to_vec();
                kernels::rotate_pairs(&mut ga, positions, d, *base, true);
                self.acc(grads, *a, ga)?;
            }
            Op::CrossEntropy { logits, targets, weights, normalizer, probs } => {
                let v = *self.value(*logits).shape().last().unwrap();
                let scale = gd[0] / *normalizer;
                let mut gl = vec![T::zero(); probs.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let f = scale * w;
                    for j in 0..v {
                        gl[r * v + j] = f * probs[r * v + j];
                    }
                    gl[r * v + targets[r]] -= f;
                }
                self.acc(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

/// Returns `(x̂, 1/σ)` for one row.
fn normalize_row<T: Real>(row: &[T]) -> (Vec<T>, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |a, &x| a + x) / n;
    let var = row.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
    let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
    (row.iter().map(|&x| (x - mean) * rstd).collect(), rstd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, v: &[f64]) -> NodeId {
        tape.param(Tensor::from_vec(v.to_vec())).unwrap()
    }

    #[test]
    fn sum_of_squares_value_and_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let f = tape.sum(sq).unwrap();
        assert_eq!(tape.value(f).item(), 14.0);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0)).unwrap();
        let b = tape.param(Tensor::scalar(3.0)).unwrap();
        let f = tape.mul(a, b).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(a).item(), 3.0);
        assert_eq!(g.get(b).item(), 2.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        let p = tape.softmax(x, None).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_hidden_entries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 1e3, 1.0])).unwrap();
        let p = tape.softmax(x, Some(&[true, false, true])).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero_before_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![0.7; 6])).unwrap();
        let g = tape.constant(Tensor::ones(&[6])).unwrap();
        let b = tape.constant(Tensor::zeros(&[6])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(NumericsError::NotScalar { .. })));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(vec![1e308])).unwrap();
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { op: "scale" }));
    }

    #[test]
    fn non_participating_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let unused = tape.param(Tensor::zeros(&[3, 2])).unwrap();
        let f = tape.sum(x).unwrap();
        let g = tape.backward(f).unwrap();
        let gu = g.get(unused);
        assert_eq!(gu.shape(), &[3, 2]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_out_accumulates_path_gradients() {
        // f = sum(x∘x) + sum(3x): df/dx = 2x + 3
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[0.5, -1.0]);
        let sq = tape.mul(x, x).unwrap();
        let a = tape.sum(sq).unwrap();
        let lin = tape.scale(x, 3.0).unwrap();
        let b = tape.sum(lin).unwrap();
        let f = tape.add(a, b).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).data(), &[4.0, 1.0]);
    }
}
