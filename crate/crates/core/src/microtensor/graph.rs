use std::sync::Arc;

use super::params::ParamStore;
use super::real::{gemm, Real};
use super::sparse::Csr;
use super::tensor::{split_axis, Tensor};
use super::TensorError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MatMul(Var, Var),
    Softmax(Var, usize),
    /// Input, axis and the `1/σ` of every slice.
    Standardize(Var, usize, Vec<f64>),
    Sum(Var, usize),
    Mean(Var, usize),
    Max(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    Spmm(Arc<Csr>, Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    WeightedMse(Var, Var, Vec<f64>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward pass. Nodes are appended in creation order, which is
/// a topological order, so the backward sweep walks the tape in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, Var)>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan, TensorError> {
    let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let (a_batched, b_batched, batch_shape) = if ab == bb {
        (true, true, ab)
    } else if bb.is_empty() {
        (true, false, ab)
    } else if ab.is_empty() {
        (false, true, bb)
    } else {
        return Err(mismatch());
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulPlan { batch: batch_shape.iter().product(), m, k, n, a_batched, b_batched, out_shape })
}

/// True when `b` broadcasts against `a` over leading axes only.
fn suffix_compatible(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, TensorError> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var, TensorError> {
        self.push(t, Op::Leaf, true)
    }

    /// Inserts a named parameter as a gradient-receiving leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, TensorError> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let t = store.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?.clone();
        let v = self.variable(t)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameters used in this graph, in first-use order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_compatible(ta.shape(), tb.shape()) {
            return Err(TensorError::ShapeMismatch { op, lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let bl = tb.len().max(1);
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[i % bl])).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let sv = T::from_f64(s);
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * sv).collect())?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| if x > T::ZERO { x } else { T::ZERO }).collect(),
        )?;
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product over the two trailing axes, batched over leading axes.
    /// Either operand may be rank 2 and is then shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = vec![T::ZERO; plan.out_shape.iter().product()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if !plan.b_batched {
            gemm(plan.batch * m, k, n, ta.data(), false, tb.data(), false, &mut out, T::ZERO);
        } else {
            for bi in 0..plan.batch {
                let a_off = if plan.a_batched { bi * m * k } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[a_off..a_off + m * k],
                    false,
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    T::ZERO,
                );
            }
        }
        let t = Tensor::new(plan.out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul(a, b), rg)
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let r = ta.rank();
        if r < 2 {
            return Err(TensorError::UnknownAxis { op: "transpose", axis: 1, rank: r });
        }
        let (rows, cols) = (ta.shape()[r - 2], ta.shape()[r - 1]);
        let batch = ta.len() / (rows * cols).max(1);
        let mut out = vec![T::ZERO; ta.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = ta.data()[off + i * cols + j];
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// `csr · a`, with `a` viewed as `[csr.cols(), width]`; output `[csr.rows(), width]`.
    pub fn spmm(&mut self, csr: Arc<Csr>, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if csr.cols() == 0 || ta.len() % csr.cols() != 0 || ta.shape().first() != Some(&csr.cols()) {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                lhs: vec![csr.rows(), csr.cols()],
                rhs: ta.shape().to_vec(),
            });
        }
        let width = ta.len() / csr.cols();
        let mut out = vec![T::ZERO; csr.rows() * width];
        let src = ta.data();
        for r in 0..csr.rows() {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, w) in csr.row(r) {
                let w = T::from_f64(w);
                for (d, &s) in dst.iter_mut().zip(&src[c * width..(c + 1) * width]) {
                    *d += w * s;
                }
            }
        }
        let t = Tensor::new(vec![csr.rows(), width], out)?;
        let rg = self.rg(a);
        self.push(t, Op::Spmm(csr, a), rg)
    }

    // ---- axis reductions and structure -------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (outer, dim, inner) = split_axis("softmax", ta.shape(), axis)?;
        let x = ta.data();
        let mut out = vec![T::ZERO; ta.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let mx = (0..dim).map(|d| x[idx(d)].to_f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0f64;
                for d in 0..dim {
                    z += (x[idx(d)].to_f64() - mx).exp();
                }
                for d in 0..dim {
                    out[idx(d)] = T::from_f64((x[idx(d)].to_f64() - mx).exp() / z);
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a, axis), rg)
    }

    /// Shifts and scales every slice along `axis` to zero mean and unit
    /// variance: `(x - μ) / sqrt(σ² + eps)`.
    pub fn standardize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument("standardize needs eps > 0".into()));
        }
        let ta = self.value(a);
        let (outer, dim, inner) = split_axis("standardize", ta.shape(), axis)?;
        if dim == 0 {
            return Err(TensorError::InvalidArgument("standardize over an empty axis".into()));
        }
        let x = ta.data();
        let mut out = vec![T::ZERO; ta.len()];
        let mut inv = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let mean = (0..dim).map(|d| x[idx(d)].to_f64()).sum::<f64>() / dim as f64;
                let var = (0..dim).map(|d| (x[idx(d)].to_f64() - mean).powi(2)).sum::<f64>() / dim as f64;
                let r = 1.0 / (var + eps).sqrt();
                for d in 0..dim {
                    out[idx(d)] = T::from_f64((x[idx(d)].to_f64() - mean) * r);
                }
                inv[o * inner + i] = r;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push(t, Op::Standardize(a, axis, inv), rg)
    }

    fn reduce(&mut self, op: &'static str, a: Var, axis: usize, mean: bool) -> Result<Tensor<T>, TensorError> {
        let ta = self.value(a);
        let (outer, dim, inner) = split_axis(op, ta.shape(), axis)?;
        let x = ta.data();
        let mut out = vec![T::ZERO; outer * inner];
        let mut acc = vec![0.0f64; inner];
        for o in 0..outer {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for d in 0..dim {
                let row = &x[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (s, v) in acc.iter_mut().zip(row) {
                    *s += v.to_f64();
                }
            }
            let div = if mean { dim as f64 } else { 1.0 };
            for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(&acc) {
                *dst = T::from_f64(s / div);
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Sum over `axis` (removed from the shape), accumulated in `f64`.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.reduce("sum", a, axis, false)?;
        let rg = self.rg(a);
        self.push(t, Op::Sum(a, axis), rg)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.reduce("mean", a, axis, true)?;
        let rg = self.rg(a);
        self.push(t, Op::Mean(a, axis), rg)
    }

    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (outer, dim, inner) = split_axis("max", ta.shape(), axis)?;
        if dim == 0 {
            return Err(TensorError::InvalidArgument("max over an empty axis".into()));
        }
        let x = ta.data();
        let mut out = vec![T::ZERO; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * dim) * inner + i;
                for d in 1..dim {
                    let idx = (o * dim + d) * inner + i;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = x[best];
                arg[o * inner + i] = best;
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        self.push(t, Op::Max(a, arg), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(t, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Selects rows (entries along axis 0); indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let rows = *ta.shape().first().ok_or(TensorError::UnknownAxis { op: "gather_rows", axis: 0, rank: 0 })?;
        let width = ta.len() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index {
            if r >= rows {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: r, len: rows });
            }
            out.extend_from_slice(&ta.data()[r * width..(r + 1) * width]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        self.push(t, Op::Gather(a, index.to_vec()), rg)
    }

    // ---- losses ------------------------------------------------------

    /// Mean of squared differences over all entries.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch { op: "mse_loss", lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum();
        let t = Tensor::scalar(T::from_f64(s / ta.len().max(1) as f64));
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mse(a, b), rg)
    }

    /// `Σ_r w_r Σ_d (a - b)² / (rows · width)` for `a, b` of shape `[rows, ...]`.
    pub fn weighted_mse_loss(&mut self, a: Var, b: Var, row_weights: &[f64]) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.rank() == 0 || ta.shape()[0] != row_weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_mse_loss",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let width = ta.len() / row_weights.len().max(1);
        let mut s = 0.0;
        for (r, w) in row_weights.iter().enumerate() {
            for i in r * width..(r + 1) * width {
                s += w * (ta.data()[i].to_f64() - tb.data()[i].to_f64()).powi(2);
            }
        }
        let t = Tensor::scalar(T::from_f64(s / ta.len().max(1) as f64));
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::WeightedMse(a, b, row_weights.to_vec()), rg)
    }

    /// Mean cross-entropy of `[rows, classes]` logits against integer targets.
    pub fn cross_entropy_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_loss",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let classes = tl.shape()[1];
        let mut s = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy_loss", index: t, len: classes });
            }
            let row = &tl.data()[r * classes..(r + 1) * classes];
            let mx = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v.to_f64() - mx).exp()).sum::<f64>().ln();
            s += lse - row[t].to_f64();
        }
        let t = Tensor::scalar(T::from_f64(s / targets.len().max(1) as f64));
        let rg = self.rg(logits);
        self.push(t, Op::CrossEntropy(logits, targets.to_vec()), rg)
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. The graph cannot be extended or differentiated again
    /// afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape(loss).to_vec() });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.backward_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, id: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    let ga = slot(grads, *a, gout.len());
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if wants(b) {
                    let bl = self.value(*b).len();
                    let mut acc = vec![0.0f64; bl];
                    for (i, &d) in gout.iter().enumerate() {
                        acc[i % bl] += d.to_f64();
                    }
                    let gb = slot(grads, *b, bl);
                    for (g, s) in gb.iter_mut().zip(acc) {
                        *g += T::from_f64(sign * s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let bl = xb.len();
                if wants(a) {
                    let ga = slot(grads, *a, gout.len());
                    for (i, (g, &d)) in ga.iter_mut().zip(gout).enumerate() {
                        *g += d * xb[i % bl];
                    }
                }
                if wants(b) {
                    let mut acc = vec![0.0f64; bl];
                    for (i, &d) in gout.iter().enumerate() {
                        acc[i % bl] += (d * xa[i]).to_f64();
                    }
                    let gb = slot(grads, *b, bl);
                    for (g, s) in gb.iter_mut().zip(acc) {
                        *g += T::from_f64(s);
                    }
                }
            }
            Op::Scale(a, s) => {
                let sv = T::from_f64(*s);
                let ga = slot(grads, *a, gout.len());
                for (g, &d) in ga.iter_mut().zip(gout) {
                    *g += d * sv;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = slot(grads, *a, gout.len());
                for ((g, &d), &xv) in ga.iter_mut().zip(gout).zip(x) {
                    if xv > T::ZERO {
                        *g += d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let plan = matmul_plan(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if wants(a) {
                    let ga = slot(grads, *a, ta.len());
                    if !plan.b_batched {
                        gemm(plan.batch * m, n, k, gout, false, tb.data(), true, ga, T::ONE);
                    } else {
                        for bi in 0..plan.batch {
                            let a_off = if plan.a_batched { bi * m * k } else { 0 };
                            gemm(
                                m,
                                n,
                                k,
                                &gout[bi * m * n..(bi + 1) * m * n],
                                false,
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                true,
                                &mut ga[a_off..a_off + m * k],
                                T::ONE,
                            );
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, *b, tb.len());
                    if !plan.b_batched {
                        gemm(k, plan.batch * m, n, ta.data(), true, gout, false, gb, T::ONE);
                    } else {
                        for bi in 0..plan.batch {
                            let a_off = if plan.a_batched { bi * m * k } else { 0 };
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[a_off..a_off + m * k],
                                true,
                                &gout[bi * m * n..(bi + 1) * m * n],
                                false,
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                T::ONE,
                            );
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let shape = self.shape(*a);
                let r = shape.len();
                let (rows, cols) = (shape[r - 2], shape[r - 1]);
                let batch = gout.len() / (rows * cols).max(1);
                let ga = slot(grads, *a, gout.len());
                for b in 0..batch {
                    let off = b * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[off + i * cols + j] += gout[off + j * rows + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = slot(grads, *a, gout.len());
                for (g, &d) in ga.iter_mut().zip(gout) {
                    *g += d;
                }
            }
            Op::Spmm(csr, a) => {
                let len = self.value(*a).len();
                let width = len / csr.cols();
                let ga = slot(grads, *a, len);
                for r in 0..csr.rows() {
                    let src = &gout[r * width..(r + 1) * width];
                    for (c, w) in csr.row(r) {
                        let w = T::from_f64(w);
                        for (g, &d) in ga[c * width..(c + 1) * width].iter_mut().zip(src) {
                            *g += w * d;
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, dim, inner) = split_axis("softmax", node.value.shape(), *axis).expect("validated");
                let ga = slot(grads, *a, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |d: usize| (o * dim + d) * inner + i;
                        let dot: f64 = (0..dim).map(|d| (gout[idx(d)] * y[idx(d)]).to_f64()).sum();
                        for d in 0..dim {
                            let j = idx(d);
                            ga[j] += T::from_f64(y[j].to_f64() * (gout[j].to_f64() - dot));
                        }
                    }
                }
            }
            Op::Standardize(a, axis, inv) => {
                let y = node.value.data();
                let (outer, dim, inner) = split_axis("standardize", node.value.shape(), *axis).expect("validated");
                let ga = slot(grads, *a, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |d: usize| (o * dim + d) * inner + i;
                        let mean_g = (0..dim).map(|d| gout[idx(d)].to_f64()).sum::<f64>() / dim as f64;
                        let mean_gy = (0..dim).map(|d| (gout[idx(d)] * y[idx(d)]).to_f64()).sum::<f64>() / dim as f64;
                        let r = inv[o * inner + i];
                        for d in 0..dim {
                            let j = idx(d);
                            ga[j] += T::from_f64(r * (gout[j].to_f64() - mean_g - y[j].to_f64() * mean_gy));
                        }
                    }
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, dim, inner) = split_axis("sum", &shape, *axis).expect("validated");
                let scale = if matches!(node.op, Op::Mean(..)) { T::from_f64(1.0 / dim as f64) } else { T::ONE };
                let ga = slot(grads, *a, outer * dim * inner);
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            ga[(o * dim + d) * inner + i] += gout[o * inner + i] * scale;
                        }
                    }
                }
            }
            Op::Max(a, arg) => {
                let len = self.value(*a).len();
                let ga = slot(grads, *a, len);
                for (&src, &d) in arg.iter().zip(gout) {
                    ga[src] += d;
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis("concat", node.value.shape(), *axis).expect("validated");
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let dim = self.shape(*p)[*axis];
                    if wants(p) {
                        let len = self.value(*p).len();
                        let gp = slot(grads, *p, len);
                        for o in 0..outer {
                            let src = &gout[(o * total + offset) * inner..(o * total + offset + dim) * inner];
                            for (g, &d) in gp[o * dim * inner..(o + 1) * dim * inner].iter_mut().zip(src) {
                                *g += d;
                            }
                        }
                    }
                    offset += dim;
                }
            }
            Op::Gather(a, index) => {
                let len = self.value(*a).len();
                let width = gout.len() / index.len().max(1);
                let ga = slot(grads, *a, len);
                for (r, &src) in index.iter().enumerate() {
                    for (g, &d) in ga[src * width..(src + 1) * width].iter_mut().zip(&gout[r * width..(r + 1) * width]) {
                        *g += d;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * gout[0].to_f64() / xa.len().max(1) as f64;
                let diff: Vec<f64> = xa.iter().zip(xb).map(|(x, y)| c * (x.to_f64() - y.to_f64())).collect();
                if wants(a) {
                    for (g, d) in slot(grads, *a, xa.len()).iter_mut().zip(&diff) {
                        *g += T::from_f64(*d);
                    }
                }
                if wants(b) {
                    for (g, d) in slot(grads, *b, xb.len()).iter_mut().zip(&diff) {
                        *g += T::from_f64(-*d);
                    }
                }
            }
            Op::WeightedMse(a, b, w) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let width = xa.len() / w.len().max(1);
                let c = 2.0 * gout[0].to_f64() / xa.len().max(1) as f64;
                let diff: Vec<f64> =
                    xa.iter().zip(xb).enumerate().map(|(i, (x, y))| c * w[i / width] * (x.to_f64() - y.to_f64())).collect();
                if wants(a) {
                    for (g, d) in slot(grads, *a, xa.len()).iter_mut().zip(&diff) {
                        *g += T::from_f64(*d);
                    }
                }
                if wants(b) {
                    for (g, d) in slot(grads, *b, xb.len()).iter_mut().zip(&diff) {
                        *g += T::from_f64(-*d);
                    }
                }
            }
            Op::CrossEntropy(logits, targets) => {
                let x = self.value(*logits);
                let classes = x.shape()[1];
                let scale = gout[0].to_f64() / targets.len().max(1) as f64;
                let gl = slot(grads, *logits, x.len());
                for (r, &t) in targets.iter().enumerate() {
                    let row = &x.data()[r * classes..(r + 1) * classes];
                    let mx = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v.to_f64() - mx).exp()).sum();
                    for c in 0..classes {
                        let p = (row[c].to_f64() - mx).exp() / z;
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[r * classes + c] += T::from_f64(scale * (p - onehot));
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microtensor::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
        (0..rank).map(|_| rng.random_range(1..5)).collect()
    }

    /// Contracts any output with fixed random weights into a scalar.
    fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.value(v).len();
        let flat = g.reshape(v, &[n])?;
        let w = g.constant(rand_tensor(&mut rng, &[n]))?;
        let p = g.mul(flat, w)?;
        g.sum(p, 0)
    }

    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;

    fn check_unary(seed: u64, shape: &[usize], op: impl Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, shape);
        let err = grad_check(
            |g, v| {
                let y = op(g, v)?;
                project(g, y, seed + 1)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "shape {shape:?}: relative error {err:.3e}");
    }

    /// Checks both operands by treating the second as a closure constant that
    /// is itself a checked variable in a separate pass.
    fn check_binary(
        seed: u64,
        sa: &[usize],
        sb: &[usize],
        op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var, TensorError>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, sa);
        let b = rand_tensor(&mut rng, sb);
        let ea = grad_check(
            |g, v| {
                let c = g.constant(b.clone())?;
                let y = op(g, v, c)?;
                project(g, y, seed + 1)
            },
            &a,
            H,
        )
        .unwrap();
        let eb = grad_check(
            |g, v| {
                let c = g.constant(a.clone())?;
                let y = op(g, c, v)?;
                project(g, y, seed + 1)
            },
            &b,
            H,
        )
        .unwrap();
        assert!(ea < TOL && eb < TOL, "{sa:?} x {sb:?}: errors {ea:.3e} {eb:.3e}");
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(3)).unwrap();
        let a = g.constant(rand_tensor(&mut rng, &[3, 3])).unwrap();
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[60], 3.5)).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 60.0).abs() < 1e-7);
        }
    }

    #[test]
    fn mean_of_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[4, 5], 1.0)).unwrap();
        let m = g.mean(x, 1).unwrap();
        assert_eq!(g.value(m), &Tensor::full(&[4], 1.0));
    }

    #[test]
    fn gradient_of_scaled_sum() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::new(vec![3], vec![0.1, -4.0, 2.0]).unwrap()).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        let l = g.sum(y, 0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mse_of_linear_map_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4, 1]);
        let x = rand_tensor(&mut rng, &[3, 1]);
        let err = grad_check(
            |g, xv| {
                let av = g.constant(a.clone())?;
                let bv = g.constant(b.clone())?;
                let ax = g.matmul(av, xv)?;
                g.mse_loss(ax, bv)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn standardized_columns_have_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::<f64>::new();
        let x = g.variable(rand_tensor(&mut rng, &[6, 3])).unwrap();
        let y = g.standardize(x, 0, 1e-12).unwrap();
        let v = g.value(y).data().to_vec();
        for c in 0..3 {
            let col: Vec<f64> = (0..6).map(|r| v[r * 3 + c]).collect();
            assert!(col.iter().sum::<f64>().abs() < 1e-12);
            assert!((col.iter().map(|a| a * a).sum::<f64>() / 6.0 - 1.0).abs() < 1e-9);
        }
        let w = rand_tensor(&mut rng, &[6, 3]);
        let err = grad_check(
            |g, xv| {
                let wv = g.constant(w.clone())?;
                let y = g.standardize(xv, 0, 1e-3)?;
                let p = g.mul(y, wv)?;
                let p = g.mul(p, y)?;
                let s = g.sum(p, 0)?;
                g.sum(s, 0)
            },
            &rand_tensor(&mut rng, &[6, 3]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::<f64>::new();
        let x = g.variable(rand_tensor(&mut rng, &[5, 7])).unwrap();
        let l = g.cross_entropy_loss(x, &[0, 6, 3, 3, 1]).unwrap();
        g.backward(l).unwrap();
        for row in g.grad(x).unwrap().chunks(7) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[10]);
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq, 0)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn elementwise_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for s in 0..6 {
            let rank = 1 + s % 3;
            let sa = rand_shape(&mut rng, rank);
            let suffix = sa[s % rank..].to_vec();
            check_binary(100 + s as u64, &sa, &sa, |g, a, b| g.add(a, b));
            check_binary(110 + s as u64, &sa, &suffix, |g, a, b| g.add(a, b));
            check_binary(120 + s as u64, &sa, &suffix, |g, a, b| g.sub(a, b));
            check_binary(130 + s as u64, &sa, &suffix, |g, a, b| g.mul(a, b));
            check_unary(140 + s as u64, &sa, |g, a| g.scale(a, -1.7));
        }
    }

    #[test]
    fn relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for s in 0..5 {
            let shape = rand_shape(&mut rng, 2);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.random_range(0.01..1.0);
                    if rng.random_bool(0.5) { v } else { -v }
                })
                .collect();
            let x = Tensor::new(shape, data).unwrap();
            let err = grad_check(
                |g, v| {
                    let y = g.relu(v)?;
                    project(g, y, s)
                },
                &x,
                H,
            )
            .unwrap();
            assert!(err < TOL);
        }
    }

    #[test]
    fn matmul_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for s in 0..5u64 {
            let (b, m, k, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            check_binary(200 + s, &[m, k], &[k, n], |g, x, y| g.matmul(x, y));
            check_binary(210 + s, &[b, m, k], &[b, k, n], |g, x, y| g.matmul(x, y));
            check_binary(220 + s, &[b, m, k], &[k, n], |g, x, y| g.matmul(x, y));
            check_binary(230 + s, &[m, k], &[b, k, n], |g, x, y| g.matmul(x, y));
            check_binary(240 + s, &[2, b, m, k], &[2, b, k, n], |g, x, y| g.matmul(x, y));
        }
    }

    #[test]
    fn axis_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for s in 0..5u64 {
            let shape = rand_shape(&mut rng, 3);
            for axis in 0..3 {
                check_unary(300 + s, &shape, |g, a| g.softmax(a, axis));
                check_unary(310 + s, &shape, |g, a| g.sum(a, axis));
                check_unary(320 + s, &shape, |g, a| g.mean(a, axis));
                check_unary(330 + s, &shape, |g, a| g.max(a, axis));
                let mut other = shape.clone();
                other[axis] = rng.random_range(1..4);
                check_binary(340 + s, &shape, &other, |g, a, b| g.concat(&[a, b, a], axis));
            }
        }
    }

    #[test]
    fn structural_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for s in 0..5u64 {
            let shape = rand_shape(&mut rng, 3);
            let rows = shape[0];
            let idx: Vec<usize> = (0..7).map(|_| rng.random_range(0..rows)).collect();
            check_unary(400 + s, &shape, |g, a| g.gather_rows(a, &idx));
            check_unary(410 + s, &shape, |g, a| g.transpose(a));
            let n: usize = shape.iter().product();
            check_unary(420 + s, &shape, |g, a| g.reshape(a, &[n, 1]));
            let cols = shape[0];
            let csr_rows: Vec<Vec<(usize, f64)>> = (0..4)
                .map(|_| (0..3).map(|_| (rng.random_range(0..cols), rng.random_range(-1.0..1.0))).collect())
                .collect();
            let csr = Arc::new(Csr::from_rows(cols, &csr_rows));
            check_unary(430 + s, &shape, |g, a| g.spmm(csr.clone(), a));
        }
    }

    #[test]
    fn spmm_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let csr = Arc::new(Csr::from_rows(3, &[vec![(0, 0.5), (2, -1.0), (0, 0.25)], vec![], vec![(1, 2.0)]]));
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = g.spmm(csr.clone(), xv).unwrap();
        let d = g.constant(Tensor::new(vec![3, 3], csr.to_dense()).unwrap()).unwrap();
        let z = g.matmul(d, xv).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(z).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for s in 0..5u64 {
            let shape = rand_shape(&mut rng, 2);
            check_binary(500 + s, &shape, &shape, |g, a, b| g.mse_loss(a, b));
            let w: Vec<f64> = (0..shape[0]).map(|_| rng.random_range(0.5..2.0)).collect();
            check_binary(510 + s, &shape, &shape, |g, a, b| g.weighted_mse_loss(a, b, &w));
            let t: Vec<usize> = (0..shape[0]).map(|_| rng.random_range(0..shape[1])).collect();
            check_unary(520 + s, &shape, |g, a| g.cross_entropy_loss(a, &t));
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4, 2])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![4, 2] });
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(g.softmax(a, 2), Err(TensorError::UnknownAxis { axis: 2, rank: 2, .. })));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.variable(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(a), Err(TensorError::NotScalar { .. })));
        let l = g.sum(a, 0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::GraphConsumed));
        assert_eq!(g.relu(a), Err(TensorError::GraphConsumed));
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut g = Graph::<f32>::new();
            let x = g.variable(rand_tensor(&mut rng, &[6, 5]).cast()).unwrap();
            let w = g.variable(rand_tensor(&mut rng, &[5, 4]).cast()).unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.relu(h).unwrap();
            let s = g.softmax(h, 1).unwrap();
            let l = g.cross_entropy_loss(s, &[0, 1, 2, 3, 0, 1]).unwrap();
            g.backward(l).unwrap();
            (g.value(l).data()[0].to_bits(), g.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_commutes_with_permutation(
            xs in proptest::collection::vec(-5.0f64..5.0, 2..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let n = xs.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new(vec![n], xs.clone()).unwrap()).unwrap();
            let px = g.gather_rows(x, &perm).unwrap();
            let s = g.softmax(x, 0).unwrap();
            let sp = g.softmax(px, 0).unwrap();
            let ps = g.gather_rows(s, &perm).unwrap();
            for (a, b) in g.value(sp).data().iter().zip(g.value(ps).data()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
