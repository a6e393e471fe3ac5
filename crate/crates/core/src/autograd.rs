//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] walks the records in reverse and returns
//! the gradient of a scalar loss with respect to every leaf that requires one.
//! Tapes are meant to be rebuilt for each training step.
//!
//! Every op also feeds a small set of resource counters (matmul
//! multiply-adds, elementwise work, live floats), bucketed by [`Scope`], so
//! the training loop can be profiled without a separate instrumented path.

use std::cell::{Cell, Ref, RefCell};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Accounting bucket for recorded ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Feature extraction from raw clip inputs.
    Encoder,
    /// Memory features handed to the head from outside the graph.
    Memory,
    /// Everything else: interaction blocks, classifier, loss.
    #[default]
    Head,
}

/// One counter per [`Scope`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeCounts {
    pub encoder: u64,
    pub memory: u64,
    pub head: u64,
}

impl ScopeCounts {
    pub fn get(&self, scope: Scope) -> u64 {
        match scope {
            Scope::Encoder => self.encoder,
            Scope::Memory => self.memory,
            Scope::Head => self.head,
        }
    }

    fn get_mut(&mut self, scope: Scope) -> &mut u64 {
        match scope {
            Scope::Encoder => &mut self.encoder,
            Scope::Memory => &mut self.memory,
            Scope::Head => &mut self.head,
        }
    }

    pub fn total(&self) -> u64 {
        self.encoder + self.memory + self.head
    }
}

/// Snapshot of a tape's resource counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeStats {
    /// Multiply-adds inside matrix products, forward and backward.
    pub macs: ScopeCounts,
    /// One unit per output element of every non-matmul op, forward and backward.
    pub elementwise: ScopeCounts,
    /// Peak number of simultaneously live floats attributed to each scope.
    pub peak_live: ScopeCounts,
    /// Peak of the sum over scopes.
    pub peak_live_total: u64,
}

#[derive(Debug, Default)]
struct Counters {
    stats: TapeStats,
    live: ScopeCounts,
}

impl Counters {
    fn alloc(&mut self, scope: Scope, n: usize) {
        let live = self.live.get_mut(scope);
        *live += n as u64;
        let v = *live;
        let peak = self.stats.peak_live.get_mut(scope);
        *peak = (*peak).max(v);
        self.stats.peak_live_total = self.stats.peak_live_total.max(self.live.total());
    }

    fn free(&mut self, scope: Scope, n: usize) {
        let live = self.live.get_mut(scope);
        *live = live.saturating_sub(n as u64);
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Mul,
    Relu,
    Scale(T),
    AddRow,
    MulRow,
    Softmax { mask: Vec<bool> },
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T> },
    Bce { targets: Vec<T> },
    Sum,
    ConcatRows { splits: Vec<usize> },
    SelectRows { indices: Vec<usize> },
    MaskRows { keep: Vec<bool> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    scope: Scope,
}

/// Records operations for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    counters: RefCell<Counters>,
    scope: Cell<Scope>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a loss with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (zeros if the loss does not depend on it)
    /// into `tensor`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![T::zero(); tensor.len()]),
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

// c[m,k] += a[m,n] * b[k,n]^T
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T], counters: &mut Counters, scope: Scope) {
    match dst {
        Some(d) => {
            for (a, &b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => {
            counters.alloc(scope, src.len());
            *dst = Some(src.to_vec());
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            counters: RefCell::new(Counters::default()),
            scope: Cell::new(Scope::Head),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scope(&self) -> Scope {
        self.scope.get()
    }

    /// Runs `f` with ops attributed to `scope`.
    pub fn with_scope<R>(&self, scope: Scope, f: impl FnOnce() -> R) -> R {
        let prev = self.scope.replace(scope);
        let out = f();
        self.scope.set(prev);
        out
    }

    pub fn stats(&self) -> TapeStats {
        self.counters.borrow().stats
    }

    fn count(&self, macs: usize, elementwise: usize) {
        let scope = self.scope.get();
        let mut c = self.counters.borrow_mut();
        *c.stats.macs.get_mut(scope) += macs as u64;
        *c.stats.elementwise.get_mut(scope) += elementwise as u64;
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: Vec<usize>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => parents.iter().any(|&p| nodes[p].requires_grad),
        };
        debug_assert!(parents.iter().all(|&p| p < nodes.len()));
        let scope = self.scope.get();
        self.counters.borrow_mut().alloc(scope, value.len());
        let id = nodes.len();
        nodes.push(Node {
            value: value.detached(),
            op,
            parents,
            requires_grad,
            scope,
        });
        Var(id)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        let mut v = t.detached();
        v.set_requires_grad(t.requires_grad());
        self.push(v, Op::Leaf, Vec::new())
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&self, t: &Tensor<T>) -> Var {
        let mut v = t.detached();
        v.set_requires_grad(true);
        self.push(v, Op::Leaf, Vec::new())
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, Vec::new())
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Smallest |input| seen by any ReLU on this tape; finite-difference
    /// checks are only meaningful when this exceeds the step size.
    pub fn min_relu_margin(&self) -> Option<T> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu))
            .flat_map(|n| nodes[n.parents[0]].value.data().iter().map(|x| x.abs()))
            .fold(None, |acc: Option<T>, x| Some(acc.map_or(x, |a| a.min(x))))
    }

    /// Smallest row scale `sqrt(var + eps)` seen by any layer norm. Central
    /// differences lose accuracy as `(step / scale)²`.
    pub fn min_layer_norm_scale(&self) -> Option<T> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::LayerNorm { inv_std, .. } => Some(inv_std.iter().map(|&s| T::one() / s)),
                _ => None,
            })
            .flatten()
            .fold(None, |acc: Option<T>, x| Some(acc.map_or(x, |a| a.min(x))))
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        t.expect_rank(op, 2)?;
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.nodes.borrow();
            gemm_nn(nodes[a.0].value.data(), nodes[b.0].value.data(), &mut out, m, k, n);
        }
        self.count(m * k * n, 0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul, vec![a.0, b.0]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2(a, "transpose")?;
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.data();
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x[i * n + j];
                }
            }
        }
        self.count(0, m * n);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose, vec![a.0]))
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(mismatch(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.count(0, out.len());
        Ok(self.push(out, Op::Add, vec![a.0, b.0]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.count(0, out.len());
        Ok(self.push(out, Op::Mul, vec![a.0, b.0]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|x| x.max(T::zero()));
        self.count(0, out.len());
        self.push(out, Op::Relu, vec![a.0])
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|x| x * s);
        self.count(0, out.len());
        self.push(out, Op::Scale(s), vec![a.0])
    }

    fn row_broadcast(&self, a: Var, r: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (m, n) = self.rank2(a, op)?;
        let nodes = self.nodes.borrow();
        let row = &nodes[r.0].value;
        if row.len() != n {
            return Err(mismatch(op, &[m, n], row.shape()));
        }
        let x = nodes[a.0].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(f(x[i * n + j], row.data()[j]));
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `a[i, :] + r` for every row `i`.
    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast(a, r, "add_row", |x, y| x + y)?;
        self.count(0, out.len());
        Ok(self.push(out, Op::AddRow, vec![a.0, r.0]))
    }

    /// `a[i, :] ⊙ r` for every row `i`.
    pub fn mul_row(&self, a: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast(a, r, "mul_row", |x, y| x * y)?;
        self.count(0, out.len());
        Ok(self.push(out, Op::MulRow, vec![a.0, r.0]))
    }

    /// Row-wise softmax over entries where `mask` is true. Masked entries are
    /// exactly zero and a row with no valid entry is all zero.
    pub fn softmax_rows(&self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.rank2(x, "softmax_rows")?;
        if mask.len() != m * n {
            return Err(mismatch("softmax_rows", &[m, n], &[mask.len()]));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.data();
            for i in 0..m {
                let row = &v[i * n..(i + 1) * n];
                let valid = &mask[i * n..(i + 1) * n];
                let Some(max) = row
                    .iter()
                    .zip(valid)
                    .filter(|(_, &ok)| ok)
                    .map(|(&x, _)| x)
                    .reduce(T::max)
                else {
                    continue;
                };
                let o = &mut out[i * n..(i + 1) * n];
                let mut total = T::zero();
                for j in 0..n {
                    if valid[j] {
                        o[j] = (row[j] - max).exp();
                        total += o[j];
                    }
                }
                for oj in o.iter_mut() {
                    *oj /= total;
                }
            }
        }
        self.count(0, 3 * m * n);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Softmax { mask: mask.to_vec() },
            vec![x.0],
        ))
    }

    /// Per-row standardization followed by the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm_rows(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.rank2(x, "layer_norm_rows")?;
        let mut out = vec![T::zero(); m * n];
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        {
            let nodes = self.nodes.borrow();
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if g.len() != n || b.len() != n {
                return Err(mismatch("layer_norm_rows", &[m, n], g.shape()));
            }
            let v = nodes[x.0].value.data();
            let nf = T::lit(n as f64);
            for i in 0..m {
                let row = &v[i * n..(i + 1) * n];
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[i] = inv;
                for j in 0..n {
                    let h = (row[j] - mean) * inv;
                    xhat[i * n + j] = h;
                    out[i * n + j] = g.data()[j] * h + b.data()[j];
                }
            }
        }
        self.count(0, 5 * m * n);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm { xhat, inv_std },
            vec![x.0, gamma.0, beta.0],
        ))
    }

    /// Mean sigmoid cross-entropy over all entries, computed from logits.
    pub fn bce_with_logits(&self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let loss = {
            let nodes = self.nodes.borrow();
            let x = &nodes[logits.0].value;
            if x.shape() != targets.shape() {
                return Err(mismatch("bce_with_logits", x.shape(), targets.shape()));
            }
            if let Some(bad) = targets
                .data()
                .iter()
                .find(|&&y| y != T::zero() && y != T::one())
            {
                return Err(Error::NonBinaryTarget(bad.to_f64_lossy()));
            }
            let count = x.len().max(1);
            let sum: T = x
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&z, &y)| bce_term(z, y))
                .sum();
            sum / T::lit(count as f64)
        };
        self.count(0, targets.len());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                targets: targets.data().to_vec(),
            },
            vec![logits.0],
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.data().iter().copied().sum();
        self.count(0, 1);
        self.push(Tensor::scalar(s), Op::Sum, vec![a.0])
    }

    /// Stacks rank-2 parts (rank-1 parts count as one row) along rows.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let (out, splits) = {
            let nodes = self.nodes.borrow();
            let cols = parts.first().map_or(0, |p| nodes[p.0].value.cols());
            let mut data = Vec::new();
            let mut splits = Vec::with_capacity(parts.len());
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                let r = if t.shape().len() == 1 { 1 } else { t.rows() };
                if t.shape().len() > 2 || t.cols() != cols {
                    return Err(mismatch("concat_rows", &[rows, cols], t.shape()));
                }
                data.extend_from_slice(t.data());
                rows += r;
                splits.push(t.len());
            }
            (Tensor::new(vec![rows, cols], data)?, splits)
        };
        self.count(0, out.len());
        Ok(self.push(
            out,
            Op::ConcatRows { splits },
            parts.iter().map(|p| p.0).collect(),
        ))
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.rank2(a, "select_rows")?;
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut data = Vec::with_capacity(indices.len() * n);
            for &i in indices {
                if i >= m {
                    return Err(mismatch("select_rows", &[m, n], &[i]));
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![indices.len(), n], data)?
        };
        self.count(0, out.len());
        Ok(self.push(
            out,
            Op::SelectRows {
                indices: indices.to_vec(),
            },
            vec![a.0],
        ))
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&self, a: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.rank2(a, "mask_rows")?;
        if keep.len() != m {
            return Err(mismatch("mask_rows", &[m, n], &[keep.len()]));
        }
        let mut out = self.nodes.borrow()[a.0].value.detached();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.data_mut()[i * n..(i + 1) * n].fill(T::zero());
            }
        }
        self.count(0, out.len());
        Ok(self.push(out, Op::MaskRows { keep: keep.to_vec() }, vec![a.0]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        let mut counters = self.counters.borrow_mut();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        counters.alloc(root.scope, 1);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                if let Some(g) = grads[i].take() {
                    counters.free(node.scope, g.len());
                }
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let (macs, elem) = backprop(node, &nodes, &g, &mut grads, &mut counters);
            *counters.stats.macs.get_mut(node.scope) += macs as u64;
            *counters.stats.elementwise.get_mut(node.scope) += elem as u64;
            counters.free(node.scope, g.len());
        }
        Ok(Gradients { grads })
    }
}

fn bce_term<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Propagates `g` (the gradient at `node`) into its parents' slots.
/// Returns (matmul multiply-adds, elementwise work).
fn backprop<T: Scalar>(
    node: &Node<T>,
    nodes: &[Node<T>],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    counters: &mut Counters,
) -> (usize, usize) {
    let wants = |p: usize| nodes[p].requires_grad;
    let mut emit = |p: usize, contrib: Vec<T>, grads: &mut [Option<Vec<T>>]| {
        add_into(&mut grads[p], &contrib, counters, nodes[p].scope);
    };
    let pv = |k: usize| &nodes[node.parents[k]].value;
    let mut macs = 0;
    let mut elem = 0;

    match &node.op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (pv(0), pv(1));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if wants(node.parents[0]) {
                let mut da = vec![T::zero(); m * k];
                gemm_nt(g, b.data(), &mut da, m, n, k);
                macs += m * n * k;
                emit(node.parents[0], da, grads);
            }
            if wants(node.parents[1]) {
                let mut db = vec![T::zero(); k * n];
                gemm_tn(a.data(), g, &mut db, m, k, n);
                macs += m * k * n;
                emit(node.parents[1], db, grads);
            }
        }
        Op::Transpose => {
            let (m, n) = (pv(0).shape()[0], pv(0).shape()[1]);
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    d[i * n + j] = g[j * m + i];
                }
            }
            elem += m * n;
            emit(node.parents[0], d, grads);
        }
        Op::Add => {
            for k in 0..2 {
                if wants(node.parents[k]) {
                    elem += g.len();
                    emit(node.parents[k], g.to_vec(), grads);
                }
            }
        }
        Op::Mul => {
            for k in 0..2 {
                if wants(node.parents[k]) {
                    let other = pv(1 - k).data();
                    elem += g.len();
                    emit(node.parents[k], g.iter().zip(other).map(|(&a, &b)| a * b).collect(), grads);
                }
            }
        }
        Op::Relu => {
            let x = pv(0).data();
            elem += g.len();
            let d = g
                .iter()
                .zip(x)
                .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                .collect();
            emit(node.parents[0], d, grads);
        }
        Op::Scale(s) => {
            elem += g.len();
            emit(node.parents[0], g.iter().map(|&x| x * *s).collect(), grads);
        }
        Op::AddRow | Op::MulRow => {
            let a = pv(0);
            let r = pv(1);
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let is_mul = matches!(node.op, Op::MulRow);
            if wants(node.parents[0]) {
                let d = (0..m * n)
                    .map(|idx| if is_mul { g[idx] * r.data()[idx % n] } else { g[idx] })
                    .collect();
                elem += m * n;
                emit(node.parents[0], d, grads);
            }
            if wants(node.parents[1]) {
                let mut d = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        let term = if is_mul { g[i * n + j] * a.data()[i * n + j] } else { g[i * n + j] };
                        d[j] += term;
                    }
                }
                elem += m * n;
                emit(node.parents[1], d, grads);
            }
        }
        Op::Softmax { mask } => {
            let y = node.value.data();
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                let dot: T = y[r.clone()].iter().zip(&g[r.clone()]).map(|(&a, &b)| a * b).sum();
                for j in r {
                    if mask[j] {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            elem += 2 * m * n;
            emit(node.parents[0], d, grads);
        }
        Op::LayerNorm { xhat, inv_std } => {
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            let gamma = pv(1).data();
            if wants(node.parents[0]) {
                let nf = T::lit(n as f64);
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dxhat: Vec<T> = (0..n).map(|j| g[i * n + j] * gamma[j]).collect();
                    let s1: T = dxhat.iter().copied().sum();
                    let s2: T = dxhat.iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        let h = xhat[i * n + j];
                        d[i * n + j] = inv_std[i] / nf * (nf * dxhat[j] - s1 - h * s2);
                    }
                }
                elem += 4 * m * n;
                emit(node.parents[0], d, grads);
            }
            if wants(node.parents[1]) {
                let mut d = vec![T::zero(); n];
                for i in 0..m * n {
                    d[i % n] += g[i] * xhat[i];
                }
                elem += m * n;
                emit(node.parents[1], d, grads);
            }
            if wants(node.parents[2]) {
                let mut d = vec![T::zero(); n];
                for i in 0..m * n {
                    d[i % n] += g[i];
                }
                elem += m * n;
                emit(node.parents[2], d, grads);
            }
        }
        Op::Bce { targets } => {
            let z = pv(0).data();
            let scale = g[0] / T::lit(z.len().max(1) as f64);
            let d = z
                .iter()
                .zip(targets)
                .map(|(&zi, &yi)| (sigmoid(zi) - yi) * scale)
                .collect();
            elem += z.len();
            emit(node.parents[0], d, grads);
        }
        Op::Sum => {
            let n = pv(0).len();
            elem += n;
            emit(node.parents[0], vec![g[0]; n], grads);
        }
        Op::ConcatRows { splits } => {
            let mut offset = 0;
            for (k, &len) in splits.iter().enumerate() {
                let p = node.parents[k];
                if wants(p) {
                    elem += len;
                    emit(p, g[offset..offset + len].to_vec(), grads);
                }
                offset += len;
            }
        }
        Op::SelectRows { indices } => {
            let src = pv(0);
            let n = src.cols();
            let mut d = vec![T::zero(); src.len()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..n {
                    d[i * n + j] += g[r * n + j];
                }
            }
            elem += g.len();
            emit(node.parents[0], d, grads);
        }
        Op::MaskRows { keep } => {
            let n = node.value.cols();
            let mut d = g.to_vec();
            for (i, &k) in keep.iter().enumerate() {
                if !k {
                    d[i * n..(i + 1) * n].fill(T::zero());
                }
            }
            elem += g.len();
            emit(node.parents[0], d, grads);
        }
    }
    (macs, elem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let x = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_column() {
        let tape = Tape::new();
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[0.0], &[1.0]]);
        let y = tape.matmul(tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
        assert_eq!(tape.value(y).data(), naive_matmul(&a, &b).as_slice());
        assert_eq!(tape.shape(y), vec![2, 1]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let tape = Tape::new();
        let b = Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap();
        let y = tape
            .matmul(tape.constant(Tensor::zeros(&[2, 3])), tape.constant(b))
            .unwrap();
        assert_eq!(tape.shape(y), vec![2, 4]);
        assert!(tape.value(y).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_handles_empty_rows() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[0, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), vec![0, 2]);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0, 0.0]]));
        let y = tape.value(tape.softmax_rows(x, &[true; 3]).unwrap());
        for &v in y.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let x = tape.constant(t(&[&[5.0, 9.0]]));
        let y = tape.value(tape.softmax_rows(x, &[true, false]).unwrap());
        assert_eq!(y.data(), &[1.0, 0.0]);

        let x = tape.constant(t(&[&[1.0, 2.0]]));
        let y = tape.value(tape.softmax_rows(x, &[true, true]).unwrap());
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(y.data()[0], 1.0 / (1.0 + e), epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], e / (1.0 + e), epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[0], 0.2689, epsilon = 1e-4);
    }

    #[test]
    fn softmax_all_masked_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = tape.value(tape.softmax_rows(x, &[false, false, true, true]).unwrap());
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert!((y.data()[2] + y.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[1000.0, 1001.0]]));
        let y = tape.value(tape.softmax_rows(x, &[true, true]).unwrap());
        assert!(y.is_finite());
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(tape.value(tape.relu(a)).data(), &[0.0, 0.0, 2.0]);
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(tape.value(tape.mul(x, y).unwrap()).data(), &[3.0, 8.0]);
        assert_eq!(tape.value(tape.scale(x, 0.0)).data(), &[0.0, 0.0]);
        let z = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(x, z).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::full(&[3], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[&[1.0, 1.0, 1.0]]));
        let y = tape.value(tape.layer_norm_rows(x, ones, zeros, 1e-5).unwrap());
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let ones = tape.constant(Tensor::full(&[2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[&[0.0, 2.0]]));
        let y = tape.value(tape.layer_norm_rows(x, ones, zeros, 1e-12).unwrap());
        assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-9);

        let g0 = tape.constant(Tensor::zeros(&[2]));
        let b7 = tape.constant(Tensor::full(&[2], 7.0));
        let y = tape.value(tape.layer_norm_rows(x, g0, b7, 1e-5).unwrap());
        assert_eq!(y.data(), &[7.0, 7.0]);
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::new();
        let ln2 = std::f64::consts::LN_2;
        let z = tape.constant(t(&[&[0.0]]));
        let l = tape.bce_with_logits(z, &t(&[&[1.0]])).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), ln2, epsilon = 1e-15);

        let z = tape.constant(t(&[&[1e9]]));
        let l = tape.bce_with_logits(z, &t(&[&[1.0]])).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 0.0, epsilon = 1e-12);

        let z = tape.constant(t(&[&[0.0, 0.0]]));
        let l = tape.bce_with_logits(z, &t(&[&[1.0, 0.0]])).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), ln2, epsilon = 1e-15);

        let z = tape.constant(t(&[&[0.0]]));
        assert!(matches!(
            tape.bce_with_logits(z, &t(&[&[0.5]])),
            Err(Error::NonBinaryTarget(_))
        ));
    }

    #[test]
    fn backward_square_sum() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_matmul_row_sums() {
        // d/dA sum(A·B) = 1·Bᵀ: every row of the gradient is the row sums of B.
        let tape = Tape::new();
        let a = tape.leaf(&t(&[&[0.3, -0.2], &[0.1, 0.5]]).with_grad());
        let bt = t(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.25]]);
        let b = tape.constant(bt);
        let loss = tape.sum(tape.matmul(a, b).unwrap());
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[6.0, -0.25, 6.0, -0.25]);
    }

    #[test]
    fn backward_constant_loss_gives_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let loss = tape.sum(tape.scale(x, 0.0));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0]);

        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        let mut tx = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        g.accumulate_into(x, &mut tx).unwrap();
        assert_eq!(tx.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn grads_accumulate_across_uses() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, -1.0]).unwrap().with_grad());
        let y = tape.add(x, x).unwrap();
        let y = tape.add(y, x).unwrap();
        let g = tape.backward(tape.sum(y)).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn topological_order_holds() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 2]).with_grad());
        let y = tape.matmul(x, x).unwrap();
        assert!(y.index() > x.index());
    }

    #[test]
    fn counters_track_matmul_work() {
        let tape = Tape::<f64>::new();
        let a = tape.with_scope(Scope::Encoder, || tape.param(&Tensor::zeros(&[2, 3])));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        let y = tape.with_scope(Scope::Encoder, || tape.matmul(a, b).unwrap());
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let s = tape.stats();
        // forward 2·3·4, backward only dA (B is constant)
        assert_eq!(s.macs.encoder, 48);
        assert_eq!(s.macs.head, 0);
        assert!(s.peak_live.encoder >= 6 + 8);
    }
}
