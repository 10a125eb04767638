use std::sync::Arc;

use super::kernels;
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch pairing of a broadcast matmul: output matrix `i` multiplies matrix
/// `pairs[i].0` of the left operand with matrix `pairs[i].1` of the right.
#[derive(Debug, Clone)]
struct BatchPlan {
    pairs: Vec<(usize, usize)>,
    m: usize,
    k: usize,
    n: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var, BatchPlan),
    MatmulNt(Var, Var, BatchPlan),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatLast(Var, Var),
    ConcatRows(Var, Var),
    IndexRows {
        src: Var,
        idx: Vec<usize>,
    },
    WhereRows {
        on: Var,
        off: Var,
        mask: Vec<bool>,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    MeanAxis {
        src: Var,
        axis: usize,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
        row_mask: Vec<bool>,
        count: usize,
    },
    Dropout(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamically recorded computation graph with reverse-mode gradients.
///
/// Values are computed eagerly when an op is recorded. [`Tape::backward`]
/// walks the nodes in reverse recording order and accumulates gradients into
/// every node that requires them; a node consumed several times receives the
/// sum of its per-use gradients.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::DimMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Broadcast batch shape and, per output batch index, the source indices.
type Broadcast = (Vec<usize>, Vec<(usize, usize)>);

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return None;
        }
    }
    let total = numel(&out);
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut oa, mut ob) = (0, 0);
        for d in 0..rank {
            oa = oa * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            ob = ob * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((oa, ob));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, pairs))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Gradient of `v` after [`Tape::backward`]. Tracked nodes that the loss
    /// does not depend on report a zero gradient; untracked nodes report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            self.grads
                .get(v.0)
                .and_then(Option::clone)
                .unwrap_or_else(|| Tensor::zeros(self.shape(v))),
        )
    }

    fn plan(&self, op: &'static str, a: Var, b: Var, transposed_b: bool) -> Result<(Vec<usize>, BatchPlan)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err(op, sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if transposed_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(dim_err(op, sa, sb));
        }
        let (mut out, pairs) =
            broadcast_batch(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(|| dim_err(op, sa, sb))?;
        out.push(m);
        out.push(n);
        Ok((out, BatchPlan { pairs, m, k, n }))
    }

    /// Matrix product over the last two axes with broadcast leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, plan) = self.plan("matmul", a, b, false)?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); numel(&shape)];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (i, &(ia, ib)) in plan.pairs.iter().enumerate() {
                kernels::matmul_acc(
                    &av[ia * m * k..(ia + 1) * m * k],
                    &bv[ib * k * n..(ib + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Matmul(a, b, plan), rg))
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, plan) = self.plan("matmul_nt", a, b, true)?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); numel(&shape)];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (i, &(ia, ib)) in plan.pairs.iter().enumerate() {
                kernels::matmul_nt_acc(
                    &av[ia * m * k..(ia + 1) * m * k],
                    &bv[ib * n * k..(ib + 1) * n * k],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatmulNt(a, b, plan), rg))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err("add", sa, sb));
        }
        let bv = self.value(b).data();
        let bn = bv.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % bn])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Softmax over the last axis. `allowed`, when given, has one flag per
    /// element; disallowed entries get probability exactly zero.
    pub fn softmax_last(&mut self, a: Var, allowed: Option<Arc<[bool]>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = &allowed {
            if m.len() != x.numel() {
                return Err(Error::Shape(format!(
                    "softmax mask has {} entries for {} values",
                    m.len(),
                    x.numel()
                )));
            }
        }
        let d = x.last_dim();
        if d == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..x.rows() {
            let mask = allowed.as_ref().map(|m| &m[r * d..(r + 1) * d]);
            kernels::softmax_row(x.row(r), mask, &mut out[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..x.rows() {
            kernels::log_softmax_row(x.row(r), &mut out[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Layer normalization over the last axis followed by `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            rstd.push(kernels::normalize_row(xv.row(r), T::lit(eps), &mut xhat[r * d..(r + 1) * d]));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Gathers rows of `table` (`[V, d]`); the result has shape `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("embedding table must be rank 2, got {:?}", t.shape())));
        }
        if numel(ids_shape) != ids.len() {
            return Err(Error::Shape("embedding ids do not match their shape".into()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err("concat_last", sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let (da, db) = (va.last_dim(), vb.last_dim());
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..va.rows() {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatLast(a, b), rg))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(dim_err("concat_rows", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    /// Selects slices along the first axis (indices may repeat).
    pub fn index_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(src);
        if s.rank() == 0 {
            return Err(Error::Shape("index_rows on a rank-0 tensor".into()));
        }
        let n = s.shape()[0];
        let stride = s.numel() / n.max(1);
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    op: "index_rows",
                    index: i,
                    size: n,
                });
            }
            out.extend_from_slice(&s.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = s.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[src]);
        Ok(self.push(
            value,
            Op::IndexRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise select: row `r` (over the last axis) comes from `on` when
    /// `mask[r]`, otherwise from `off`.
    pub fn where_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        self.same_shape("where_rows", on, off)?;
        let (a, b) = (self.value(on), self.value(off));
        if mask.len() != a.rows() {
            return Err(Error::Shape(format!("where_rows mask has {} rows, tensor has {}", mask.len(), a.rows())));
        }
        let mut out = Vec::with_capacity(a.numel());
        for (r, &m) in mask.iter().enumerate() {
            out.extend_from_slice(if m { a.row(r) } else { b.row(r) });
        }
        let value = Tensor::new(a.shape().to_vec(), out)?;
        let rg = self.rg(&[on, off]);
        Ok(self.push(
            value,
            Op::WhereRows {
                on,
                off,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(a).data(), shape, perm);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, src: Var, axis: usize) -> Result<Var> {
        let s = self.value(src);
        if axis >= s.rank() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", s.shape())));
        }
        let dim = s.shape()[axis];
        if dim == 0 {
            return Err(Error::EmptyReduction("mean_axis"));
        }
        let pre: usize = s.shape()[..axis].iter().product();
        let post: usize = s.shape()[axis + 1..].iter().product();
        let mut out = vec![T::zero(); pre * post];
        let inv = T::one() / T::lit(dim as f64);
        for p in 0..pre {
            for a in 0..dim {
                let base = (p * dim + a) * post;
                for q in 0..post {
                    out[p * post + q] += s.data()[base + q];
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= inv);
        let mut shape = s.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::MeanAxis { src, axis }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean token cross-entropy over the rows of `logits` whose mask is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let l = self.value(logits);
        let (rows, v) = (l.rows(), l.last_dim());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {rows} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyReduction("cross_entropy"));
        }
        let mut probs = vec![T::zero(); l.numel()];
        let mut logp = vec![T::zero(); v];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: targets[r],
                    size: v,
                });
            }
            kernels::log_softmax_row(l.row(r), &mut logp);
            total -= logp[targets[r]];
            for (p, &lp) in probs[r * v..(r + 1) * v].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean squared error over every scalar of the unmasked rows of `pred`.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>, row_mask: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(dim_err("mse", p.shape(), target.shape()));
        }
        if row_mask.len() != p.rows() {
            return Err(Error::Shape("mse mask does not match rows".into()));
        }
        let d = p.last_dim();
        let count = row_mask.iter().filter(|&&m| m).count() * d;
        if count == 0 {
            return Err(Error::EmptyReduction("mse"));
        }
        let mut total = T::zero();
        for (r, _) in row_mask.iter().enumerate().filter(|(_, &m)| m) {
            for (&a, &b) in p.row(r).iter().zip(target.row(r)) {
                total += (a - b) * (a - b);
            }
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        let rg = self.rg(&[pred]);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target,
                row_mask: row_mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Inverted dropout with a precomputed keep mask (`true` = keep).
    pub fn dropout(&mut self, a: Var, keep: &[bool], p: f64) -> Result<Var> {
        if keep.len() != self.value(a).numel() {
            return Err(Error::Shape("dropout mask size".into()));
        }
        let s = T::lit(1.0 / (1.0 - p));
        let mult: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let data = self.value(a).data().iter().zip(&mult).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Dropout(a, mult), rg))
    }

    /// Reverse pass from a single-element `loss`. Gradients of earlier
    /// backward passes are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop(i, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b, plan) => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |da| {
                    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        kernels::matmul_nt_acc(
                            &gd[o * m * n..(o + 1) * m * n],
                            &bv[ib * k * n..(ib + 1) * k * n],
                            &mut da[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc_with(grads, *b, |db| {
                    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        kernels::matmul_tn_acc(
                            &av[ia * m * k..(ia + 1) * m * k],
                            &gd[o * m * n..(o + 1) * m * n],
                            &mut db[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::MatmulNt(a, b, plan) => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                self.acc_with(grads, *a, |da| {
                    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        kernels::matmul_acc(
                            &gd[o * m * n..(o + 1) * m * n],
                            &bv[ib * n * k..(ib + 1) * n * k],
                            &mut da[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc_with(grads, *b, |db| {
                    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        kernels::matmul_tn_acc(
                            &gd[o * m * n..(o + 1) * m * n],
                            &av[ia * m * k..(ia + 1) * m * k],
                            &mut db[ib * n * k..(ib + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                let bn = self.value(*b).numel();
                self.acc_with(grads, *b, |db| {
                    for (j, &x) in gd.iter().enumerate() {
                        db[j % bn] += x;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_fn(g.shape(), |j| gd[j] * bv.data()[j]);
                let gb = Tensor::from_fn(g.shape(), |j| gd[j] * av.data()[j]);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * *c)),
            Op::Softmax(a) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut out = vec![T::zero(); y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), &gd[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        out[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), out).unwrap());
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut out = vec![T::zero(); y.numel()];
                for r in 0..y.rows() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let gsum: T = gr.iter().copied().sum();
                    for j in 0..d {
                        out[r * d + j] = gr[j] - y.row(r)[j].exp() * gsum;
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), out).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let rows = node.value.rows();
                let gam = self.value(*gamma).data();
                self.acc_with(grads, *gamma, |dg| {
                    for (j, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                        dg[j % d] += gv * h;
                    }
                });
                self.acc_with(grads, *beta, |db| {
                    for (j, &gv) in gd.iter().enumerate() {
                        db[j % d] += gv;
                    }
                });
                self.acc_with(grads, *x, |dx| {
                    let nd = T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &rs) in rstd.iter().enumerate().take(rows) {
                        let base = r * d;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gd[base + j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[base + j];
                        }
                        let (m1, m2) = (s1 / nd, s2 / nd);
                        for j in 0..d {
                            dx[base + j] += rs * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let out = Tensor::from_fn(x.shape(), |j| gd[j] * kernels::gelu_grad(x.data()[j]));
                self.acc(grads, *a, out);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                self.acc_with(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += gd[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let (da, db) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = node.value.rows();
                let mut ga = Vec::with_capacity(rows * da);
                let mut gb = Vec::with_capacity(rows * db);
                for r in 0..rows {
                    let row = &gd[r * (da + db)..(r + 1) * (da + db)];
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga).unwrap());
                self.acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb).unwrap());
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), gd[..na].to_vec()).unwrap());
                self.acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), gd[na..].to_vec()).unwrap());
            }
            Op::IndexRows { src, idx } => {
                let n = self.shape(*src)[0];
                let stride = self.value(*src).numel() / n.max(1);
                self.acc_with(grads, *src, |ds| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..stride {
                            ds[i * stride + j] += gd[r * stride + j];
                        }
                    }
                });
            }
            Op::WhereRows { on, off, mask } => {
                let d = node.value.last_dim();
                let pick = |want: bool| {
                    let mut out = vec![T::zero(); gd.len()];
                    for (r, &m) in mask.iter().enumerate() {
                        if m == want {
                            out[r * d..(r + 1) * d].copy_from_slice(&gd[r * d..(r + 1) * d]);
                        }
                    }
                    Tensor::new(node.value.shape().to_vec(), out).unwrap()
                };
                self.acc(grads, *on, pick(true));
                self.acc(grads, *off, pick(false));
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (shape, data) = permute_data(gd, g.shape(), &inv);
                self.acc(grads, *a, Tensor::new(shape, data).unwrap());
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.shape(*a)).unwrap();
                self.acc(grads, *a, t);
            }
            Op::MeanAxis { src, axis } => {
                let s = self.shape(*src);
                let dim = s[*axis];
                let post: usize = s[axis + 1..].iter().product();
                let inv = T::one() / T::lit(dim as f64);
                let out = Tensor::from_fn(s, |j| {
                    let p = j / (dim * post);
                    let q = j % post;
                    gd[p * post + q] * inv
                });
                self.acc(grads, *src, out);
            }
            Op::SumAll(a) => {
                let out = Tensor::full(self.shape(*a), gd[0]);
                self.acc(grads, *a, out);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = gd[0] / T::lit(*count as f64);
                self.acc_with(grads, *logits, |dl| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            dl[r * v + j] += (probs[r * v + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::Mse {
                pred,
                target,
                row_mask,
                count,
            } => {
                let p = self.value(*pred);
                let d = p.last_dim();
                let scale = T::lit(2.0) * gd[0] / T::lit(*count as f64);
                self.acc_with(grads, *pred, |dp| {
                    for (r, &m) in row_mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..d {
                            dp[r * d + j] += (p.data()[r * d + j] - target.data()[r * d + j]) * scale;
                        }
                    }
                });
            }
            Op::Dropout(a, mult) => {
                let out = Tensor::from_fn(g.shape(), |j| gd[j] * mult[j]);
                self.acc(grads, *a, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_batch_axes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 1, 2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[3, 3, 1], |i| i as f64));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2, 1]);
        // batch (1, 2): a[1] rows [6,7,8],[9,10,11] times b[2] = [6,7,8]
        let v = tape.value(c);
        assert_eq!(v.at(&[1, 2, 0, 0]), 6. * 6. + 7. * 7. + 8. * 8.);
    }

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_b_transposed() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let b = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c);
        tape.backward(s).unwrap();
        // ones[2,2] · bᵀ: each row = row sums of b
        assert_eq!(tape.grad(a).unwrap().data(), &[3., 7., 11., 3., 7., 11.]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax_last(x, None).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000., 0.]));
        let y = tape.softmax_last(x, None).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let mask: Arc<[bool]> = vec![true, false, true, false, false, false].into();
        let y = tape.softmax_last(x, Some(mask)).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gelu_and_layer_norm_definitions() {
        assert_eq!(kernels::gelu(0.0f64), 0.0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[2.5; 4]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[3, 50]));
        let ce = tape.cross_entropy(l, &[0, 17, 49], &[true, true, false]).unwrap();
        assert!((tape.value(ce).item() - 50f64.ln()).abs() < 1e-12);
        let err = tape.cross_entropy(l, &[0, 0, 0], &[false; 3]).unwrap_err();
        assert!(matches!(err, Error::EmptyReduction(_)));
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let p = tape.leaf(x.clone());
        let l = tape.mse(p, x, &[true, true]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn shared_use_accumulates() {
        // y = sum(x ⊙ x) uses x twice; dy/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 3.]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., -4., 6.]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let unused = tape.leaf(t(&[3], &[1., 2., 3.]));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0., 0., 0.]);
        let c = tape.constant(t(&[1], &[0.]));
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        assert_eq!(tape.value(y).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }
}
