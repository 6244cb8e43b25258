use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, axis_split};
use super::{matmul_dims, Tensor};
use crate::error::{shape_mismatch, Error, Result};
use crate::real::Real;

/// Target id skipped by [`Tape::cross_entropy`] (not counted in the mean).
pub const IGNORE_TARGET: usize = usize::MAX;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Matmul(NodeId, NodeId, MatDims),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softmax { x: NodeId, axis: usize, scale: F },
    CausalSoftmax { x: NodeId, scale: F },
    Normalize { x: NodeId, inv_std: Vec<F> },
    AddTrailing(NodeId, NodeId),
    MulTrailing(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<F>, count: usize },
    Sum(NodeId),
    Mean(NodeId),
    MeanLast(NodeId),
    VarLast(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Append-only record of a computation.
///
/// Nodes are stored in creation order, which is a valid topological order:
/// every op's parents already exist when it is pushed. [`Tape::backward`]
/// walks the nodes once in reverse.
///
/// Gradients of leaves accumulate across `backward` calls until
/// [`Tape::zero_grad`] is called.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        NodeId(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<F>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> Rc<Tensor<F>> {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<F>> {
        self.nodes.borrow()[id.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, parents: &[NodeId]) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        NodeId(nodes.len() - 1)
    }

    // ---- elementwise ----

    fn zip_same(&self, op: &str, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_mismatch(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: NodeId, s: F) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&self, a: NodeId) -> NodeId {
        let v = self.value(a).map(kernels::gelu_scalar);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&self, a: NodeId) -> NodeId {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    // ---- shape ----

    pub fn reshape(&self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.value(a).permute(perm)?;
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self, a: NodeId) -> Result<NodeId> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Dimension(format!("transpose needs rank >= 2, got {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    /// `[B, T, H·d] -> [B, H, T, d]`.
    pub fn split_heads(&self, x: NodeId, heads: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Dimension(format!("split_heads expects [B,T,D], got {s:?}")));
        }
        if heads == 0 || s[2] % heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {heads} heads",
                s[2]
            )));
        }
        let r = self.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
        self.permute(r, &[0, 2, 1, 3])
    }

    /// `[B, H, T, d] -> [B, T, H·d]`, inverse of [`Tape::split_heads`].
    pub fn merge_heads(&self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::Dimension(format!("merge_heads expects [B,H,T,d], got {s:?}")));
        }
        let p = self.permute(x, &[0, 2, 1, 3])?;
        self.reshape(p, &[s[0], s[2], s[1] * s[3]])
    }

    pub fn concat(&self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_mismatch("concat", &base, &s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(out_shape, out)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    // ---- linear algebra ----

    /// Matrix product over the last two axes; leading axes must match exactly.
    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (batch, m, k, n) = matmul_dims(va.shape(), vb.shape())?;
        let v = va.matmul(&vb)?;
        Ok(self.push(v, Op::Matmul(a, b, MatDims { batch, m, k, n }), &[a, b]))
    }

    /// `x[.., k] · w[k, n] -> [.., n]`.
    pub fn linear(&self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(shape_mismatch("linear", &sx, &sw));
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, sw[0]])?;
        let y = self.matmul(flat, w)?;
        let mut out = sx[..sx.len() - 1].to_vec();
        out.push(sw[1]);
        self.reshape(y, &out)
    }

    // ---- normalization / attention ----

    pub fn softmax(&self, x: NodeId, axis: usize, scale: F) -> Result<NodeId> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::Dimension(format!("softmax axis {axis} out of range for {:?}", vx.shape())));
        }
        if !(scale > F::zero()) {
            return Err(Error::Usage(format!("softmax scale must be positive, got {scale}")));
        }
        let v = kernels::softmax(&vx, axis, scale);
        Ok(self.push(v, Op::Softmax { x, axis, scale }, &[x]))
    }

    /// Causally masked softmax over trailing `[T, T]` logits; see
    /// [`crate::tensor::causal_softmax`].
    pub fn causal_softmax(&self, x: NodeId, scale: F) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::Dimension(format!("causal softmax needs [..,T,T], got {s:?}")));
        }
        if !(scale > F::zero()) {
            return Err(Error::Usage(format!("softmax scale must be positive, got {scale}")));
        }
        let v = kernels::causal_softmax(&vx, scale);
        Ok(self.push(v, Op::CausalSoftmax { x, scale }, &[x]))
    }

    /// Zero-mean, unit-variance normalization of the last axis.
    pub fn normalize_last(&self, x: NodeId, eps: F) -> NodeId {
        let vx = self.value(x);
        let n = *vx.shape().last().expect("rank >= 1");
        let (out, inv_std) = kernels::normalize_rows(vx.data(), n, eps);
        let v = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::Normalize { x, inv_std }, &[x])
    }

    fn check_trailing(&self, op: &str, x: &[usize], p: &[usize]) -> Result<()> {
        if p.len() > x.len() || x[x.len() - p.len()..] != *p {
            return Err(shape_mismatch(op, x, p));
        }
        Ok(())
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`.
    pub fn add_trailing(&self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        self.check_trailing("add_trailing", vx.shape(), vb.shape())?;
        let n = vb.len();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + vb.data()[i % n]).collect();
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddTrailing(x, b), &[x, b]))
    }

    /// `x * w` where `w`'s shape equals the trailing axes of `x`.
    pub fn mul_trailing(&self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        self.check_trailing("mul_trailing", vx.shape(), vw.shape())?;
        let n = vw.len();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v * vw.data()[i % n]).collect();
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulTrailing(x, w), &[x, w]))
    }

    /// Multiplies every last-axis row of `x` by the matching entry of `s`,
    /// whose shape is `x`'s shape without the last axis.
    pub fn scale_rows(&self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (vx, vs) = (self.value(x), self.value(s));
        let sx = vx.shape();
        if vs.shape() != &sx[..sx.len() - 1] {
            return Err(shape_mismatch("scale_rows", sx, vs.shape()));
        }
        let n = sx[sx.len() - 1];
        let data = vx.data().iter().enumerate().map(|(i, &v)| v * vs.data()[i / n]).collect();
        let v = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(v, Op::ScaleRows(x, s), &[x, s]))
    }

    // ---- lookup / losses / reductions ----

    /// Gathers rows of `table` `[V, D]`; output shape is `ids_shape ++ [D]`.
    pub fn embedding(&self, table: NodeId, ids: &[usize], ids_shape: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let ts = vt.shape();
        if ts.len() != 2 {
            return Err(Error::Dimension(format!("embedding table must be [V, D], got {ts:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension(format!("{} ids do not fill shape {ids_shape:?}", ids.len())));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Data(format!("token id {id} out of range for vocabulary of {vocab}")));
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the last axis. Rows whose target is [`IGNORE_TARGET`] are skipped.
    pub fn cross_entropy(&self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let vocab = *vl.shape().last().expect("rank >= 1");
        let rows = vl.len() / vocab;
        if rows != targets.len() {
            return Err(Error::Data(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let mut probs = vec![F::zero(); vl.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, (&t, (src, p))) in targets
            .iter()
            .zip(vl.data().chunks(vocab).zip(probs.chunks_mut(vocab)))
            .enumerate()
        {
            if t == IGNORE_TARGET {
                continue;
            }
            if t >= vocab {
                return Err(Error::Data(format!("target id {t} at row {r} out of range [0, {vocab})")));
            }
            let max = src.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (pi, &s) in p.iter_mut().zip(src) {
                *pi = (s - max).exp();
                sum += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= sum;
            }
            total += (sum.ln() + max - src[t]).as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data("cross entropy over zero targets".into()));
        }
        let v = Tensor::scalar(F::lit(total / count as f64));
        Ok(self.push(
            v,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            &[logits],
        ))
    }

    pub fn sum(&self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let v = Tensor::scalar(vx.data().iter().copied().sum::<F>() / F::lit(vx.len() as f64));
        self.push(v, Op::Mean(x), &[x])
    }

    fn reduced_shape(s: &[usize]) -> Vec<usize> {
        if s.len() == 1 {
            vec![1]
        } else {
            s[..s.len() - 1].to_vec()
        }
    }

    pub fn mean_last(&self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let n = *vx.shape().last().expect("rank >= 1");
        let nf = F::lit(n as f64);
        let data = vx.data().chunks(n).map(|c| c.iter().copied().sum::<F>() / nf).collect();
        let v = Tensor::new(Self::reduced_shape(vx.shape()), data).expect("reduced");
        self.push(v, Op::MeanLast(x), &[x])
    }

    /// Biased (1/n) variance of the last axis.
    pub fn var_last(&self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let n = *vx.shape().last().expect("rank >= 1");
        let nf = F::lit(n as f64);
        let data = vx
            .data()
            .chunks(n)
            .map(|c| {
                let m = c.iter().copied().sum::<F>() / nf;
                c.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / nf
            })
            .collect();
        let v = Tensor::new(Self::reduced_shape(vx.shape()), data).expect("reduced");
        self.push(v, Op::VarLast(x), &[x])
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every leaf that requires a gradient and is reachable from `loss`
    /// receives `d loss / d leaf`, added to whatever it already holds.
    pub fn backward(&self, loss: NodeId) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let nodes_ref: &Vec<Node<F>> = &nodes;
            let mut emit = |p: NodeId, pg: Tensor<F>| {
                if !nodes_ref[p.0].requires_grad {
                    return;
                }
                debug_assert_eq!(pg.shape(), nodes_ref[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            };
            backprop(nodes_ref, id, &g, &mut emit);
        }
        Ok(())
    }
}

fn map2<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn backprop<F: Real>(
    nodes: &[Node<F>],
    id: usize,
    g: &Tensor<F>,
    emit: &mut impl FnMut(NodeId, Tensor<F>),
) {
    let val = |p: NodeId| -> &Tensor<F> { &nodes[p.0].value };
    let wants = |p: NodeId| nodes[p.0].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(*a, g.clone());
            emit(*b, g.clone());
        }
        Op::Sub(a, b) => {
            emit(*a, g.clone());
            emit(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                emit(*a, map2(g, val(*b), |x, y| x * y));
            }
            if wants(*b) {
                emit(*b, map2(g, val(*a), |x, y| x * y));
            }
        }
        Op::Scale(a, s) => emit(*a, g.map(|v| v * *s)),
        Op::Matmul(a, b, d) => {
            let MatDims { batch, m, k, n } = *d;
            if wants(*a) {
                let mut ga = Tensor::zeros(val(*a).shape());
                kernels::batched_matmul(g.data(), false, val(*b).data(), true, ga.data_mut(), batch, m, n, k, F::zero());
                emit(*a, ga);
            }
            if wants(*b) {
                let mut gb = Tensor::zeros(val(*b).shape());
                kernels::batched_matmul(val(*a).data(), true, g.data(), false, gb.data_mut(), batch, k, m, n, F::zero());
                emit(*b, gb);
            }
        }
        Op::Reshape(a) => emit(*a, g.reshape(val(*a).shape()).expect("reshape back")),
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            emit(*a, kernels::permute(g, &inv));
        }
        Op::Gelu(a) => emit(*a, map2(g, val(*a), |gv, x| gv * kernels::gelu_grad(x))),
        Op::Sigmoid(a) => emit(*a, map2(g, out, |gv, y| gv * y * (F::one() - y))),
        Op::Softmax { x, axis, scale } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let mut gx = Tensor::zeros(out.shape());
            let (y, gd, dst) = (out.data(), g.data(), gx.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: F = (0..len).map(|j| y[base + j * inner] * gd[base + j * inner]).sum();
                    for j in 0..len {
                        let at = base + j * inner;
                        dst[at] = *scale * y[at] * (gd[at] - dot);
                    }
                }
            }
            emit(*x, gx);
        }
        Op::CausalSoftmax { x, scale } => {
            let t = *out.shape().last().expect("rank");
            let mut gx = Tensor::zeros(out.shape());
            for ((y, gd), dst) in out.data().chunks(t).zip(g.data().chunks(t)).zip(gx.data_mut().chunks_mut(t)) {
                let dot: F = y.iter().zip(gd).map(|(&a, &b)| a * b).sum();
                for j in 0..t {
                    dst[j] = *scale * y[j] * (gd[j] - dot);
                }
            }
            emit(*x, gx);
        }
        Op::Normalize { x, inv_std } => {
            let n = *out.shape().last().expect("rank");
            let nf = F::lit(n as f64);
            let mut gx = Tensor::zeros(out.shape());
            for (((xh, gd), dst), &is) in out
                .data()
                .chunks(n)
                .zip(g.data().chunks(n))
                .zip(gx.data_mut().chunks_mut(n))
                .zip(inv_std)
            {
                let mg = gd.iter().copied().sum::<F>() / nf;
                let mgx = gd.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / nf;
                for j in 0..n {
                    dst[j] = is * (gd[j] - mg - xh[j] * mgx);
                }
            }
            emit(*x, gx);
        }
        Op::AddTrailing(x, b) => {
            emit(*x, g.clone());
            if wants(*b) {
                let mut gb = Tensor::zeros(val(*b).shape());
                let n = gb.len();
                for (i, &v) in g.data().iter().enumerate() {
                    gb.data_mut()[i % n] += v;
                }
                emit(*b, gb);
            }
        }
        Op::MulTrailing(x, w) => {
            let vw = val(*w);
            let n = vw.len();
            if wants(*x) {
                let data = g.data().iter().enumerate().map(|(i, &v)| v * vw.data()[i % n]).collect();
                emit(*x, Tensor::new(g.shape().to_vec(), data).expect("same"));
            }
            if wants(*w) {
                let mut gw = Tensor::zeros(vw.shape());
                for (i, (&gv, &xv)) in g.data().iter().zip(val(*x).data()).enumerate() {
                    gw.data_mut()[i % n] += gv * xv;
                }
                emit(*w, gw);
            }
        }
        Op::ScaleRows(x, s) => {
            let vs = val(*s);
            let n = *g.shape().last().expect("rank");
            if wants(*x) {
                let data = g.data().iter().enumerate().map(|(i, &v)| v * vs.data()[i / n]).collect();
                emit(*x, Tensor::new(g.shape().to_vec(), data).expect("same"));
            }
            if wants(*s) {
                let data = g
                    .data()
                    .chunks(n)
                    .zip(val(*x).data().chunks(n))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                    .collect();
                emit(*s, Tensor::new(vs.shape().to_vec(), data).expect("same"));
            }
        }
        Op::Embedding { table, ids } => {
            let ts = val(*table).shape();
            let d = ts[1];
            let mut gt = Tensor::zeros(ts);
            for (row, &id) in g.data().chunks(d).zip(ids) {
                for (a, &b) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(row) {
                    *a += b;
                }
            }
            emit(*table, gt);
        }
        Op::CrossEntropy { logits, targets, probs, count } => {
            let vocab = *val(*logits).shape().last().expect("rank");
            let coef = g.item() / F::lit(*count as f64);
            let mut gl = Tensor::zeros(val(*logits).shape());
            for ((dst, p), &t) in gl.data_mut().chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                if t == IGNORE_TARGET {
                    continue;
                }
                for (d, &pv) in dst.iter_mut().zip(p) {
                    *d = coef * pv;
                }
                dst[t] -= coef;
            }
            emit(*logits, gl);
        }
        Op::Sum(x) => emit(*x, Tensor::full(val(*x).shape(), g.item())),
        Op::Mean(x) => {
            let vx = val(*x);
            emit(*x, Tensor::full(vx.shape(), g.item() / F::lit(vx.len() as f64)));
        }
        Op::MeanLast(x) => {
            let vx = val(*x);
            let n = *vx.shape().last().expect("rank");
            let nf = F::lit(n as f64);
            let data = (0..vx.len()).map(|i| g.data()[i / n] / nf).collect();
            emit(*x, Tensor::new(vx.shape().to_vec(), data).expect("same"));
        }
        Op::VarLast(x) => {
            let vx = val(*x);
            let n = *vx.shape().last().expect("rank");
            let nf = F::lit(n as f64);
            let two = F::lit(2.0);
            let mut data = Vec::with_capacity(vx.len());
            for (r, row) in vx.data().chunks(n).enumerate() {
                let m = row.iter().copied().sum::<F>() / nf;
                data.extend(row.iter().map(|&v| g.data()[r] * two * (v - m) / nf));
            }
            emit(*x, Tensor::new(vx.shape().to_vec(), data).expect("same"));
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let vp = val(p);
                let chunk = vp.shape()[*axis] * inner;
                if wants(p) {
                    let mut data = Vec::with_capacity(vp.len());
                    for o in 0..outer {
                        let start = o * total + offset;
                        data.extend_from_slice(&g.data()[start..start + chunk]);
                    }
                    emit(p, Tensor::new(vp.shape().to_vec(), data).expect("same"));
                }
                offset += chunk;
            }
        }
    }
}
