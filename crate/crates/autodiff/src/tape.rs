use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::gemm::gemm;
use crate::grad::{GradientMap, Param, ParamId};
use crate::kernels;
use crate::tensor::Tensor;

/// Recorded operation together with whatever its backward rule needs.
pub(crate) enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, tb: bool },
    BatchMatMul { a: usize, b: usize, tb: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: S },
    AddScalar { a: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sqrt { a: usize },
    Clamp { a: usize, lo: S, hi: S },
    Softmax { a: usize },
    LayerNorm { a: usize, rstd: Vec<S> },
    Transpose { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    SelectRows { a: usize, rows: Vec<usize> },
    SelectCols { a: usize, cols: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
    Frobenius { a: usize },
    Trace { a: usize },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
}

impl<S> Op<S> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } => vec![*a, *b],
            Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } => vec![*a, *b],
            Scale { a, .. }
            | AddScalar { a }
            | Sigmoid { a }
            | Relu { a }
            | Gelu { a }
            | Exp { a }
            | Log { a }
            | Sqrt { a }
            | Clamp { a, .. }
            | Softmax { a, .. }
            | LayerNorm { a, .. }
            | Transpose { a }
            | Permute { a, .. }
            | Reshape { a }
            | SelectRows { a, .. }
            | SelectCols { a, .. }
            | Sum { a }
            | Mean { a }
            | Frobenius { a }
            | Trace { a } => vec![*a],
            Concat { parts, .. } => parts.clone(),
            GatherRows { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) param: Option<ParamId>,
    pub(crate) needs_grad: bool,
}

/// Define-by-run recording of one forward pass.
///
/// Build a fresh tape per step; values live on the tape and are addressed
/// through [`Var`] handles.
pub struct Tape<S> {
    pub(crate) nodes: RefCell<Vec<Node<S>>>,
    record: bool,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    pub(crate) tape: &'t Tape<S>,
    pub(crate) idx: usize,
}

impl<S> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.idx)
    }
}

impl<S: Float> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Float> Tape<S> {
    /// A tape that records operations for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape for evaluation only: values are computed, nothing is recorded.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(value, None, false)
    }

    /// Places a parameter on the tape. Gradients flow to it only when
    /// `requires_grad` is set and the tape records.
    pub fn param(&self, p: &Param<S>) -> Var<'_, S> {
        let track = p.requires_grad && self.record;
        self.push_leaf(p.value.clone(), track.then_some(p.id), track)
    }

    pub fn scalar(&self, v: S) -> Var<'_, S> {
        self.constant(Tensor::scalar(v))
    }

    fn push_leaf(&self, value: Tensor<S>, param: Option<ParamId>, needs_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            param,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor<S>, op: Op<S>, name: &'static str) -> Result<Var<'_, S>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.record && op.parents().iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            op: if needs_grad { op } else { Op::Leaf },
            param: None,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            idx: nodes.len() - 1,
        })
    }

    pub(crate) fn value_ref(&self, idx: usize) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every parameter placed on this tape with `requires_grad` receives an
    /// entry; parameters the loss does not depend on get zeros. The tape is
    /// left intact, so several losses built on one tape can be differentiated
    /// separately.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<GradientMap<S>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract("loss belongs to another tape".into()));
        }
        if !self.record {
            return Err(TensorError::Contract("backward on a no-grad tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(vec![S::one()]);
        let mut out = GradientMap::new();

        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            if let Some(id) = node.param {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![S::zero(); node.value.numel()]);
                out.accumulate(id, Tensor::new(node.value.shape().to_vec(), g)?)?;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            backprop(&nodes, idx, &g, &mut grads)?;
        }
        for node in &nodes[loss.idx + 1..] {
            if let Some(id) = node.param {
                out.accumulate(id, Tensor::zeros(node.value.shape().to_vec()))?;
            }
        }
        Ok(out)
    }
}

fn add_into<S: Float>(grads: &mut [Option<Vec<S>>], idx: usize, contrib: Vec<S>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn add_into_with<S: Float>(
    grads: &mut [Option<Vec<S>>],
    idx: usize,
    len: usize,
    f: impl FnOnce(&mut [S]),
) {
    let slot = grads[idx].get_or_insert_with(|| vec![S::zero(); len]);
    f(slot);
}

/// Sums a broadcast operand's gradient back over its repeated leading block.
fn reduce_broadcast<S: Float>(g: &[S], inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); inner];
    if inner == 0 {
        return out;
    }
    for chunk in g.chunks(inner) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += *x;
        }
    }
    out
}

fn backprop<S: Float>(
    nodes: &[Node<S>],
    idx: usize,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) -> Result<()> {
    let node = &nodes[idx];
    let want = |p: usize| nodes[p].needs_grad;
    let val = |p: usize| &nodes[p].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let k = av.cols();
            let m = av.numel() / k.max(1);
            let n = node.value.cols();
            if want(*a) {
                add_into_with(grads, *a, av.numel(), |da| {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bv.data(), !*tb, da, true);
                });
            }
            if want(*b) {
                add_into_with(grads, *b, bv.numel(), |db| {
                    if *tb {
                        gemm(n, m, k, g, true, av.data(), false, db, true);
                    } else {
                        gemm(k, m, n, av.data(), true, g, false, db, true);
                    }
                });
            }
        }
        Op::BatchMatMul { a, b, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = node.value.shape()[2];
            if want(*a) {
                add_into_with(grads, *a, av.numel(), |da| {
                    for i in 0..bt {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !*tb,
                            &mut da[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
            }
            if want(*b) {
                add_into_with(grads, *b, bv.numel(), |db| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dbi, true);
                        }
                    }
                });
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let neg = matches!(node.op, Op::Sub { .. });
            if want(*a) {
                add_into(grads, *a, g.to_vec());
            }
            if want(*b) {
                let mut gb = reduce_broadcast(g, val(*b).numel());
                if neg {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                add_into(grads, *b, gb);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let nb = bv.numel();
            if want(*a) {
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * bv.data()[i % nb])
                    .collect();
                add_into(grads, *a, ga);
            }
            if want(*b) {
                let prod: Vec<S> = g.iter().zip(av.data()).map(|(&gi, &x)| gi * x).collect();
                add_into(grads, *b, reduce_broadcast(&prod, nb));
            }
        }
        Op::Div { a, b } => {
            let bv = val(*b);
            let nb = bv.numel();
            if want(*a) {
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi / bv.data()[i % nb])
                    .collect();
                add_into(grads, *a, ga);
            }
            if want(*b) {
                // d(a/b)/db = -(a/b)/b
                let prod: Vec<S> = g
                    .iter()
                    .zip(node.value.data())
                    .enumerate()
                    .map(|(i, (&gi, &c))| -gi * c / bv.data()[i % nb])
                    .collect();
                add_into(grads, *b, reduce_broadcast(&prod, nb));
            }
        }
        Op::Scale { a, c } => {
            add_into(grads, *a, g.iter().map(|&x| x * *c).collect());
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            add_into(grads, *a, g.to_vec());
        }
        Op::Sigmoid { a } => {
            let y = node.value.data();
            add_into(
                grads,
                *a,
                g.iter()
                    .zip(y)
                    .map(|(&gi, &s)| gi * s * (S::one() - s))
                    .collect(),
            );
        }
        Op::Relu { a } => {
            let x = val(*a).data();
            add_into(
                grads,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
                    .collect(),
            );
        }
        Op::Gelu { a } => {
            let x = val(*a).data();
            add_into(
                grads,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * kernels::gelu_grad(xi))
                    .collect(),
            );
        }
        Op::Exp { a } => {
            let y = node.value.data();
            add_into(grads, *a, g.iter().zip(y).map(|(&gi, &e)| gi * e).collect());
        }
        Op::Log { a } => {
            let x = val(*a).data();
            add_into(grads, *a, g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect());
        }
        Op::Sqrt { a } => {
            let y = node.value.data();
            let half = S::lit(0.5);
            add_into(
                grads,
                *a,
                g.iter()
                    .zip(y)
                    .map(|(&gi, &r)| if r > S::zero() { gi * half / r } else { S::zero() })
                    .collect(),
            );
        }
        Op::Clamp { a, lo, hi } => {
            let x = val(*a).data();
            add_into(
                grads,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > *lo && xi < *hi { gi } else { S::zero() })
                    .collect(),
            );
        }
        Op::Softmax { a, .. } => {
            let y = node.value.data();
            let cols = node.value.cols();
            let mut ga = vec![S::zero(); y.len()];
            for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            add_into(grads, *a, ga);
        }
        Op::LayerNorm { a, rstd } => {
            let y = node.value.data();
            let d = node.value.cols();
            let inv_d = S::one() / S::lit(d as f64);
            let mut ga = vec![S::zero(); y.len()];
            for (row, ((gr, yr), out)) in g
                .chunks(d)
                .zip(y.chunks(d))
                .zip(ga.chunks_mut(d))
                .enumerate()
            {
                let mean_g: S = gr.iter().copied().sum::<S>() * inv_d;
                let mean_gy: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() * inv_d;
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = rstd[row] * (gi - mean_g - yi * mean_gy);
                }
            }
            add_into(grads, *a, ga);
        }
        Op::Transpose { a } => {
            let shape = node.value.shape();
            add_into(grads, *a, kernels::transpose_last2(g, shape));
        }
        Op::Permute { a, axes } => {
            let inverse = kernels::inverse_axes(axes);
            let (ga, _) = kernels::permute(g, node.value.shape(), &inverse);
            add_into(grads, *a, ga);
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let width = val(p).shape()[*axis];
                if want(p) {
                    let mut gp = Vec::with_capacity(outer * width * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + width * inner]);
                    }
                    add_into(grads, p, gp);
                }
                offset += width;
            }
        }
        Op::GatherRows { table, ids } => {
            let tv = val(*table);
            let d = tv.cols();
            add_into_with(grads, *table, tv.numel(), |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::SelectRows { a, rows } => {
            let av = val(*a);
            let d = av.cols();
            add_into_with(grads, *a, av.numel(), |ga| {
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..d {
                        ga[src * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::SelectCols { a, cols } => {
            let av = val(*a);
            let (nr, nc) = (av.rows(), av.cols());
            let k = cols.len();
            add_into_with(grads, *a, av.numel(), |ga| {
                for i in 0..nr {
                    for (c, &src) in cols.iter().enumerate() {
                        ga[i * nc + src] += g[i * k + c];
                    }
                }
            });
        }
        Op::Sum { a } => {
            add_into(grads, *a, vec![g[0]; val(*a).numel()]);
        }
        Op::Mean { a } => {
            let n = val(*a).numel();
            add_into(grads, *a, vec![g[0] / S::lit(n as f64); n]);
        }
        Op::Frobenius { a } => {
            let norm = node.value.item();
            let x = val(*a).data();
            let ga = if norm > S::zero() {
                x.iter().map(|&xi| g[0] * xi / norm).collect()
            } else {
                vec![S::zero(); x.len()]
            };
            add_into(grads, *a, ga);
        }
        Op::Trace { a } => {
            let n = val(*a).rows();
            add_into_with(grads, *a, n * n, |ga| {
                for i in 0..n {
                    ga[i * n + i] += g[0];
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let v = val(*logits).cols();
            let scale = g[0] / S::lit(*count as f64);
            let mut gl = vec![S::zero(); probs.len()];
            for (row, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    for j in 0..v {
                        gl[row * v + j] = probs[row * v + j] * scale;
                    }
                    gl[row * v + t] -= scale;
                }
            }
            add_into(grads, *logits, gl);
        }
    }
    Ok(())
}
