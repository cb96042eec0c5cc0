//! Forward rules. Every method checks shapes, computes the value, and records
//! the operation on the owning tape.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::gemm::gemm;
use crate::kernels;
use crate::tape::{Op, Var};
use crate::tensor::{numel, Tensor};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `rhs` broadcasts over `lhs` when its shape equals a trailing run of
/// `lhs`'s axes (bias vectors, per-column gate scales, scalars).
fn broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

impl<'t, S: Float> Var<'t, S> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.idx).shape().to_vec()
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.value_ref(self.idx).clone()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> S {
        self.tape.value_ref(self.idx).item()
    }

    fn same_tape(&self, other: &Var<'t, S>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    fn unary(
        self,
        name: &'static str,
        f: impl Fn(S) -> S,
        op: impl FnOnce(usize) -> Op<S>,
    ) -> Result<Self> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())?
        };
        self.tape.push(value, op(self.idx), name)
    }

    fn binary(
        self,
        rhs: Self,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Self> {
        self.same_tape(&rhs);
        let value = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(rhs.idx);
            if !broadcasts(a.shape(), b.shape()) {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            let nb = b.numel();
            let data = if nb == 0 {
                Vec::new()
            } else {
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % nb]))
                    .collect()
            };
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(value, op, name)
    }

    /// Matrix product over the last axis of `self` with a 2-D `rhs`.
    /// Leading axes of `self` are treated as extra rows.
    pub fn matmul(self, rhs: Self) -> Result<Self> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` for a 2-D `rhs` of shape `[n, k]`.
    pub fn matmul_t(self, rhs: Self) -> Result<Self> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Self, tb: bool) -> Result<Self> {
        self.same_tape(&rhs);
        let value = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(rhs.idx);
            let ok = a.rank() >= 1 && b.rank() == 2 && {
                let k = if tb { b.shape()[1] } else { b.shape()[0] };
                a.cols() == k
            };
            if !ok {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let k = a.cols();
            let m = if k == 0 { numel(&a.shape()[..a.rank() - 1]) } else { a.numel() / k };
            let n = if tb { b.shape()[0] } else { b.shape()[1] };
            let mut out_shape = a.shape()[..a.rank() - 1].to_vec();
            out_shape.push(n);
            let mut out = vec![S::zero(); m * n];
            gemm(m, k, n, a.data(), false, b.data(), tb, &mut out, false);
            Tensor::new(out_shape, out)?
        };
        self.tape.push(
            value,
            Op::MatMul {
                a: self.idx,
                b: rhs.idx,
                tb,
            },
            "matmul",
        )
    }

    /// Batched product of `[bt, m, k]` and `[bt, k, n]`.
    pub fn bmm(self, rhs: Self) -> Result<Self> {
        self.bmm_impl(rhs, false)
    }

    /// Batched `self · rhsᵀ` with `rhs` of shape `[bt, n, k]`.
    pub fn bmm_t(self, rhs: Self) -> Result<Self> {
        self.bmm_impl(rhs, true)
    }

    fn bmm_impl(self, rhs: Self, tb: bool) -> Result<Self> {
        self.same_tape(&rhs);
        let value = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(rhs.idx);
            let (sa, sb) = (a.shape(), b.shape());
            let ok = sa.len() == 3
                && sb.len() == 3
                && sa[0] == sb[0]
                && sa[2] == if tb { sb[2] } else { sb[1] };
            if !ok {
                return Err(shape_err("bmm", sa, sb));
            }
            let (bt, m, k) = (sa[0], sa[1], sa[2]);
            let n = if tb { sb[1] } else { sb[2] };
            let mut out = vec![S::zero(); bt * m * n];
            for i in 0..bt {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            Tensor::new(vec![bt, m, n], out)?
        };
        self.tape.push(
            value,
            Op::BatchMatMul {
                a: self.idx,
                b: rhs.idx,
                tb,
            },
            "bmm",
        )
    }

    pub fn add(self, rhs: Self) -> Result<Self> {
        let op = Op::Add {
            a: self.idx,
            b: rhs.idx,
        };
        self.binary(rhs, "add", |x, y| x + y, op)
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        let op = Op::Sub {
            a: self.idx,
            b: rhs.idx,
        };
        self.binary(rhs, "sub", |x, y| x - y, op)
    }

    /// Elementwise product; `rhs` may broadcast over leading axes.
    pub fn mul(self, rhs: Self) -> Result<Self> {
        let op = Op::Mul {
            a: self.idx,
            b: rhs.idx,
        };
        self.binary(rhs, "mul", |x, y| x * y, op)
    }

    pub fn div(self, rhs: Self) -> Result<Self> {
        let op = Op::Div {
            a: self.idx,
            b: rhs.idx,
        };
        self.binary(rhs, "div", |x, y| x / y, op)
    }

    /// Multiplies column `j` of a `[.., r]` variable by `scale[j]`.
    pub fn diag_scale(self, scale: Self) -> Result<Self> {
        let (sa, sb) = (self.shape(), scale.shape());
        if sb.len() != 1 || sa.last() != sb.first() {
            return Err(shape_err("diag_scale", &sa, &sb));
        }
        self.mul(scale)
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        let c = S::lit(c);
        self.unary("scale", |x| x * c, |a| Op::Scale { a, c })
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Self> {
        let c = S::lit(c);
        self.unary("add_scalar", |x| x + c, |a| Op::AddScalar { a })
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary("sigmoid", kernels::sigmoid, |a| Op::Sigmoid { a })
    }

    pub fn relu(self) -> Result<Self> {
        self.unary("relu", |x| x.max(S::zero()), |a| Op::Relu { a })
    }

    pub fn gelu(self) -> Result<Self> {
        self.unary("gelu", kernels::gelu, |a| Op::Gelu { a })
    }

    pub fn exp(self) -> Result<Self> {
        self.unary("exp", |x| x.exp(), |a| Op::Exp { a })
    }

    pub fn ln(self) -> Result<Self> {
        self.unary("ln", |x| x.ln(), |a| Op::Log { a })
    }

    pub fn sqrt(self) -> Result<Self> {
        self.unary("sqrt", |x| x.sqrt(), |a| Op::Sqrt { a })
    }

    /// Clips into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Self> {
        let (lo, hi) = (S::lit(lo), S::lit(hi));
        self.unary("clamp", |x| x.max(lo).min(hi), |a| Op::Clamp { a, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Self> {
        self.softmax_impl(false)
    }

    /// Softmax over the last axis of square `[.., t, t]` score matrices with
    /// future positions masked out.
    pub fn causal_softmax(self) -> Result<Self> {
        self.softmax_impl(true)
    }

    fn softmax_impl(self, causal: bool) -> Result<Self> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            let s = a.shape();
            if s.is_empty() || (causal && (s.len() < 2 || s[s.len() - 1] != s[s.len() - 2])) {
                return Err(shape_err("softmax", s, s));
            }
            Tensor::new(s.to_vec(), kernels::softmax_rows(a.data(), a.cols(), causal))?
        };
        self.tape
            .push(value, Op::Softmax { a: self.idx }, "softmax")
    }

    /// Parameter-free normalization over the last axis.
    pub fn layer_norm(self, eps: f64) -> Result<Self> {
        let (value, rstd) = {
            let a = self.tape.value_ref(self.idx);
            if a.rank() == 0 {
                return Err(shape_err("layer_norm", a.shape(), a.shape()));
            }
            let (y, rstd) = kernels::layer_norm(a.data(), a.cols(), S::lit(eps));
            (Tensor::new(a.shape().to_vec(), y)?, rstd)
        };
        self.tape
            .push(value, Op::LayerNorm { a: self.idx, rstd }, "layer_norm")
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Self> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            let s = a.shape();
            if s.len() < 2 {
                return Err(shape_err("transpose", s, s));
            }
            let mut out_shape = s.to_vec();
            out_shape.swap(s.len() - 2, s.len() - 1);
            Tensor::new(out_shape, kernels::transpose_last2(a.data(), s))?
        };
        self.tape.push(value, Op::Transpose { a: self.idx }, "transpose")
    }

    pub fn permute(self, axes: &[usize]) -> Result<Self> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            let mut sorted = axes.to_vec();
            sorted.sort_unstable();
            if sorted != (0..a.rank()).collect::<Vec<_>>() {
                return Err(shape_err("permute", a.shape(), axes));
            }
            let (data, shape) = kernels::permute(a.data(), a.shape(), axes);
            Tensor::new(shape, data)?
        };
        self.tape.push(
            value,
            Op::Permute {
                a: self.idx,
                axes: axes.to_vec(),
            },
            "permute",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            if numel(shape) != a.numel() {
                return Err(shape_err("reshape", a.shape(), shape));
            }
            Tensor::new(shape.to_vec(), a.data().to_vec())?
        };
        self.tape.push(value, Op::Reshape { a: self.idx }, "reshape")
    }

    /// Joins variables along `axis`; all other axes must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let value = {
            let base = first.shape();
            if axis >= base.len() {
                return Err(shape_err("concat", &base, &base));
            }
            let mut total = 0;
            for p in parts {
                let s = p.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(shape_err("concat", &base, &s));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let v = tape.value_ref(p.idx);
                    let w = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        tape.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.idx).collect(),
                axis,
            },
            "concat",
        )
    }

    /// Embedding lookup: rows `ids` of a 2-D table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Self> {
        self.select_rows_impl(ids, true)
    }

    pub fn select_rows(self, rows: &[usize]) -> Result<Self> {
        self.select_rows_impl(rows, false)
    }

    fn select_rows_impl(self, rows: &[usize], gather: bool) -> Result<Self> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            if a.rank() != 2 || rows.iter().any(|&r| r >= a.rows()) {
                return Err(shape_err("select_rows", a.shape(), &[rows.len()]));
            }
            let d = a.cols();
            let mut data = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                data.extend_from_slice(&a.data()[r * d..(r + 1) * d]);
            }
            Tensor::new(vec![rows.len(), d], data)?
        };
        let op = if gather {
            Op::GatherRows {
                table: self.idx,
                ids: rows.to_vec(),
            }
        } else {
            Op::SelectRows {
                a: self.idx,
                rows: rows.to_vec(),
            }
        };
        self.tape.push(value, op, "select_rows")
    }

    pub fn select_cols(self, cols: &[usize]) -> Result<Self> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            if a.rank() != 2 || cols.iter().any(|&c| c >= a.cols()) {
                return Err(shape_err("select_cols", a.shape(), &[cols.len()]));
            }
            let (r, c) = (a.rows(), a.cols());
            let mut data = Vec::with_capacity(r * cols.len());
            for i in 0..r {
                for &j in cols {
                    data.push(a.data()[i * c + j]);
                }
            }
            Tensor::new(vec![r, cols.len()], data)?
        };
        self.tape.push(
            value,
            Op::SelectCols {
                a: self.idx,
                cols: cols.to_vec(),
            },
            "select_cols",
        )
    }

    pub fn sum(self) -> Result<Self> {
        let value = Tensor::scalar(self.tape.value_ref(self.idx).data().iter().copied().sum());
        self.tape.push(value, Op::Sum { a: self.idx }, "sum")
    }

    pub fn mean(self) -> Result<Self> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            if a.numel() == 0 {
                return Err(TensorError::Contract("mean of an empty tensor".into()));
            }
            Tensor::scalar(a.data().iter().copied().sum::<S>() / S::lit(a.numel() as f64))
        };
        self.tape.push(value, Op::Mean { a: self.idx }, "mean")
    }

    pub fn frobenius_norm(self) -> Result<Self> {
        let value = Tensor::scalar(self.tape.value_ref(self.idx).frobenius_norm());
        self.tape.push(value, Op::Frobenius { a: self.idx }, "frobenius_norm")
    }

    /// Squared Frobenius norm, `Σ x²`.
    pub fn sum_squares(self) -> Result<Self> {
        self.mul(self)?.sum()
    }

    pub fn trace(self) -> Result<Self> {
        let value = {
            let a = self.tape.value_ref(self.idx);
            if a.rank() != 2 || a.rows() != a.cols() {
                return Err(shape_err("trace", a.shape(), a.shape()));
            }
            let n = a.rows();
            Tensor::scalar((0..n).map(|i| a.data()[i * n + i]).sum())
        };
        self.tape.push(value, Op::Trace { a: self.idx }, "trace")
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    ///
    /// `self` is `[.., vocab]`; leading axes are flattened into rows and
    /// `targets` has one entry per row.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Self> {
        let (value, probs, count) = {
            let a = self.tape.value_ref(self.idx);
            if a.rank() == 0 {
                return Err(shape_err("cross_entropy", a.shape(), &[targets.len()]));
            }
            let v = a.cols();
            let rows = if v == 0 { 0 } else { a.numel() / v };
            if rows != targets.len() || targets.iter().flatten().any(|&t| t >= v) {
                return Err(shape_err("cross_entropy", a.shape(), &[targets.len()]));
            }
            let count = targets.iter().filter(|t| t.is_some()).count();
            if count == 0 {
                return Err(TensorError::Contract(
                    "cross_entropy with no target positions".into(),
                ));
            }
            let probs = kernels::softmax_rows(a.data(), v, false);
            let mut total = S::zero();
            for (row, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    let logits = &a.data()[row * v..(row + 1) * v];
                    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
                    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
                    total += lse - logits[*t];
                }
            }
            (
                Tensor::scalar(total / S::lit(count as f64)),
                probs,
                count,
            )
        };
        self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.idx,
                targets: targets.to_vec(),
                probs,
                count,
            },
            "cross_entropy",
        )
    }
}
