//! Slice-level kernels shared by forward and backward rules.

use crate::float::Float;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<S: Float>(x: S) -> S {
    let c = S::lit(GELU_C);
    let k = S::lit(GELU_K);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<S: Float>(x: S) -> S {
    let c = S::lit(GELU_C);
    let k = S::lit(GELU_K);
    let half = S::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x)
}

pub(crate) fn sigmoid<S: Float>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Swaps the last two axes of a row-major array.
pub(crate) fn transpose_last2<S: Float>(data: &[S], shape: &[usize]) -> Vec<S> {
    let n = shape.len();
    let (r, c) = (shape[n - 2], shape[n - 1]);
    let mut out = vec![S::zero(); data.len()];
    if r * c == 0 {
        return out;
    }
    for (src, dst) in data.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// General axis permutation; returns the data and the permuted shape.
pub(crate) fn permute<S: Float>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Row-wise softmax over the last axis. With `causal`, the last two axes form
/// square score matrices and entry (i, j) with j > i gets probability 0.
pub(crate) fn softmax_rows<S: Float>(data: &[S], cols: usize, causal: bool) -> Vec<S> {
    let mut out = vec![S::zero(); data.len()];
    if cols == 0 {
        return out;
    }
    for (row, (src, dst)) in data.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let visible = if causal { row % cols + 1 } else { cols };
        let max = src[..visible]
            .iter()
            .copied()
            .fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for (o, &x) in dst[..visible].iter_mut().zip(&src[..visible]) {
            *o = (x - max).exp();
            total += *o;
        }
        for o in dst[..visible].iter_mut() {
            *o /= total;
        }
    }
    out
}

/// Normalizes each row to zero mean and unit variance; returns `(y, rstd)`.
pub(crate) fn layer_norm<S: Float>(data: &[S], cols: usize, eps: S) -> (Vec<S>, Vec<S>) {
    let mut out = vec![S::zero(); data.len()];
    let rows = if cols == 0 { 0 } else { data.len() / cols };
    let mut rstd = Vec::with_capacity(rows);
    let inv = S::one() / S::lit(cols as f64);
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = src.iter().copied().sum::<S>() * inv;
        let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv;
        let r = S::one() / (var + eps).sqrt();
        for (o, &x) in dst.iter_mut().zip(src) {
            *o = (x - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}
