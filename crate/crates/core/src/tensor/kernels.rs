//! Forward kernels shared by the tape and by tape-free callers.

use super::Tensor;
use crate::real::{gemm, MatLayout, Real};

pub(crate) fn permute<F: Real>(x: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    // Odometer walk over the output index space.
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves element count")
}

/// `c[b] = op(a[b])·op(b[b]) + beta·c[b]` over `batch` contiguous matrices.
/// `m, k, n` are the dimensions after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul<F: Real>(
    a: &[F],
    a_t: bool,
    b: &[F],
    b_t: bool,
    c: &mut [F],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    beta: F,
) {
    let la = if a_t { MatLayout::transposed(m, k) } else { MatLayout::plain(m, k) };
    let lb = if b_t { MatLayout::transposed(k, n) } else { MatLayout::plain(k, n) };
    for i in 0..batch {
        gemm(
            &a[i * m * k..(i + 1) * m * k],
            la,
            &b[i * k * n..(i + 1) * k * n],
            lb,
            beta,
            &mut c[i * m * n..(i + 1) * m * n],
        );
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax of `scale·x` along `axis`.
///
/// Logits are multiplied by `scale` before the running maximum is taken, so
/// `softmax(x, axis, a)` and `softmax(a·x, axis, 1)` are bit-identical.
pub fn softmax<F: Real>(x: &Tensor<F>, axis: usize, scale: F) -> Tensor<F> {
    assert!(axis < x.rank(), "softmax axis {axis} out of range for {:?}", x.shape());
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![F::zero(); src.len()];
    let mut row = vec![F::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, r) in row.iter_mut().enumerate() {
                *r = scale * src[base + j * inner];
            }
            softmax_row(&mut row);
            for (j, &r) in row.iter().enumerate() {
                out[base + j * inner] = r;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn softmax_row<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for r in row.iter_mut() {
        *r = (*r - max).exp();
        sum += *r;
    }
    for r in row.iter_mut() {
        *r /= sum;
    }
    debug_assert!(row.iter().all(|v| !v.is_nan()), "NaN in softmax");
}

/// Causal softmax over the trailing `[T, T]` block: row `i` is the softmax of
/// `scale·x[i, ..=i]`, entries `j > i` are exactly zero.
///
/// The mask is applied after scaling, so masked keys stay at probability zero
/// for every `scale`.
pub fn causal_softmax<F: Real>(x: &Tensor<F>, scale: F) -> Tensor<F> {
    let r = x.rank();
    assert!(r >= 2 && x.shape()[r - 1] == x.shape()[r - 2], "causal softmax needs [..,T,T], got {:?}", x.shape());
    let t = x.shape()[r - 1];
    let src = x.data();
    let mut out = vec![F::zero(); src.len()];
    for (blk_in, blk_out) in src.chunks(t * t).zip(out.chunks_mut(t * t)) {
        for i in 0..t {
            let row = &mut blk_out[i * t..i * t + i + 1];
            for (j, v) in row.iter_mut().enumerate() {
                *v = scale * blk_in[i * t + j];
            }
            softmax_row(row);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub fn gelu_scalar<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    half * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let cdf = F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (F::lit(-0.5) * x * x).exp() * F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Normalizes every row of length `n` to zero mean and unit variance
/// (biased estimator, `sqrt(var + eps)`). Returns the normalized values and
/// the per-row inverse standard deviation.
pub(crate) fn normalize_rows<F: Real>(x: &[F], n: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / n;
    let mut out = vec![F::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    let nf = F::lit(n as f64);
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = src.iter().copied().sum::<F>() / nf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let is = F::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}
