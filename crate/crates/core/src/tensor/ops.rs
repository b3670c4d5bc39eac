use super::{dims2, AllocationLedger, Scalar, Tensor};
use crate::error::{QnaError, Result};

/// Matrix product `a (M x K) * b (K x N)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut ledger = AllocationLedger::new();
    matmul_tracked(a, b, &mut ledger)
}

pub fn matmul_tracked<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ledger: &mut AllocationLedger) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(QnaError::shape("matmul", format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    ledger.record("matmul", 0, out.len() * T::DTYPE.size());
    Tensor::checked("matmul", vec![m, n], out)
}

/// `out (m x n) += a (m x k) * b (k x n)` on raw row-major slices.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *scores.shape().last().expect("rank >= 1");
    let mut out = scores.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::checked("softmax_rows", scores.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Layer normalization over the last axis (biased variance, `eps` added to it).
pub fn layernorm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = *x.shape().last().expect("rank >= 1");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(QnaError::shape(
            "layernorm",
            format!("affine params {:?}/{:?} do not match feature dim {d}", gamma.shape(), beta.shape()),
        ));
    }
    let mut out = x.data().to_vec();
    let inv_d = T::one() / T::cast(d as f64);
    for row in out.chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Tensor::checked("layernorm", x.shape().to_vec(), out)
}

/// Reshapes `x` to `new_shape`, then permutes axes so output axis `i` is
/// input axis `axis_order[i]`.
pub fn reshape_permute<T: Scalar>(x: &Tensor<T>, new_shape: &[usize], axis_order: &[usize]) -> Result<Tensor<T>> {
    let count: usize = new_shape.iter().product();
    if count != x.len() || new_shape.contains(&0) {
        return Err(QnaError::shape(
            "reshape_permute",
            format!("cannot reshape {:?} ({} elements) to {new_shape:?}", x.shape(), x.len()),
        ));
    }
    let rank = new_shape.len();
    let mut seen = vec![false; rank];
    if axis_order.len() != rank || axis_order.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(QnaError::invalid("reshape_permute", format!("{axis_order:?} is not a permutation of 0..{rank}")));
    }

    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * new_shape[i + 1];
    }
    let out_shape: Vec<usize> = axis_order.iter().map(|&a| new_shape[a]).collect();
    let strides: Vec<usize> = axis_order.iter().map(|&a| in_strides[a]).collect();

    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        // odometer increment over the output index
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
    Ok(Tensor::from_parts(out_shape, out))
}
