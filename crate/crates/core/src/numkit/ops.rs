//! Forward kernels shared by the eager API and the tape.

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const NORMALIZE_EPS: f64 = 1e-12;

fn matrix_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// `out += a · b` on raw row-major buffers.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {m}x{k} · {k2}x{n}"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = matrix_dims(a, "transpose")?;
    Ok(Tensor::from_parts(vec![c, r], transpose_raw(a.data(), r, c)))
}

/// Row-wise softmax with max subtraction, so `-inf` logits map to exactly zero.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = matrix_dims(x, "softmax_rows")?;
    let mut out = x.data().to_vec();
    softmax_rows_in_place(&mut out, rows, cols)?;
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

pub(crate) fn softmax_rows_in_place<T: Scalar>(buf: &mut [T], rows: usize, cols: usize) -> Result<()> {
    for r in 0..rows {
        let row = &mut buf[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if !max.is_finite() {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

pub fn l2_normalize<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let data = normalize_slice(v.data()).ok_or(Error::ZeroVector { row: None })?;
    Ok(Tensor::from_parts(v.shape().to_vec(), data))
}

pub(crate) fn normalize_slice<T: Scalar>(v: &[T]) -> Option<Vec<T>> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(norm > T::lit(NORMALIZE_EPS)) {
        return None;
    }
    Some(v.iter().map(|&x| x / norm).collect())
}

/// Per-row statistics kept for the backward pass.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layernorm_raw<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    rows: usize,
    d: usize,
) -> (Vec<T>, LayerNormCache<T>) {
    let eps = T::lit(LAYERNORM_EPS);
    let inv_d = T::one() / T::lit(d as f64);
    let mut out = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

pub fn layernorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, d) = matrix_dims(x, "layernorm")?;
    if d < 2 {
        return Err(Error::shape("layernorm", "row width must be at least 2"));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layernorm",
            format!("affine parameters must have length {d}"),
        ));
    }
    let (out, _) = layernorm_raw(x.data(), gain.data(), bias.data(), rows, d);
    Ok(Tensor::from_parts(vec![rows, d], out))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
