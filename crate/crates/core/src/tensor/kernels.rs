//! Shared dense math on slices.
//!
//! Both the graph ops in this module's parent and the no-grad decode path in
//! `model` call these kernels, so the two paths produce bit-identical values.
//! Accumulation order is fixed (ascending index) everywhere; none of these
//! loops may be rewritten in a way that reassociates floating-point sums.

use super::elem::Elem;

/// `out = a @ b` for row-major `a: [m,k]`, `b: [k,n]`.
///
/// ikj loop order: each output row accumulates rank-1 updates in ascending k,
/// which matches [`vec_mat`] exactly when `m == 1`.
pub fn matmul<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(E::ZERO);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// `out = v @ b` for `v: [k]`, `b: [k,n]`. Same accumulation order as one row
/// of [`matmul`].
pub fn vec_mat<E: Elem>(v: &[E], b: &[E], k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(v.len(), k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), n);
    out.fill(E::ZERO);
    for (kk, &vk) in v.iter().enumerate() {
        let b_row = &b[kk * n..(kk + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row.iter()) {
            *o += vk * bv;
        }
    }
}

/// `out = a @ b^T` for `a: [m,p]`, `b: [q,p]`.
pub fn matmul_nt<E: Elem>(a: &[E], b: &[E], m: usize, p: usize, q: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), q * p);
    debug_assert_eq!(out.len(), m * q);
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for j in 0..q {
            out[i * q + j] = dot(a_row, &b[j * p..(j + 1) * p]);
        }
    }
}

/// `out = a^T @ b` for `a: [m,k]`, `b: [m,n]`, giving `[k,n]`.
pub fn matmul_tn<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(E::ZERO);
    for mm in 0..m {
        let a_row = &a[mm * k..(mm + 1) * k];
        let b_row = &b[mm * n..(mm + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Sequential dot product in ascending index order.
pub fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = E::ZERO;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// `out += alpha * x`.
pub fn axpy<E: Elem>(alpha: E, x: &[E], out: &mut [E]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += alpha * v;
    }
}

/// Softmax over the first `valid` entries of `row`; the rest are set to zero.
pub fn softmax_prefix<E: Elem>(row: &mut [E], valid: usize) {
    debug_assert!(valid >= 1 && valid <= row.len());
    let mut max = row[0];
    for &v in &row[1..valid] {
        max = max.fmax(v);
    }
    let mut sum = E::ZERO;
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..valid] {
        *v = *v / sum;
    }
    for v in &mut row[valid..] {
        *v = E::ZERO;
    }
}

/// Softmax over a full row.
pub fn softmax_row<E: Elem>(row: &mut [E]) {
    let n = row.len();
    softmax_prefix(row, n);
}

/// Writes `log_softmax(row)` into `out` (max-shifted, log-sum-exp in index
/// order).
pub fn log_softmax_row<E: Elem>(row: &[E], out: &mut [E]) {
    debug_assert_eq!(row.len(), out.len());
    debug_assert!(!row.is_empty());
    let mut max = row[0];
    for &v in &row[1..] {
        max = max.fmax(v);
    }
    let mut sum = E::ZERO;
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = v - lse;
    }
}

/// Layer normalization of one row with affine parameters.
pub fn layer_norm_row<E: Elem>(x: &[E], gamma: &[E], beta: &[E], eps: E, out: &mut [E]) {
    let n = x.len();
    debug_assert!(n > 0);
    debug_assert_eq!(gamma.len(), n);
    debug_assert_eq!(beta.len(), n);
    let inv_n = E::ONE / E::from_f64(n as f64);
    let mut mean = E::ZERO;
    for &v in x {
        mean += v;
    }
    mean *= inv_n;
    let mut var = E::ZERO;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var *= inv_n;
    let inv_std = E::ONE / (var + eps).sqrt();
    for i in 0..n {
        out[i] = gamma[i] * ((x[i] - mean) * inv_std) + beta[i];
    }
}
