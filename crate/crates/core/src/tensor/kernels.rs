//! Row-major compute kernels shared by the tape and by gradient-free paths.
//!
//! Output rows are independent, so the parallel and sequential schedules
//! produce bitwise-identical results.

use super::Float;
use crate::exec;

/// `a[m×k] · b[k×n]`
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    exec::for_each_row(&mut out, n, k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (t, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    exec::for_each_row(&mut out, n, k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ar, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `a[m×k]ᵀ · b[m×n]`, producing `k×n`.
pub fn matmul_tn<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![T::zero(); k * n];
    exec::for_each_row(&mut out, n, m * n, |r, row| {
        for i in 0..m {
            let av = a[i * k + r];
            if av == T::zero() {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// In-place softmax of `x · inv_tau` over rows of length `cols`, with max
/// subtraction.
pub fn softmax_rows<T: Float>(x: &mut [T], cols: usize, inv_tau: T) {
    for row in x.chunks_mut(cols) {
        let mx = row
            .iter()
            .fold(T::neg_infinity(), |m, &v| m.max(v * inv_tau));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v * inv_tau - mx).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
}

/// In-place log-softmax of `x · inv_tau` over rows.
pub fn log_softmax_rows<T: Float>(x: &mut [T], cols: usize, inv_tau: T) {
    for row in x.chunks_mut(cols) {
        let mx = row
            .iter()
            .fold(T::neg_infinity(), |m, &v| m.max(v * inv_tau));
        let s: T = row.iter().map(|&v| (v * inv_tau - mx).exp()).sum();
        let lse = mx + s.ln();
        for v in row.iter_mut() {
            *v = *v * inv_tau - lse;
        }
    }
}

/// Returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Float>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dn = T::lit(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Length-normalizes rows; returns the norms used.
pub fn l2_normalize_rows<T: Float>(x: &mut [T], cols: usize) -> Vec<T> {
    let tiny = T::lit(1e-12);
    x.chunks_mut(cols)
        .map(|row| {
            let n = dot(row, row).sqrt().max(tiny);
            for v in row.iter_mut() {
                *v = *v / n;
            }
            n
        })
        .collect()
}
