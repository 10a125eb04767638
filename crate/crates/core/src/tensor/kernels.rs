//! Slice-level numeric kernels.
//!
//! Every output element of the matrix kernels is accumulated over the inner
//! dimension in ascending order, independently of how many rows are
//! processed. Row-wise results are therefore bitwise identical whether a
//! sequence is processed whole or one row at a time.

use crate::scalar::Scalar;

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
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

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stable softmax of one row. Entries with `allowed[j] == false`
/// receive exactly zero; a row with nothing allowed becomes all zeros.
pub fn softmax_row<T: Scalar>(x: &[T], allowed: Option<&[bool]>, out: &mut [T]) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if ok(j) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = T::zero();
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-softmax of one row (no masking).
pub fn log_softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Normalizes one row to zero mean and unit variance; returns `1/σ`.
pub fn normalize_row<T: Scalar>(x: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * rstd;
    }
    rstd
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}
