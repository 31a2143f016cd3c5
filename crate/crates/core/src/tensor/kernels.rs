//! Hot inner loops shared by linear, conv, and scan kernels.
//!
//! Dot products accumulate in f64 through eight independent chains so the
//! FMA latency chain does not serialize; the final combine order is fixed,
//! keeping results bit-identical run to run.

use super::Float;

/// Fixed-width array chunks give the vectorizer compile-time extents even
/// when the overall length is only known at runtime.
#[inline(always)]
pub(crate) fn dot_f64<T: Float>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 16];
    let mut i = 0;
    while i + 16 <= n {
        let xa: &[T; 16] = a[i..i + 16].try_into().unwrap();
        let xb: &[T; 16] = b[i..i + 16].try_into().unwrap();
        for j in 0..16 {
            acc[j] += xa[j].to_f64() * xb[j].to_f64();
        }
        i += 16;
    }
    let mut s = 0.0;
    for v in acc {
        s += v;
    }
    while i < n {
        s += a[i].to_f64() * b[i].to_f64();
        i += 1;
    }
    s
}

/// f64 weights against T activations (scan projections).
#[inline(always)]
pub(crate) fn dot_mixed<T: Float>(w: &[f64], x: &[T]) -> f64 {
    let n = w.len().min(x.len());
    let mut acc = [0.0f64; 16];
    let mut i = 0;
    while i + 16 <= n {
        let xw: &[f64; 16] = w[i..i + 16].try_into().unwrap();
        let xx: &[T; 16] = x[i..i + 16].try_into().unwrap();
        for j in 0..16 {
            acc[j] += xw[j] * xx[j].to_f64();
        }
        i += 16;
    }
    let mut s = 0.0;
    for v in acc {
        s += v;
    }
    while i < n {
        s += w[i] * x[i].to_f64();
        i += 1;
    }
    s
}
