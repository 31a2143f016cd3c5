//! Wall-time measurement of the scan kernels (and an optional quadratic
//! self-attention reference) across sequence lengths, for the linear
//! complexity check: doubling L should scale the scan by < 2.5x while the
//! attention reference scales by ~4x.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::Result;
use crate::rng::Stream;
use crate::ssm::{s6_scan_parallel, s6_scan_sequential, S6Params};
use crate::tensor::{no_grad, DType, Tensor};

#[derive(Debug, Clone)]
pub struct ScanTiming {
    pub length: usize,
    pub sequential_s: f64,
    pub parallel_s: f64,
}

/// Minimum wall time of `f` over `reps` runs; the minimum is the
/// standard scheduler-noise-robust statistic for microbenchmarks.
fn best_time(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps.max(1))
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Times both scan routes on [1, L, d] inputs.
pub fn bench_scan(lengths: &[usize], d: usize, d_state: usize, reps: usize, seed: u64) -> Result<Vec<ScanTiming>> {
    let mut rng = Stream::child(seed, "bench-params");
    let params = S6Params::init(d, d_state, S6Params::default_rank(d), &mut rng, DType::F32)?;
    let mut out = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let mut xr = Stream::child(seed, &format!("bench-x-{l}"));
        let x = Tensor::from_f32(&[1, l, d], (0..l * d).map(|_| xr.normal() as f32).collect())?;
        // warm up allocators and caches once per length
        no_grad(|| s6_scan_sequential(&x, &params)).unwrap();
        let sequential_s = best_time(reps, || {
            no_grad(|| s6_scan_sequential(&x, &params)).unwrap();
        });
        let parallel_s = best_time(reps, || {
            no_grad(|| s6_scan_parallel(&x, &params)).unwrap();
        });
        out.push(ScanTiming { length: l, sequential_s, parallel_s });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AttentionTiming {
    pub length: usize,
    pub seconds: f64,
}

/// Minimal single-head softmax self-attention forward on [L, dm]:
/// QK^T row-softmax times V. Quadratic in L by construction.
pub fn attention_forward(x: &[f32], l: usize, dm: usize, out: &mut [f32]) {
    assert_eq!(x.len(), l * dm);
    assert_eq!(out.len(), l * dm);
    let scale = 1.0 / (dm as f64).sqrt();
    out.par_chunks_mut(dm).enumerate().for_each(|(i, orow)| {
        let qi = &x[i * dm..(i + 1) * dm];
        let mut scores = vec![0.0f64; l];
        let mut mx = f64::NEG_INFINITY;
        for j in 0..l {
            let kj = &x[j * dm..(j + 1) * dm];
            let mut s = 0.0f64;
            for t in 0..dm {
                s += qi[t] as f64 * kj[t] as f64;
            }
            let s = s * scale;
            scores[j] = s;
            mx = mx.max(s);
        }
        let mut denom = 0.0f64;
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            denom += *s;
        }
        let mut acc = vec![0.0f64; dm];
        for j in 0..l {
            let w = scores[j] / denom;
            let vj = &x[j * dm..(j + 1) * dm];
            for t in 0..dm {
                acc[t] += w * vj[t] as f64;
            }
        }
        for t in 0..dm {
            orow[t] = acc[t] as f32;
        }
    });
}

pub fn bench_attention(lengths: &[usize], dm: usize, reps: usize, seed: u64) -> Vec<AttentionTiming> {
    let mut out = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let mut rng = Stream::child(seed, &format!("attn-{l}"));
        let x: Vec<f32> = (0..l * dm).map(|_| rng.normal() as f32).collect();
        let mut y = vec![0.0f32; l * dm];
        attention_forward(&x, l, dm, &mut y); // warm-up
        let seconds = best_time(reps, || attention_forward(&x, l, dm, &mut y));
        out.push(AttentionTiming { length: l, seconds });
    }
    out
}
