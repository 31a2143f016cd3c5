//! Differentiable tensor operations.
//!
//! Every op validates extents up front, computes the forward value, and —
//! when the tape is live — attaches a node whose backward rule produces the
//! per-parent gradient contributions. Reductions accumulate in f64.

use rayon::prelude::*;

use super::{autograd_enabled, check_same_shape, flops, DType, Float, Node, Storage, Tensor};
use crate::error::{Error, Result};

#[inline(always)]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    let v = x.to_f64();
    let s = if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) };
    T::from_f64(s)
}

fn float_dispatch<R>(
    op: &'static str,
    dt: DType,
    f32_path: impl FnOnce() -> R,
    f64_path: impl FnOnce() -> R,
) -> Result<R> {
    match dt {
        DType::F32 => Ok(f32_path()),
        DType::F64 => Ok(f64_path()),
        DType::U8 => Err(Error::shape(op, "u8 tensors are not differentiable operands")),
    }
}

// ── elementwise ──────────────────────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    fn run<T: Float>(a: &Tensor, b: &Tensor) -> Tensor {
        let out: Vec<T> = {
            let (da, db) = (a.data(), b.data());
            T::slice(&da).iter().zip(T::slice(&db)).map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64())).collect()
        };
        let node = if autograd_enabled() && (a.on_tape() || b.on_tape()) {
            Some(Node {
                parents: vec![a.clone(), b.clone()],
                backward: Box::new(move |g: &Storage| vec![Some(g.clone()), Some(g.clone())]),
            })
        } else {
            None
        };
        Tensor::from_op(a.shape().to_vec(), T::wrap(out), node)
    }
    float_dispatch("add", a.dtype(), || run::<f32>(a, b), || run::<f64>(a, b))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    fn run<T: Float>(a: &Tensor, b: &Tensor) -> Tensor {
        let out: Vec<T> = {
            let (da, db) = (a.data(), b.data());
            T::slice(&da).iter().zip(T::slice(&db)).map(|(&x, &y)| T::from_f64(x.to_f64() * y.to_f64())).collect()
        };
        let node = if autograd_enabled() && (a.on_tape() || b.on_tape()) {
            let (ac, bc) = (a.clone(), b.clone());
            Some(Node {
                parents: vec![a.clone(), b.clone()],
                backward: Box::new(move |g: &Storage| {
                    let gs = T::slice(g);
                    let (da, db) = (ac.data(), bc.data());
                    let ga: Vec<T> = gs.iter().zip(T::slice(&db)).map(|(&g, &y)| T::from_f64(g.to_f64() * y.to_f64())).collect();
                    let gb: Vec<T> = gs.iter().zip(T::slice(&da)).map(|(&g, &x)| T::from_f64(g.to_f64() * x.to_f64())).collect();
                    vec![Some(T::wrap(ga)), Some(T::wrap(gb))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(a.shape().to_vec(), T::wrap(out), node)
    }
    float_dispatch("mul", a.dtype(), || run::<f32>(a, b), || run::<f64>(a, b))
}

pub fn scale(x: &Tensor, c: f64) -> Result<Tensor> {
    fn run<T: Float>(x: &Tensor, c: f64) -> Tensor {
        let out: Vec<T> = {
            let d = x.data();
            T::slice(&d).iter().map(|&v| T::from_f64(v.to_f64() * c)).collect()
        };
        let node = if autograd_enabled() && x.on_tape() {
            Some(Node {
                parents: vec![x.clone()],
                backward: Box::new(move |g: &Storage| {
                    let gx: Vec<T> = T::slice(g).iter().map(|&v| T::from_f64(v.to_f64() * c)).collect();
                    vec![Some(T::wrap(gx))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(x.shape().to_vec(), T::wrap(out), node)
    }
    float_dispatch("scale", x.dtype(), || run::<f32>(x, c), || run::<f64>(x, c))
}

/// Full reduction to a scalar; accumulates in f64.
pub fn sum(x: &Tensor) -> Result<Tensor> {
    fn run<T: Float>(x: &Tensor) -> Tensor {
        let total: f64 = {
            let d = x.data();
            T::slice(&d).iter().map(|v| v.to_f64()).sum()
        };
        let n = x.numel();
        let node = if autograd_enabled() && x.on_tape() {
            Some(Node {
                parents: vec![x.clone()],
                backward: Box::new(move |g: &Storage| {
                    let gv = T::slice(g)[0];
                    vec![Some(T::wrap(vec![gv; n]))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(vec![], T::wrap(vec![T::from_f64(total)]), node)
    }
    float_dispatch("sum", x.dtype(), || run::<f32>(x), || run::<f64>(x))
}

// ── activations ──────────────────────────────────────────────────────

pub fn silu(x: &Tensor) -> Result<Tensor> {
    fn run<T: Float>(x: &Tensor) -> Tensor {
        let out: Vec<T> = {
            let d = x.data();
            T::slice(&d)
                .par_iter()
                .map(|&v| T::from_f64(v.to_f64() * sigmoid(v).to_f64()))
                .collect()
        };
        let node = if autograd_enabled() && x.on_tape() {
            let xc = x.clone();
            Some(Node {
                parents: vec![x.clone()],
                backward: Box::new(move |g: &Storage| {
                    let d = xc.data();
                    let gx: Vec<T> = T::slice(g)
                        .iter()
                        .zip(T::slice(&d))
                        .map(|(&g, &v)| {
                            let s = sigmoid(v).to_f64();
                            let vv = v.to_f64();
                            T::from_f64(g.to_f64() * (s + vv * s * (1.0 - s)))
                        })
                        .collect();
                    vec![Some(T::wrap(gx))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(x.shape().to_vec(), T::wrap(out), node)
    }
    float_dispatch("silu", x.dtype(), || run::<f32>(x), || run::<f64>(x))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    fn run<T: Float>(x: &Tensor, slope: f64) -> Tensor {
        let out: Vec<T> = {
            let d = x.data();
            T::slice(&d)
                .iter()
                .map(|&v| if v.to_f64() > 0.0 { v } else { T::from_f64(v.to_f64() * slope) })
                .collect()
        };
        let node = if autograd_enabled() && x.on_tape() {
            let xc = x.clone();
            Some(Node {
                parents: vec![x.clone()],
                backward: Box::new(move |g: &Storage| {
                    let d = xc.data();
                    let gx: Vec<T> = T::slice(g)
                        .iter()
                        .zip(T::slice(&d))
                        .map(|(&g, &v)| {
                            let m = if v.to_f64() > 0.0 { 1.0 } else { slope };
                            T::from_f64(g.to_f64() * m)
                        })
                        .collect();
                    vec![Some(T::wrap(gx))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(x.shape().to_vec(), T::wrap(out), node)
    }
    float_dispatch("leaky_relu", x.dtype(), || run::<f32>(x, slope), || run::<f64>(x, slope))
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    fn stable(v: f64) -> f64 {
        v.max(0.0) + (-v.abs()).exp().ln_1p()
    }
    fn run<T: Float>(x: &Tensor) -> Tensor {
        let out: Vec<T> = {
            let d = x.data();
            T::slice(&d).iter().map(|&v| T::from_f64(stable(v.to_f64()))).collect()
        };
        let node = if autograd_enabled() && x.on_tape() {
            let xc = x.clone();
            Some(Node {
                parents: vec![x.clone()],
                backward: Box::new(move |g: &Storage| {
                    let d = xc.data();
                    let gx: Vec<T> = T::slice(g)
                        .iter()
                        .zip(T::slice(&d))
                        .map(|(&g, &v)| T::from_f64(g.to_f64() * sigmoid(v).to_f64()))
                        .collect();
                    vec![Some(T::wrap(gx))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(x.shape().to_vec(), T::wrap(out), node)
    }
    float_dispatch("softplus", x.dtype(), || run::<f32>(x), || run::<f64>(x))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for shape {:?}", x.shape())));
    }
    let lane = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    fn run<T: Float>(x: &Tensor, outer: usize, lane: usize, inner: usize) -> Tensor {
        let mut out = vec![T::ZERO; x.numel()];
        {
            let d = x.data();
            let xs = T::slice(&d);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for l in 0..lane {
                        mx = mx.max(xs[base + l * inner].to_f64());
                    }
                    let mut denom = 0.0f64;
                    for l in 0..lane {
                        denom += (xs[base + l * inner].to_f64() - mx).exp();
                    }
                    for l in 0..lane {
                        out[base + l * inner] =
                            T::from_f64((xs[base + l * inner].to_f64() - mx).exp() / denom);
                    }
                }
            }
        }
        let node = if autograd_enabled() && x.on_tape() {
            let saved = out.clone();
            Some(Node {
                parents: vec![x.clone()],
                backward: Box::new(move |g: &Storage| {
                    let gs = T::slice(g);
                    let mut gx = vec![T::ZERO; gs.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut dot = 0.0f64;
                            for l in 0..lane {
                                let k = base + l * inner;
                                dot += gs[k].to_f64() * saved[k].to_f64();
                            }
                            for l in 0..lane {
                                let k = base + l * inner;
                                gx[k] = T::from_f64(saved[k].to_f64() * (gs[k].to_f64() - dot));
                            }
                        }
                    }
                    vec![Some(T::wrap(gx))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(x.shape().to_vec(), T::wrap(out), node)
    }
    float_dispatch("softmax", x.dtype(), || run::<f32>(x, outer, lane, inner), || run::<f64>(x, outer, lane, inner))
}

// ── normalization ────────────────────────────────────────────────────

/// Normalizes lanes of length `lane` starting at the given strides; shared
/// by layer norm (last axis) and instance norm (per-channel spatial plane).
fn norm_lanes<T: Float>(
    xs: &[T],
    lanes: usize,
    lane: usize,
    gamma: &[T],
    beta: &[T],
    affine_per_lane_elem: bool, // true: gamma indexed within lane (layer norm)
    gamma_of_lane: &dyn Fn(usize) -> usize,
    eps: f64,
) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let mut out = vec![T::ZERO; xs.len()];
    let mut means = vec![0.0f64; lanes];
    let mut rstds = vec![0.0f64; lanes];
    for l in 0..lanes {
        let base = l * lane;
        let mut mean = 0.0f64;
        for i in 0..lane {
            mean += xs[base + i].to_f64();
        }
        mean /= lane as f64;
        let mut var = 0.0f64;
        for i in 0..lane {
            let d = xs[base + i].to_f64() - mean;
            var += d * d;
        }
        var /= lane as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        means[l] = mean;
        rstds[l] = rstd;
        for i in 0..lane {
            let xhat = (xs[base + i].to_f64() - mean) * rstd;
            let gi = if affine_per_lane_elem { i } else { gamma_of_lane(l) };
            out[base + i] = T::from_f64(xhat * gamma[gi].to_f64() + beta[gi].to_f64());
        }
    }
    (out, means, rstds)
}

fn norm_backward<T: Float>(
    gs: &[T],
    xs: &[T],
    lanes: usize,
    lane: usize,
    gamma: &[T],
    affine_per_lane_elem: bool,
    gamma_of_lane: &dyn Fn(usize) -> usize,
    means: &[f64],
    rstds: &[f64],
    gamma_len: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::ZERO; xs.len()];
    let mut ggamma = vec![0.0f64; gamma_len];
    let mut gbeta = vec![0.0f64; gamma_len];
    for l in 0..lanes {
        let base = l * lane;
        let (mean, rstd) = (means[l], rstds[l]);
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for i in 0..lane {
            let gi = if affine_per_lane_elem { i } else { gamma_of_lane(l) };
            let xhat = (xs[base + i].to_f64() - mean) * rstd;
            let g = gs[base + i].to_f64();
            ggamma[gi] += g * xhat;
            gbeta[gi] += g;
            let dxhat = g * gamma[gi].to_f64();
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let n = lane as f64;
        for i in 0..lane {
            let gi = if affine_per_lane_elem { i } else { gamma_of_lane(l) };
            let xhat = (xs[base + i].to_f64() - mean) * rstd;
            let dxhat = gs[base + i].to_f64() * gamma[gi].to_f64();
            gx[base + i] =
                T::from_f64(rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n));
        }
    }
    let gg: Vec<T> = ggamma.into_iter().map(T::from_f64).collect();
    let gb: Vec<T> = gbeta.into_iter().map(T::from_f64).collect();
    (gx, gg, gb)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let lane = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [lane] || beta.shape() != [lane] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma/beta must have shape [{lane}] (last axis), got {:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    let lanes = x.numel() / lane;
    fn run<T: Float>(x: &Tensor, gamma: &Tensor, beta: &Tensor, lanes: usize, lane: usize, eps: f64) -> Tensor {
        let (out, means, rstds) = {
            let (dx, dg, db) = (x.data(), gamma.data(), beta.data());
            norm_lanes::<T>(T::slice(&dx), lanes, lane, T::slice(&dg), T::slice(&db), true, &|_| 0, eps)
        };
        let node = if autograd_enabled() && (x.on_tape() || gamma.on_tape() || beta.on_tape()) {
            let (xc, gc) = (x.clone(), gamma.clone());
            Some(Node {
                parents: vec![x.clone(), gamma.clone(), beta.clone()],
                backward: Box::new(move |g: &Storage| {
                    let (dx, dg) = (xc.data(), gc.data());
                    let (gx, gg, gb) = norm_backward::<T>(
                        T::slice(g), T::slice(&dx), lanes, lane, T::slice(&dg), true, &|_| 0, &means, &rstds, lane,
                    );
                    vec![Some(T::wrap(gx)), Some(T::wrap(gg)), Some(T::wrap(gb))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(x.shape().to_vec(), T::wrap(out), node)
    }
    float_dispatch("layer_norm", x.dtype(), || run::<f32>(x, gamma, beta, lanes, lane, eps), || run::<f64>(x, gamma, beta, lanes, lane, eps))
}

/// Instance normalization over (H, W) per (batch, channel), NCHW layout.
pub fn instance_norm2d(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("instance_norm2d eps must be > 0, got {eps}")));
    }
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("instance_norm2d", format!("expected [B,C,H,W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "instance_norm2d",
            format!("gamma/beta must have shape [{c}] (channel axis), got {:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    let lanes = b * c;
    let lane = h * w;
    fn run<T: Float>(x: &Tensor, gamma: &Tensor, beta: &Tensor, lanes: usize, lane: usize, c: usize, eps: f64) -> Tensor {
        let of_lane = move |l: usize| l % c;
        let (out, means, rstds) = {
            let (dx, dg, db) = (x.data(), gamma.data(), beta.data());
            norm_lanes::<T>(T::slice(&dx), lanes, lane, T::slice(&dg), T::slice(&db), false, &of_lane, eps)
        };
        let node = if autograd_enabled() && (x.on_tape() || gamma.on_tape() || beta.on_tape()) {
            let (xc, gc) = (x.clone(), gamma.clone());
            Some(Node {
                parents: vec![x.clone(), gamma.clone(), beta.clone()],
                backward: Box::new(move |g: &Storage| {
                    let (dx, dg) = (xc.data(), gc.data());
                    let (gx, gg, gb) = norm_backward::<T>(
                        T::slice(g), T::slice(&dx), lanes, lane, T::slice(&dg), false, &of_lane, &means, &rstds, c,
                    );
                    vec![Some(T::wrap(gx)), Some(T::wrap(gg)), Some(T::wrap(gb))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(x.shape().to_vec(), T::wrap(out), node)
    }
    float_dispatch("instance_norm2d", x.dtype(), || run::<f32>(x, gamma, beta, lanes, lane, c, eps), || run::<f64>(x, gamma, beta, lanes, lane, c, eps))
}

// ── linear ───────────────────────────────────────────────────────────

/// `x[..., d_in] @ w[d_out, d_in]^T + b`, applied over the last axis.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    if xs.is_empty() || w.shape().len() != 2 {
        return Err(Error::shape("linear", format!("x {:?}, w {:?}", xs, w.shape())));
    }
    let d_in = *xs.last().unwrap();
    let (d_out, w_in) = (w.shape()[0], w.shape()[1]);
    if w_in != d_in {
        return Err(Error::shape(
            "linear",
            format!("trailing axis extent {d_in} does not match weight input extent {w_in}"),
        ));
    }
    if let Some(bias) = b {
        if bias.shape() != [d_out] {
            return Err(Error::shape("linear", format!("bias shape {:?}, expected [{d_out}]", bias.shape())));
        }
        if bias.dtype() != x.dtype() {
            return Err(Error::shape("linear", "bias dtype mismatch"));
        }
    }
    if w.dtype() != x.dtype() {
        return Err(Error::shape("linear", "weight dtype mismatch"));
    }
    let rows = x.numel() / d_in;
    flops::add((rows * d_in * d_out) as u64);

    fn run<T: Float>(x: &Tensor, w: &Tensor, b: Option<&Tensor>, rows: usize, d_in: usize, d_out: usize) -> Tensor {
        let mut out = vec![T::ZERO; rows * d_out];
        {
            let (dx, dw) = (x.data(), w.data());
            let (xv, wv) = (T::slice(&dx), T::slice(&dw));
            let bias: Option<Vec<f64>> = b.map(|t| t.to_f64_vec());
            // row chunks in parallel; weights iterate outer within a chunk
            // so each weight row is reused across the whole chunk of rows.
            let chunk_rows = 32.min(rows.max(1));
            out.par_chunks_mut(d_out * chunk_rows)
                .enumerate()
                .for_each(|(chunk_idx, chunk)| {
                    let r0 = chunk_idx * chunk_rows;
                    let n_rows = chunk.len() / d_out;
                    for o in 0..d_out {
                        let wrow = &wv[o * d_in..(o + 1) * d_in];
                        let b0 = bias.as_ref().map(|bv| bv[o]).unwrap_or(0.0);
                        for i in 0..n_rows {
                            let xrow = &xv[(r0 + i) * d_in..(r0 + i + 1) * d_in];
                            chunk[i * d_out + o] = T::from_f64(b0 + super::kernels::dot_f64(xrow, wrow));
                        }
                    }
                });
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let node = if autograd_enabled() && (x.on_tape() || w.on_tape() || b.map(|t| t.on_tape()).unwrap_or(false)) {
            let (xc, wc) = (x.clone(), w.clone());
            let has_bias = b.is_some();
            let mut parents = vec![x.clone(), w.clone()];
            if let Some(bias) = b {
                parents.push(bias.clone());
            }
            Some(Node {
                parents,
                backward: Box::new(move |g: &Storage| {
                    let gs = T::slice(g);
                    let (dx, dw) = (xc.data(), wc.data());
                    let (xv, wv) = (T::slice(&dx), T::slice(&dw));
                    // dx[r,k] = sum_o g[r,o] w[o,k]
                    let mut gx = vec![0.0f64; rows * d_in];
                    for r in 0..rows {
                        let grow = &gs[r * d_out..(r + 1) * d_out];
                        let xgrow = &mut gx[r * d_in..(r + 1) * d_in];
                        for o in 0..d_out {
                            let gv = grow[o].to_f64();
                            if gv == 0.0 {
                                continue;
                            }
                            let wrow = &wv[o * d_in..(o + 1) * d_in];
                            for k in 0..d_in {
                                xgrow[k] += gv * wrow[k].to_f64();
                            }
                        }
                    }
                    // dw[o,k] = sum_r g[r,o] x[r,k]
                    let mut gw = vec![0.0f64; d_out * d_in];
                    for r in 0..rows {
                        let grow = &gs[r * d_out..(r + 1) * d_out];
                        let xrow = &xv[r * d_in..(r + 1) * d_in];
                        for o in 0..d_out {
                            let gv = grow[o].to_f64();
                            if gv == 0.0 {
                                continue;
                            }
                            let wgrow = &mut gw[o * d_in..(o + 1) * d_in];
                            for k in 0..d_in {
                                wgrow[k] += gv * xrow[k].to_f64();
                            }
                        }
                    }
                    let mut grads = vec![
                        Some(T::wrap(gx.into_iter().map(T::from_f64).collect())),
                        Some(T::wrap(gw.into_iter().map(T::from_f64).collect())),
                    ];
                    if has_bias {
                        let mut gb = vec![0.0f64; d_out];
                        for r in 0..rows {
                            for o in 0..d_out {
                                gb[o] += gs[r * d_out + o].to_f64();
                            }
                        }
                        grads.push(Some(T::wrap(gb.into_iter().map(T::from_f64).collect())));
                    }
                    grads
                }),
            })
        } else {
            None
        };
        Tensor::from_op(out_shape, T::wrap(out), node)
    }
    float_dispatch("linear", x.dtype(), || run::<f32>(x, w, b, rows, d_in, d_out), || run::<f64>(x, w, b, rows, d_in, d_out))
}

// ── layout ops (pure index maps; backward is the inverse map) ────────

/// Generic gather: out[i] = x[index[i]]. `index` must be a permutation for
/// the callers in this crate, so backward scatters without collisions.
fn gather_op<T: Float>(x: &Tensor, out_shape: Vec<usize>, index: std::sync::Arc<Vec<u32>>) -> Tensor {
    let out: Vec<T> = {
        let d = x.data();
        let xs = T::slice(&d);
        index.iter().map(|&i| xs[i as usize]).collect()
    };
    let n_in = x.numel();
    let node = if autograd_enabled() && x.on_tape() {
        let idx = index.clone();
        Some(Node {
            parents: vec![x.clone()],
            backward: Box::new(move |g: &Storage| {
                let gs = T::slice(g);
                let mut gx = vec![T::ZERO; n_in];
                for (o, &i) in idx.iter().enumerate() {
                    gx[i as usize] = gs[o];
                }
                vec![Some(T::wrap(gx))]
            }),
        })
    } else {
        None
    };
    Tensor::from_op(out_shape, T::wrap(out), node)
}

pub(crate) fn gather(op: &'static str, x: &Tensor, out_shape: Vec<usize>, index: Vec<u32>) -> Result<Tensor> {
    debug_assert_eq!(out_shape.iter().product::<usize>(), index.len());
    let index = std::sync::Arc::new(index);
    float_dispatch(op, x.dtype(), || gather_op::<f32>(x, out_shape.clone(), index.clone()), || gather_op::<f64>(x, out_shape.clone(), index.clone()))
}

pub fn reshape(x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    let n: usize = new_shape.iter().product();
    if n != x.numel() {
        return Err(Error::shape("reshape", format!("{:?} -> {:?} changes element count", x.shape(), new_shape)));
    }
    if x.dtype() == DType::U8 {
        return Tensor::new(new_shape, x.data().clone());
    }
    fn run<T: Float>(x: &Tensor, new_shape: Vec<usize>) -> Tensor {
        let out: Vec<T> = {
            let d = x.data();
            T::slice(&d).to_vec()
        };
        let node = if autograd_enabled() && x.on_tape() {
            Some(Node {
                parents: vec![x.clone()],
                backward: Box::new(move |g: &Storage| vec![Some(g.clone())]),
            })
        } else {
            None
        };
        Tensor::from_op(new_shape, T::wrap(out), node)
    }
    float_dispatch("reshape", x.dtype(), || run::<f32>(x, new_shape.to_vec()), || run::<f64>(x, new_shape.to_vec()))
}

/// planes-to-interleaved transpose: [B,C,HW] -> [B,HW,C]
fn channels_last_data<T: Float>(xs: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; xs.len()];
    for bi in 0..b {
        let src = &xs[bi * c * hw..(bi + 1) * c * hw];
        let dst = &mut out[bi * c * hw..(bi + 1) * c * hw];
        for ci in 0..c {
            let plane = &src[ci * hw..(ci + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                dst[p * c + ci] = v;
            }
        }
    }
    out
}

/// interleaved-to-planes transpose: [B,HW,C] -> [B,C,HW]
fn channels_first_data<T: Float>(xs: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; xs.len()];
    for bi in 0..b {
        let src = &xs[bi * c * hw..(bi + 1) * c * hw];
        let dst = &mut out[bi * c * hw..(bi + 1) * c * hw];
        for ci in 0..c {
            let plane = &mut dst[ci * hw..(ci + 1) * hw];
            for (p, slot) in plane.iter_mut().enumerate() {
                *slot = src[p * c + ci];
            }
        }
    }
    out
}

/// [B,C,H,W] -> [B,H,W,C]
pub fn nchw_to_nhwc(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("nchw_to_nhwc", format!("expected rank 4, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    fn run<T: Float>(x: &Tensor, b: usize, c: usize, hw: usize, out_shape: Vec<usize>) -> Tensor {
        let out = {
            let d = x.data();
            channels_last_data::<T>(T::slice(&d), b, c, hw)
        };
        let node = if autograd_enabled() && x.on_tape() {
            Some(Node {
                parents: vec![x.clone()],
                backward: Box::new(move |g: &Storage| {
                    vec![Some(T::wrap(channels_first_data::<T>(T::slice(g), b, c, hw)))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(out_shape, T::wrap(out), node)
    }
    float_dispatch("nchw_to_nhwc", x.dtype(), || run::<f32>(x, b, c, h * w, vec![b, h, w, c]), || run::<f64>(x, b, c, h * w, vec![b, h, w, c]))
}

/// [B,H,W,C] -> [B,C,H,W]
pub fn nhwc_to_nchw(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("nhwc_to_nchw", format!("expected rank 4, got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    fn run<T: Float>(x: &Tensor, b: usize, c: usize, hw: usize, out_shape: Vec<usize>) -> Tensor {
        let out = {
            let d = x.data();
            channels_first_data::<T>(T::slice(&d), b, c, hw)
        };
        let node = if autograd_enabled() && x.on_tape() {
            Some(Node {
                parents: vec![x.clone()],
                backward: Box::new(move |g: &Storage| {
                    vec![Some(T::wrap(channels_last_data::<T>(T::slice(g), b, c, hw)))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(out_shape, T::wrap(out), node)
    }
    float_dispatch("nhwc_to_nchw", x.dtype(), || run::<f32>(x, b, c, h * w, vec![b, c, h, w]), || run::<f64>(x, b, c, h * w, vec![b, c, h, w]))
}

/// Concatenate along `axis`; all inputs must agree on the other extents.
pub fn cat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::shape("cat", "no inputs"));
    }
    let rank = xs[0].shape().len();
    if axis >= rank {
        return Err(Error::shape("cat", format!("axis {axis} out of range")));
    }
    for t in xs {
        if t.shape().len() != rank || t.dtype() != xs[0].dtype() {
            return Err(Error::shape("cat", "rank or dtype mismatch"));
        }
        for (a, (&e0, &e1)) in xs[0].shape().iter().zip(t.shape()).enumerate() {
            if a != axis && e0 != e1 {
                return Err(Error::shape("cat", format!("axis {a} extents differ: {e0} vs {e1}")));
            }
        }
    }
    let outer: usize = xs[0].shape()[..axis].iter().product();
    let inner: usize = xs[0].shape()[axis + 1..].iter().product();
    let lanes: Vec<usize> = xs.iter().map(|t| t.shape()[axis]).collect();
    let total_lane: usize = lanes.iter().sum();
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = total_lane;

    fn run<T: Float>(xs: &[&Tensor], out_shape: Vec<usize>, outer: usize, inner: usize, lanes: Vec<usize>, total_lane: usize) -> Tensor {
        let mut out = vec![T::ZERO; outer * total_lane * inner];
        {
            let mut offset = 0usize;
            for (t, &lane) in xs.iter().zip(&lanes) {
                let d = t.data();
                let src = T::slice(&d);
                for o in 0..outer {
                    let dst = &mut out[(o * total_lane + offset) * inner..(o * total_lane + offset + lane) * inner];
                    dst.copy_from_slice(&src[o * lane * inner..(o + 1) * lane * inner]);
                }
                offset += lane;
            }
        }
        let node = if autograd_enabled() && xs.iter().any(|t| t.on_tape()) {
            let lanes_c = lanes.clone();
            Some(Node {
                parents: xs.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(move |g: &Storage| {
                    let gs = T::slice(g);
                    let mut grads = Vec::with_capacity(lanes_c.len());
                    let mut offset = 0usize;
                    for &lane in &lanes_c {
                        let mut gx = vec![T::ZERO; outer * lane * inner];
                        for o in 0..outer {
                            gx[o * lane * inner..(o + 1) * lane * inner].copy_from_slice(
                                &gs[(o * total_lane + offset) * inner..(o * total_lane + offset + lane) * inner],
                            );
                        }
                        grads.push(Some(T::wrap(gx)));
                        offset += lane;
                    }
                    grads
                }),
            })
        } else {
            None
        };
        Tensor::from_op(out_shape, T::wrap(out), node)
    }
    float_dispatch("cat", xs[0].dtype(), || run::<f32>(xs, out_shape.clone(), outer, inner, lanes.clone(), total_lane), || run::<f64>(xs, out_shape.clone(), outer, inner, lanes.clone(), total_lane))
}

/// NHWC 2x2 neighborhood concat: [B,H,W,C] -> [B,H/2,W/2,4C].
/// Slot order within the 4C axis: (dy,dx) = (0,0),(1,0),(0,1),(1,1).
pub fn space_to_channel2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("space_to_channel2", format!("expected [B,H,W,C], got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("space_to_channel2", format!("spatial axes must be even, got H={h}, W={w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(x.numel());
    const SLOTS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    for bi in 0..b {
        for hi in 0..ho {
            for wi in 0..wo {
                for (dy, dx) in SLOTS {
                    for ci in 0..c {
                        idx.push((((bi * h + 2 * hi + dy) * w + 2 * wi + dx) * c + ci) as u32);
                    }
                }
            }
        }
    }
    gather("space_to_channel2", x, vec![b, ho, wo, 4 * c], idx)
}

/// NHWC channel-to-space: [B,H,W,p*p*C] -> [B,pH,pW,C]. The channel block
/// index (dy*p + dx) selects the output cell position.
pub fn channel_to_space(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("channel_to_space", format!("expected [B,H,W,C], got {s:?}")));
    }
    let (b, h, w, cin) = (s[0], s[1], s[2], s[3]);
    if p < 1 || cin % (p * p) != 0 {
        return Err(Error::shape("channel_to_space", format!("channel axis {cin} not divisible by {}x{}", p, p)));
    }
    let c = cin / (p * p);
    let (ho, wo) = (h * p, w * p);
    let mut idx = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for hi in 0..ho {
            for wi in 0..wo {
                let (sy, dy) = (hi / p, hi % p);
                let (sx, dx) = (wi / p, wi % p);
                let block = dy * p + dx;
                for ci in 0..c {
                    idx.push((((bi * h + sy) * w + sx) * cin + block * c + ci) as u32);
                }
            }
        }
    }
    gather("channel_to_space", x, vec![b, ho, wo, c], idx)
}

/// Non-overlapping patch linearization: [B,C,H,W] -> [B,H/p,W/p,p*p*C].
/// Within a patch the layout is pixel-major: (dy*p + dx)*C + c.
pub fn extract_patches(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("extract_patches", format!("expected [B,C,H,W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("extract_patches", format!("spatial axes {h}x{w} not divisible by patch {p}")));
    }
    let (ho, wo) = (h / p, w / p);
    let mut idx = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for hi in 0..ho {
            for wi in 0..wo {
                for dy in 0..p {
                    for dx in 0..p {
                        for ci in 0..c {
                            idx.push((((bi * c + ci) * h + hi * p + dy) * w + wi * p + dx) as u32);
                        }
                    }
                }
            }
        }
    }
    gather("extract_patches", x, vec![b, ho, wo, p * p * c], idx)
}

// ── non-differentiable utilities ─────────────────────────────────────

/// Argmax over the channel axis of [B,K,H,W]; ties resolve to the lowest
/// class index. Produces a u8 label map, so K must be <= 256.
pub fn argmax_channels(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::shape("argmax_channels", format!("expected [B,K,H,W], got {s:?}")));
    }
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    if k > 256 {
        return Err(Error::shape("argmax_channels", format!("{k} classes exceed u8 label range")));
    }
    let data = logits.to_f64_vec();
    let plane = h * w;
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ki in 0..k {
                let v = data[(bi * k + ki) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ki;
                }
            }
            out[bi * plane + p] = best as u8;
        }
    }
    Tensor::from_u8(&[b, h, w], out)
}

/// Nearest-neighbor downsample of a u8 label map [B,H,W] by integer factor.
pub fn nearest_downsample_labels(t: &Tensor, factor: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || t.dtype() != DType::U8 {
        return Err(Error::shape("nearest_downsample_labels", format!("expected u8 [B,H,W], got {s:?}")));
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape("nearest_downsample_labels", format!("{h}x{w} not divisible by {factor}")));
    }
    let (ho, wo) = (h / factor, w / factor);
    let d = t.data();
    let src = match &*d {
        Storage::U8(v) => v,
        _ => unreachable!(),
    };
    let mut out = vec![0u8; b * ho * wo];
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                out[(bi * ho + i) * wo + j] = src[(bi * h + i * factor) * w + j * factor];
            }
        }
    }
    drop(d);
    Tensor::from_u8(&[b, ho, wo], out)
}

/// Inner product of two same-shaped float tensors in f64 (test utility,
/// not on the tape).
pub fn dot_f64(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.to_f64_vec().iter().zip(b.to_f64_vec()).map(|(x, y)| x * y).sum()
}
