//! The four-direction 2D selective scan operator: unfold the feature map
//! along four scan orders, run S6 over each sequence, fold the results back
//! to spatial layout and sum.

pub mod scan;

pub use scan::{s6_scan_parallel, s6_scan_sequential, S6Params, ScanMode};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{autograd_enabled, DType, Float, Node, Storage, Tensor};

/// One of the four patch scan orders. Directions 3 and 4 are the exact
/// reversals of 1 and 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    RowMajor = 1,
    ColMajor = 2,
    RowMajorRev = 3,
    ColMajorRev = 4,
}

impl ScanDirection {
    pub fn all() -> [ScanDirection; 4] {
        [
            ScanDirection::RowMajor,
            ScanDirection::ColMajor,
            ScanDirection::RowMajorRev,
            ScanDirection::ColMajorRev,
        ]
    }

    pub fn id(self) -> usize {
        self as usize
    }

    /// Permutation from sequence position to flat spatial index: the k-th
    /// element of the scan reads pixel `perm[k]` of the H*W grid.
    pub fn perm(self, h: usize, w: usize) -> Vec<u32> {
        let hw = h * w;
        match self {
            ScanDirection::RowMajor => (0..hw as u32).collect(),
            ScanDirection::ColMajor => {
                let mut p = Vec::with_capacity(hw);
                for j in 0..w {
                    for i in 0..h {
                        p.push((i * w + j) as u32);
                    }
                }
                p
            }
            ScanDirection::RowMajorRev => (0..hw as u32).rev().collect(),
            ScanDirection::ColMajorRev => {
                let mut p = ScanDirection::ColMajor.perm(h, w);
                p.reverse();
                p
            }
        }
    }

    /// Inverse permutation: pixel p of the grid sits at sequence position
    /// `inv[p]`.
    pub fn inv_perm(self, h: usize, w: usize) -> Vec<u32> {
        let p = self.perm(h, w);
        let mut inv = vec![0u32; p.len()];
        for (k, &src) in p.iter().enumerate() {
            inv[src as usize] = k as u32;
        }
        inv
    }
}

/// Per-direction parameter sets sharing (d, N).
#[derive(Clone)]
pub struct Ss2dParams {
    pub dirs: [S6Params; 4],
}

impl Ss2dParams {
    pub fn init(d_inner: usize, d_state: usize, dt_rank: usize, rng: &mut Stream, dtype: DType) -> Result<Ss2dParams> {
        Ok(Ss2dParams {
            dirs: [
                S6Params::init(d_inner, d_state, dt_rank, rng, dtype)?,
                S6Params::init(d_inner, d_state, dt_rank, rng, dtype)?,
                S6Params::init(d_inner, d_state, dt_rank, rng, dtype)?,
                S6Params::init(d_inner, d_state, dt_rank, rng, dtype)?,
            ],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.dirs[0].d_inner, self.dirs[0].d_state);
        for (i, p) in self.dirs.iter().enumerate() {
            p.validate()?;
            if p.d_inner != d || p.d_state != n {
                return Err(Error::Config(format!(
                    "ss2d direction {} has (d={}, N={}), direction 1 has (d={d}, N={n})",
                    i + 1,
                    p.d_inner,
                    p.d_state
                )));
            }
        }
        Ok(())
    }
}

/// Unfold image patches along direction `v`: [B,d,H,W] -> [B,HW,d].
/// Pure permutation + reshape, no arithmetic.
pub fn expand(z: &Tensor, v: ScanDirection) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 4 {
        return Err(Error::shape("expand", format!("expected [B,d,H,W], got {s:?}")));
    }
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    fn run<T: Float>(z: &Tensor, v: ScanDirection, b: usize, d: usize, h: usize, w: usize) -> Tensor {
        let hw = h * w;
        let perm = v.perm(h, w);
        let out: Vec<T> = {
            let dz = z.data();
            let zv = T::slice(&dz);
            let mut out = vec![T::ZERO; b * hw * d];
            for bi in 0..b {
                let src = &zv[bi * d * hw..(bi + 1) * d * hw];
                let dst = &mut out[bi * hw * d..(bi + 1) * hw * d];
                for (k, &p) in perm.iter().enumerate() {
                    let row = &mut dst[k * d..(k + 1) * d];
                    for (ch, slot) in row.iter_mut().enumerate() {
                        *slot = src[ch * hw + p as usize];
                    }
                }
            }
            out
        };
        let node = if autograd_enabled() && z.on_tape() {
            Some(Node {
                parents: vec![z.clone()],
                backward: Box::new(move |g: &Storage| {
                    let gs = T::slice(g);
                    let mut gz = vec![T::ZERO; b * d * hw];
                    for bi in 0..b {
                        let src = &gs[bi * hw * d..(bi + 1) * hw * d];
                        let dst = &mut gz[bi * d * hw..(bi + 1) * d * hw];
                        for (k, &p) in perm.iter().enumerate() {
                            let row = &src[k * d..(k + 1) * d];
                            for (ch, &v) in row.iter().enumerate() {
                                dst[ch * hw + p as usize] = v;
                            }
                        }
                    }
                    vec![Some(T::wrap(gz))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(vec![b, hw, d], T::wrap(out), node)
    }
    match z.dtype() {
        DType::F32 => Ok(run::<f32>(z, v, b, d, h, w)),
        DType::F64 => Ok(run::<f64>(z, v, b, d, h, w)),
        DType::U8 => Err(Error::shape("expand", "u8 input")),
    }
}

/// Fold four scanned sequences back to spatial layout and sum:
/// [B,HW,d] x4 -> [B,d,H,W]. The sum runs in fixed direction order.
pub fn merge(ys: [&Tensor; 4], h: usize, w: usize) -> Result<Tensor> {
    let s0 = ys[0].shape().to_vec();
    for y in &ys {
        if y.shape() != s0.as_slice() {
            return Err(Error::shape("merge", format!("inputs differ: {:?} vs {:?}", y.shape(), s0)));
        }
        if y.dtype() != ys[0].dtype() {
            return Err(Error::shape("merge", "input dtype mismatch"));
        }
    }
    if s0.len() != 3 || s0[1] != h * w {
        return Err(Error::shape("merge", format!("expected [B,{},d] inputs for {h}x{w}, got {s0:?}", h * w)));
    }
    let (b, hw, d) = (s0[0], s0[1], s0[2]);
    let invs: Vec<Vec<u32>> = ScanDirection::all().iter().map(|v| v.inv_perm(h, w)).collect();

    fn run<T: Float>(ys: [&Tensor; 4], invs: &[Vec<u32>], b: usize, hw: usize, d: usize, h: usize, w: usize) -> Tensor {
        let mut out = vec![0.0f64; b * d * hw];
        for (y, inv) in ys.iter().zip(invs) {
            let dy = y.data();
            let yv = T::slice(&dy);
            for bi in 0..b {
                for p in 0..hw {
                    let k = inv[p] as usize;
                    let row = &yv[(bi * hw + k) * d..(bi * hw + k + 1) * d];
                    for ch in 0..d {
                        out[(bi * d + ch) * hw + p] += row[ch].to_f64();
                    }
                }
            }
        }
        let out: Vec<T> = out.into_iter().map(T::from_f64).collect();
        let node = if autograd_enabled() && ys.iter().any(|t| t.on_tape()) {
            let perms: Vec<Vec<u32>> = ScanDirection::all().iter().map(|v| v.perm(h, w)).collect();
            Some(Node {
                parents: ys.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(move |gout: &Storage| {
                    let gs = T::slice(gout);
                    let mut grads = Vec::with_capacity(4);
                    for perm in &perms {
                        let mut gy = vec![T::ZERO; b * hw * d];
                        for bi in 0..b {
                            for k in 0..hw {
                                let p = perm[k] as usize;
                                let dst = &mut gy[(bi * hw + k) * d..(bi * hw + k + 1) * d];
                                for (ch, slot) in dst.iter_mut().enumerate() {
                                    *slot = gs[(bi * d + ch) * hw + p];
                                }
                            }
                        }
                        grads.push(Some(T::wrap(gy)));
                    }
                    grads
                }),
            })
        } else {
            None
        };
        Tensor::from_op(vec![b, d, h, w], T::wrap(out), node)
    }
    match ys[0].dtype() {
        DType::F32 => Ok(run::<f32>(ys, &invs, b, hw, d, h, w)),
        DType::F64 => Ok(run::<f64>(ys, &invs, b, hw, d, h, w)),
        DType::U8 => Err(Error::shape("merge", "u8 input")),
    }
}

/// SS2D: merge over v of S6(expand(z, v)); differentiable end to end.
pub fn ss2d(z: &Tensor, p: &Ss2dParams) -> Result<Tensor> {
    p.validate()?;
    let s = z.shape();
    if s.len() != 4 {
        return Err(Error::shape("ss2d", format!("expected [B,d,H,W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let mut outs = Vec::with_capacity(4);
    for (v, params) in ScanDirection::all().iter().zip(&p.dirs) {
        let seq = expand(z, *v)?;
        outs.push(s6_scan_sequential(&seq, params)?);
    }
    merge([&outs[0], &outs[1], &outs[2], &outs[3]], h, w)
}
