//! 2D convolution and transposed convolution.
//!
//! Forward paths are tiled im2col + dot products (grouped convs get a
//! depthwise fast path); gradients are computed gather-style so rayon can
//! parallelize over disjoint output slices without changing reduction order.

use rayon::prelude::*;

use super::{autograd_enabled, flops, Float, Node, Storage, Tensor};
use crate::error::{Error, Result};

const TILE_ELEMS: usize = 1 << 21;

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

fn conv_geometry(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> Result<ConvGeom> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be [B,C,H,W], got {xs:?}")));
    }
    if ws.len() != 4 {
        return Err(Error::shape("conv2d", format!("weight must be [O,C/g,kh,kw], got {ws:?}")));
    }
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if groups == 0 || c % groups != 0 || o % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("channel axes not divisible by groups: C={c}, O={o}, groups={groups}"),
        ));
    }
    if cg != c / groups {
        return Err(Error::shape(
            "conv2d",
            format!("weight channel axis (1) has extent {cg}, expected C/groups = {}", c / groups),
        ));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("padded spatial axes ({}x{}) smaller than kernel ({kh}x{kw})", h + 2 * pad, wd + 2 * pad),
        ));
    }
    if let Some(bt) = bias {
        if bt.shape() != [o] {
            return Err(Error::shape("conv2d", format!("bias axis has extent {:?}, expected [{o}]", bt.shape())));
        }
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom { b, c, h, w: wd, o, kh, kw, stride, pad, groups, ho, wo })
}

fn conv_forward<T: Float>(xv: &[T], wv: &[T], bias: Option<&[T]>, g: ConvGeom) -> Vec<T> {
    let cg = g.c / g.groups;
    let og = g.o / g.groups;
    let k = cg * g.kh * g.kw;
    let opx = g.ho * g.wo;
    let mut out = vec![T::ZERO; g.b * g.o * opx];

    if g.groups == g.c && cg == 1 && og == 1 {
        // depthwise
        let planes: Vec<(usize, usize)> =
            (0..g.b).flat_map(|bi| (0..g.c).map(move |ci| (bi, ci))).collect();
        let chunks: Vec<(usize, &mut [T])> = out.chunks_mut(opx).enumerate().collect();
        chunks.into_par_iter().for_each(|(plane_idx, out_plane)| {
            let (bi, ci) = planes[plane_idx];
            let xplane = &xv[(bi * g.c + ci) * g.h * g.w..(bi * g.c + ci + 1) * g.h * g.w];
            let wk = &wv[ci * g.kh * g.kw..(ci + 1) * g.kh * g.kw];
            let b0 = bias.map(|b| b[ci].to_f64()).unwrap_or(0.0);
            for oi in 0..g.ho {
                for oj in 0..g.wo {
                    let mut acc = b0;
                    for ki in 0..g.kh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj < 0 || jj >= g.w as isize {
                                continue;
                            }
                            acc += xplane[ii as usize * g.w + jj as usize].to_f64()
                                * wk[ki * g.kw + kj].to_f64();
                        }
                    }
                    out_plane[oi * g.wo + oj] = T::from_f64(acc);
                }
            }
        });
        return out;
    }

    let tile_rows = (TILE_ELEMS / (g.wo * k).max(1)).clamp(1, g.ho);
    let mut cols = vec![T::ZERO; tile_rows * g.wo * k];
    for bi in 0..g.b {
        for gi in 0..g.groups {
            let wg = &wv[gi * og * k..(gi + 1) * og * k];
            let mut row0 = 0;
            while row0 < g.ho {
                let rows = tile_rows.min(g.ho - row0);
                let tile_px = rows * g.wo;
                // im2col for this tile
                for r in 0..rows {
                    let oi = row0 + r;
                    for oj in 0..g.wo {
                        let col = &mut cols[(r * g.wo + oj) * k..(r * g.wo + oj + 1) * k];
                        let mut idx = 0;
                        for cc in 0..cg {
                            let xplane = &xv[(bi * g.c + gi * cg + cc) * g.h * g.w
                                ..(bi * g.c + gi * cg + cc + 1) * g.h * g.w];
                            for ki in 0..g.kh {
                                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                for kj in 0..g.kw {
                                    let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                    col[idx] = if ii >= 0 && ii < g.h as isize && jj >= 0 && jj < g.w as isize {
                                        xplane[ii as usize * g.w + jj as usize]
                                    } else {
                                        T::ZERO
                                    };
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
                // dot products: parallel over output-channel chunks; inside
                // each chunk iterate px blocks outer / channels inner so the
                // col block stays cache-hot while weight rows stream once
                // per block.
                const PX_BLOCK: usize = 32;
                let out_base = (bi * g.o + gi * og) * opx + row0 * g.wo;
                let oc_chunk = og.div_ceil(2 * rayon::current_num_threads().max(1)).max(1);
                let mut planes: Vec<&mut [T]> = out[out_base..].chunks_mut(opx).take(og).collect();
                planes.par_chunks_mut(oc_chunk).enumerate().for_each(|(ci, group)| {
                    let oc0 = ci * oc_chunk;
                    let mut px0 = 0;
                    while px0 < tile_px {
                        let pxn = PX_BLOCK.min(tile_px - px0);
                        for (j, chan) in group.iter_mut().enumerate() {
                            let oc = oc0 + j;
                            let wrow = &wg[oc * k..(oc + 1) * k];
                            let b0 = bias.map(|b| b[gi * og + oc].to_f64()).unwrap_or(0.0);
                            for px in px0..px0 + pxn {
                                let col = &cols[px * k..(px + 1) * k];
                                chan[px] = T::from_f64(b0 + super::kernels::dot_f64(col, wrow));
                            }
                        }
                        px0 += pxn;
                    }
                });
                row0 += rows;
            }
        }
    }
    out
}

fn conv_backward<T: Float>(
    gs: &[T],
    xv: &[T],
    wv: &[T],
    g: ConvGeom,
    has_bias: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let cg = g.c / g.groups;
    let og = g.o / g.groups;
    let opx = g.ho * g.wo;

    // dx: gather over contributing output positions
    let mut gx = vec![T::ZERO; g.b * g.c * g.h * g.w];
    {
        let planes: Vec<(usize, usize)> =
            (0..g.b).flat_map(|bi| (0..g.c).map(move |ci| (bi, ci))).collect();
        let chunks: Vec<(usize, &mut [T])> = gx.chunks_mut(g.h * g.w).enumerate().collect();
        chunks.into_par_iter().for_each(|(plane_idx, gplane)| {
            let (bi, ci) = planes[plane_idx];
            let gi = ci / cg;
            let cc = ci % cg;
            for i in 0..g.h {
                for j in 0..g.w {
                    let mut acc = 0.0f64;
                    for ki in 0..g.kh {
                        let num_i = i + g.pad;
                        if num_i < ki {
                            continue;
                        }
                        let oi_num = num_i - ki;
                        if oi_num % g.stride != 0 {
                            continue;
                        }
                        let oi = oi_num / g.stride;
                        if oi >= g.ho {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let num_j = j + g.pad;
                            if num_j < kj {
                                continue;
                            }
                            let oj_num = num_j - kj;
                            if oj_num % g.stride != 0 {
                                continue;
                            }
                            let oj = oj_num / g.stride;
                            if oj >= g.wo {
                                continue;
                            }
                            for oc in 0..og {
                                let o = gi * og + oc;
                                acc += gs[(bi * g.o + o) * opx + oi * g.wo + oj].to_f64()
                                    * wv[((o * cg + cc) * g.kh + ki) * g.kw + kj].to_f64();
                            }
                        }
                    }
                    gplane[i * g.w + j] = T::from_f64(acc);
                }
            }
        });
    }

    // dw: gather over batch and output positions, parallel over out channels
    let mut gw = vec![T::ZERO; g.o * cg * g.kh * g.kw];
    gw.par_chunks_mut(cg * g.kh * g.kw).enumerate().for_each(|(o, wchan)| {
        let gi = o / og;
        for cc in 0..cg {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let mut acc = 0.0f64;
                    for bi in 0..g.b {
                        let gplane = &gs[(bi * g.o + o) * opx..(bi * g.o + o + 1) * opx];
                        let xplane = &xv[(bi * g.c + gi * cg + cc) * g.h * g.w
                            ..(bi * g.c + gi * cg + cc + 1) * g.h * g.w];
                        for oi in 0..g.ho {
                            let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                            if ii < 0 || ii >= g.h as isize {
                                continue;
                            }
                            for oj in 0..g.wo {
                                let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                if jj < 0 || jj >= g.w as isize {
                                    continue;
                                }
                                acc += gplane[oi * g.wo + oj].to_f64()
                                    * xplane[ii as usize * g.w + jj as usize].to_f64();
                            }
                        }
                    }
                    wchan[(cc * g.kh + ki) * g.kw + kj] = T::from_f64(acc);
                }
            }
        }
    });

    let gb = if has_bias {
        let mut gb = vec![0.0f64; g.o];
        for bi in 0..g.b {
            for o in 0..g.o {
                let plane = &gs[(bi * g.o + o) * opx..(bi * g.o + o + 1) * opx];
                gb[o] += plane.iter().map(|v| v.to_f64()).sum::<f64>();
            }
        }
        Some(gb.into_iter().map(T::from_f64).collect())
    } else {
        None
    };

    (gx, gw, gb)
}

/// 2D convolution, NCHW. `w` is `[O, C/groups, kh, kw]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let geom = conv_geometry(x, w, bias, stride, pad, groups)?;
    if w.dtype() != x.dtype() || bias.map(|b| b.dtype() != x.dtype()).unwrap_or(false) {
        return Err(Error::shape("conv2d", "operand dtype mismatch"));
    }
    flops::add((geom.b * geom.o * geom.ho * geom.wo * (geom.c / geom.groups) * geom.kh * geom.kw) as u64);

    fn run<T: Float>(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Tensor {
        let out = {
            let (dx, dw) = (x.data(), w.data());
            let db = bias.map(|b| b.data());
            conv_forward::<T>(T::slice(&dx), T::slice(&dw), db.as_ref().map(|d| T::slice(d)), geom)
        };
        let out_shape = vec![geom.b, geom.o, geom.ho, geom.wo];
        let on_tape = x.on_tape() || w.on_tape() || bias.map(|b| b.on_tape()).unwrap_or(false);
        let node = if autograd_enabled() && on_tape {
            let (xc, wc) = (x.clone(), w.clone());
            let has_bias = bias.is_some();
            let mut parents = vec![x.clone(), w.clone()];
            if let Some(b) = bias {
                parents.push(b.clone());
            }
            Some(Node {
                parents,
                backward: Box::new(move |gout: &Storage| {
                    let (dx, dw) = (xc.data(), wc.data());
                    let (gx, gw, gb) =
                        conv_backward::<T>(T::slice(gout), T::slice(&dx), T::slice(&dw), geom, has_bias);
                    let mut grads = vec![Some(T::wrap(gx)), Some(T::wrap(gw))];
                    if let Some(gb) = gb {
                        grads.push(Some(T::wrap(gb)));
                    }
                    grads
                }),
            })
        } else {
            None
        };
        Tensor::from_op(out_shape, T::wrap(out), node)
    }
    match x.dtype() {
        super::DType::F32 => Ok(run::<f32>(x, w, bias, geom)),
        super::DType::F64 => Ok(run::<f64>(x, w, bias, geom)),
        super::DType::U8 => Err(Error::shape("conv2d", "u8 input")),
    }
}

/// Transposed 2D convolution with kernel == stride (the up-sampling
/// convention used by the decoders: every output pixel receives exactly one
/// kernel tap). `w` is `[Cin, Cout, k, k]`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape("conv_transpose2d", format!("x {xs:?}, w {ws:?}")));
    }
    if stride < 1 {
        return Err(Error::Config("conv_transpose2d stride must be >= 1".into()));
    }
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (wcin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("weight input-channel axis (0) has extent {wcin}, input has {cin}"),
        ));
    }
    if kh != stride || kw != stride {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("kernel {kh}x{kw} must equal stride {stride} under the up-sample convention"),
        ));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::shape("conv_transpose2d", format!("bias shape {:?}, expected [{cout}]", bt.shape())));
        }
    }
    let (ho, wo) = (h * stride, wd * stride);
    flops::add((b * cout * ho * wo * cin) as u64);

    fn run<T: Float>(
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        dims: (usize, usize, usize, usize, usize, usize),
    ) -> Tensor {
        let (b, cin, h, wd, cout, s) = dims;
        let (ho, wo) = (h * s, wd * s);
        let mut out = vec![T::ZERO; b * cout * ho * wo];
        {
            let (dx, dw) = (x.data(), w.data());
            let (xv, wv) = (T::slice(&dx), T::slice(&dw));
            let db = bias.map(|t| t.to_f64_vec());
            let planes: Vec<(usize, usize)> =
                (0..b).flat_map(|bi| (0..cout).map(move |co| (bi, co))).collect();
            let chunks: Vec<(usize, &mut [T])> = out.chunks_mut(ho * wo).enumerate().collect();
            chunks.into_par_iter().for_each(|(plane_idx, plane)| {
                let (bi, co) = planes[plane_idx];
                let b0 = db.as_ref().map(|v| v[co]).unwrap_or(0.0);
                for oi in 0..ho {
                    let (i, ki) = (oi / s, oi % s);
                    for oj in 0..wo {
                        let (j, kj) = (oj / s, oj % s);
                        let mut acc = b0;
                        for ci in 0..cin {
                            acc += xv[((bi * cin + ci) * h + i) * wd + j].to_f64()
                                * wv[((ci * cout + co) * s + ki) * s + kj].to_f64();
                        }
                        plane[oi * wo + oj] = T::from_f64(acc);
                    }
                }
            });
        }
        let on_tape = x.on_tape() || w.on_tape() || bias.map(|t| t.on_tape()).unwrap_or(false);
        let node = if autograd_enabled() && on_tape {
            let (xc, wc) = (x.clone(), w.clone());
            let has_bias = bias.is_some();
            let mut parents = vec![x.clone(), w.clone()];
            if let Some(bt) = bias {
                parents.push(bt.clone());
            }
            Some(Node {
                parents,
                backward: Box::new(move |gout: &Storage| {
                    let gs = T::slice(gout);
                    let (dx, dw) = (xc.data(), wc.data());
                    let (xv, wv) = (T::slice(&dx), T::slice(&dw));
                    // dx[b,ci,i,j] = sum_{co,ki,kj} g[b,co,i*s+ki,j*s+kj] w[ci,co,ki,kj]
                    let mut gx = vec![T::ZERO; b * cin * h * wd];
                    for bi in 0..b {
                        for ci in 0..cin {
                            for i in 0..h {
                                for j in 0..wd {
                                    let mut acc = 0.0f64;
                                    for co in 0..cout {
                                        for ki in 0..s {
                                            for kj in 0..s {
                                                acc += gs[((bi * cout + co) * ho + i * s + ki) * wo + j * s + kj].to_f64()
                                                    * wv[((ci * cout + co) * s + ki) * s + kj].to_f64();
                                            }
                                        }
                                    }
                                    gx[((bi * cin + ci) * h + i) * wd + j] = T::from_f64(acc);
                                }
                            }
                        }
                    }
                    let mut gw = vec![T::ZERO; cin * cout * s * s];
                    for ci in 0..cin {
                        for co in 0..cout {
                            for ki in 0..s {
                                for kj in 0..s {
                                    let mut acc = 0.0f64;
                                    for bi in 0..b {
                                        for i in 0..h {
                                            for j in 0..wd {
                                                acc += xv[((bi * cin + ci) * h + i) * wd + j].to_f64()
                                                    * gs[((bi * cout + co) * ho + i * s + ki) * wo + j * s + kj].to_f64();
                                            }
                                        }
                                    }
                                    gw[((ci * cout + co) * s + ki) * s + kj] = T::from_f64(acc);
                                }
                            }
                        }
                    }
                    let mut grads = vec![Some(T::wrap(gx)), Some(T::wrap(gw))];
                    if has_bias {
                        let mut gb = vec![0.0f64; cout];
                        for bi in 0..b {
                            for co in 0..cout {
                                let plane = &gs[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                                gb[co] += plane.iter().map(|v| v.to_f64()).sum::<f64>();
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
        Tensor::from_op(vec![b, cout, ho, wo], T::wrap(out), node)
    }
    let dims = (b, cin, h, wd, cout, stride);
    match x.dtype() {
        super::DType::F32 => Ok(run::<f32>(x, w, bias, dims)),
        super::DType::F64 => Ok(run::<f64>(x, w, bias, dims)),
        super::DType::U8 => Err(Error::shape("conv_transpose2d", "u8 input")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn t64(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn ones_kernel_center_sums_to_nine() {
        let x = t64(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = t64(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_f64_vec()[4], 9.0); // center
        assert_eq!(y.to_f64_vec()[0], 4.0); // corner
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = t64(&[1, 1, 4, 4], (0..16).map(|i| i as f64).collect());
        let w = t64(&[1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn stride_arith_and_shape_errors() {
        let x = t64(&[1, 3, 8, 8], vec![0.0; 192]);
        let w = t64(&[4, 3, 3, 3], vec![0.0; 108]);
        let y = conv2d(&x, &w, None, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4]);

        let bad_w = t64(&[4, 2, 3, 3], vec![0.0; 72]);
        let err = conv2d(&x, &bad_w, None, 1, 1, 1).unwrap_err();
        assert!(err.to_string().contains("axis"), "error should name the axis: {err}");

        // kernel larger than padded input
        let tiny = t64(&[1, 1, 2, 2], vec![0.0; 4]);
        let big = t64(&[1, 1, 5, 5], vec![0.0; 25]);
        assert!(conv2d(&tiny, &big, None, 1, 1, 1).is_err());
    }

    #[test]
    fn depthwise_matches_grouped_general_path() {
        // groups == C exercises the fast path; compare against groups=1 with
        // a block-diagonal kernel.
        let x = t64(&[1, 2, 4, 4], (0..32).map(|i| (i as f64) * 0.1).collect());
        let wd = t64(&[2, 1, 3, 3], (0..18).map(|i| (i as f64) * 0.01 - 0.05).collect());
        let y = conv2d(&x, &wd, None, 1, 1, 2).unwrap();

        let mut dense = vec![0.0; 2 * 2 * 9];
        let wv = wd.to_f64_vec();
        for c in 0..2 {
            for k in 0..9 {
                dense[(c * 2 + c) * 9 + k] = wv[c * 9 + k];
            }
        }
        let wfull = t64(&[2, 2, 3, 3], dense);
        let y2 = conv2d(&x, &wfull, None, 1, 1, 1).unwrap();
        let (a, b) = (y.to_f64_vec(), y2.to_f64_vec());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_scatters_on_stride_grid() {
        let x = t64(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut wv = vec![0.0; 4];
        wv[0] = 1.0; // only tap (0,0)
        let w = t64(&[1, 1, 2, 2], wv);
        let y = conv_transpose2d(&x, &w, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let v = y.to_f64_vec();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[2], 2.0);
        assert_eq!(v[8], 3.0);
        assert_eq!(v[10], 4.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[5], 0.0);
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        // <conv(x,w), y> == <x, conv_T(y,w)> with k = stride, pad 0
        let mut rng = crate::rng::Stream::new(42);
        for &(c, o, s, h) in &[(3usize, 4usize, 2usize, 6usize), (2, 2, 3, 9)] {
            let x = t64(&[2, c, h, h], (0..2 * c * h * h).map(|_| rng.normal()).collect());
            let w = t64(&[o, c, s, s], (0..o * c * s * s).map(|_| rng.normal()).collect());
            let ho = h / s;
            let y = t64(&[2, o, ho, ho], (0..2 * o * ho * ho).map(|_| rng.normal()).collect());

            let cx = conv2d(&x, &w, None, s, 0, 1).unwrap();
            // conv_transpose2d expects w as [Cin=O, Cout=C]; adjoint uses the
            // same array reinterpreted, which matches [O, C, s, s].
            let ty = conv_transpose2d(&y, &w, None, s).unwrap();
            let lhs = ops::dot_f64(&cx, &y);
            let rhs = ops::dot_f64(&x, &ty);
            assert!((lhs - rhs).abs() < 1e-10, "adjoint identity violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn flops_count_conv_and_deconv() {
        let x = t64(&[1, 4, 8, 8], vec![0.0; 256]);
        let w = t64(&[2, 4, 1, 1], vec![0.0; 8]);
        let ((), n) = crate::tensor::flops::counted(|| {
            conv2d(&x, &w, None, 1, 0, 1).unwrap();
        });
        assert_eq!(n, 4 * 2 * 64);

        let wt = t64(&[4, 2, 2, 2], vec![0.0; 32]);
        let ((), n) = crate::tensor::flops::counted(|| {
            conv_transpose2d(&x, &wt, None, 2).unwrap();
        });
        assert_eq!(n, (2 * 16 * 16 * 4) as u64);
    }
}
