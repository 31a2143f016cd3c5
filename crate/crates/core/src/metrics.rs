//! Segmentation metrics: Dice similarity coefficient, normalized surface
//! distance (boundary agreement within a pixel tolerance), and instance F1
//! with greedy IoU matching.
//!
//! NSD uses an exact squared Euclidean distance transform (two-pass lower
//! envelope), so it agrees with brute-force boundary distances exactly.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_NSD_TOLERANCE: f64 = 2.0;

/// 2|P ∩ G| / (|P| + |G|); both masks empty -> 1.0 by convention.
pub fn dsc(pred: &[bool], gt: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (p + g) as f64
}

/// Boundary pixels: mask pixels with a 4-neighbor outside the mask
/// (out-of-image counts as outside).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            let outside = (i == 0 || !mask[(i - 1) * w + j])
                || (i + 1 == h || !mask[(i + 1) * w + j])
                || (j == 0 || !mask[i * w + j - 1])
                || (j + 1 == w || !mask[i * w + j + 1]);
            out[i * w + j] = outside;
        }
    }
    out
}

/// 1D squared-distance lower envelope (exact EDT building block).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let s = ((f[q] + (q * q) as f64) - (f[v[k]] + (v[k] * v[k]) as f64)) / (2.0 * q as f64 - 2.0 * v[k] as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for (q, slot) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *slot = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest seed pixel.
pub fn edt_squared(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = 1e18;
    let mut dist: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    // columns
    let mut col = vec![0.0f64; h];
    let mut colo = vec![0.0f64; h];
    for j in 0..w {
        for i in 0..h {
            col[i] = dist[i * w + j];
        }
        edt_1d(&col, &mut colo);
        for i in 0..h {
            dist[i * w + j] = colo[i];
        }
    }
    // rows
    let mut rowo = vec![0.0f64; w];
    for i in 0..h {
        edt_1d(&dist[i * w..(i + 1) * w].to_vec(), &mut rowo);
        dist[i * w..(i + 1) * w].copy_from_slice(&rowo);
    }
    dist
}

/// Fraction of each mask's boundary lying within `tol` (Euclidean pixels)
/// of the other mask's boundary, symmetric-averaged over both boundaries.
/// Empty-vs-nonempty -> 0.0; both empty -> 1.0.
pub fn nsd(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: f64) -> Result<f64> {
    if tol <= 0.0 {
        return Err(Error::Config(format!("nsd tolerance must be > 0, got {tol}")));
    }
    let p_any = pred.iter().any(|&v| v);
    let g_any = gt.iter().any(|&v| v);
    if !p_any && !g_any {
        return Ok(1.0);
    }
    if p_any != g_any {
        return Ok(0.0);
    }
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let dp = edt_squared(&bp, h, w);
    let dg = edt_squared(&bg, h, w);
    let t2 = tol * tol;
    let mut hits = 0usize;
    let mut total = 0usize;
    for p in 0..h * w {
        if bp[p] {
            total += 1;
            hits += (dg[p] <= t2) as usize;
        }
        if bg[p] {
            total += 1;
            hits += (dp[p] <= t2) as usize;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// 4-connected component labeling of a binary mask; components get ids
/// 1.. in scan order (deterministic).
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    let mut labels = vec![0u32; h * w];
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            let mut push = |q: usize| {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if i > 0 {
                push(p - w);
            }
            if i + 1 < h {
                push(p + w);
            }
            if j > 0 {
                push(p - 1);
            }
            if j + 1 < w {
                push(p + 1);
            }
        }
        next += 1;
    }
    labels
}

/// Greedy one-to-one matching by IoU >= threshold, F1 = 2TP/(2TP+FP+FN).
/// Instances are positive integer ids; both maps empty -> 1.0.
pub fn instance_f1(pred: &[u32], gt: &[u32], iou_thresh: f64) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    use std::collections::HashMap;
    let mut p_area: HashMap<u32, usize> = HashMap::new();
    let mut g_area: HashMap<u32, usize> = HashMap::new();
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 0 {
            *p_area.entry(p).or_default() += 1;
        }
        if g > 0 {
            *g_area.entry(g).or_default() += 1;
        }
        if p > 0 && g > 0 {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let np = p_area.len();
    let ng = g_area.len();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    // candidate pairs sorted by IoU descending, deterministic tie-break
    let mut pairs: Vec<(f64, u32, u32)> = inter
        .iter()
        .map(|(&(g, p), &i)| {
            let union = g_area[&g] + p_area[&p] - i;
            (i as f64 / union as f64, g, p)
        })
        .filter(|(iou, _, _)| *iou >= iou_thresh)
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_g = std::collections::HashSet::new();
    let mut used_p = std::collections::HashSet::new();
    let mut tp = 0usize;
    for (_, g, p) in pairs {
        if !used_g.contains(&g) && !used_p.contains(&p) {
            used_g.insert(g);
            used_p.insert(p);
            tp += 1;
        }
    }
    let fp = np - tp;
    let fn_ = ng - tp;
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Per-class and mean DSC/NSD over a set of samples, plus instance F1 for
/// instance tasks. All values lie in [0, 1].
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub per_class_dsc: Vec<f64>,
    pub mean_dsc: f64,
    pub per_class_nsd: Vec<f64>,
    pub mean_nsd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

impl MetricReport {
    /// Aggregates per-sample label maps. `preds`/`gts` hold u8 labels of
    /// identical [H,W] per sample; classes 1..K-1 are scored (background
    /// excluded), averaging per-sample metrics over the whole set.
    pub fn evaluate(preds: &[Vec<u8>], gts: &[Vec<u8>], h: usize, w: usize, k: usize, tol: f64) -> Result<MetricReport> {
        if preds.len() != gts.len() || preds.is_empty() {
            return Err(Error::Data("evaluate needs matched, non-empty prediction/target sets".into()));
        }
        let classes = k.saturating_sub(1).max(1);
        let mut dsc_sum = vec![0.0f64; classes];
        let mut nsd_sum = vec![0.0f64; classes];
        for (pv, gv) in preds.iter().zip(gts) {
            if pv.len() != h * w || gv.len() != h * w {
                return Err(Error::Data("sample extents disagree with h*w".into()));
            }
            for ki in 1..k.max(2) {
                let pm: Vec<bool> = pv.iter().map(|&v| v as usize == ki).collect();
                let gm: Vec<bool> = gv.iter().map(|&v| v as usize == ki).collect();
                dsc_sum[ki - 1] += dsc(&pm, &gm);
                nsd_sum[ki - 1] += nsd(&pm, &gm, h, w, tol)?;
            }
        }
        let n = preds.len() as f64;
        let per_class_dsc: Vec<f64> = dsc_sum.iter().map(|s| s / n).collect();
        let per_class_nsd: Vec<f64> = nsd_sum.iter().map(|s| s / n).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(MetricReport {
            mean_dsc: mean(&per_class_dsc),
            mean_nsd: mean(&per_class_nsd),
            per_class_dsc,
            per_class_nsd,
            f1: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, coords: &[(usize, usize)]) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for &(i, j) in coords {
            m[i * w + j] = true;
        }
        m
    }

    #[test]
    fn dsc_identical_disjoint_partial() {
        let a = mask(3, 3, &[(0, 0), (0, 1)]);
        let b = mask(3, 3, &[(0, 1), (0, 2)]);
        let empty = vec![false; 9];
        assert_eq!(dsc(&a, &a), 1.0);
        assert_eq!(dsc(&a, &mask(3, 3, &[(2, 2)])), 0.0);
        assert_eq!(dsc(&a, &b), 0.5); // 2*1/(2+2)
        assert_eq!(dsc(&empty, &empty), 1.0);
        assert_eq!(dsc(&a, &empty), 0.0);
    }

    #[test]
    fn nsd_identity_and_empties() {
        let a = mask(4, 4, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        let empty = vec![false; 16];
        assert_eq!(nsd(&a, &a, 4, 4, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&empty, &empty, 4, 4, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &empty, 4, 4, 2.0).unwrap(), 0.0);
        assert!(nsd(&a, &a, 4, 4, 0.0).is_err());
    }

    #[test]
    fn nsd_translation_within_tolerance_is_one() {
        // 3x2 rectangle translated by 1 pixel: all boundary distances <= 1
        let a = mask(8, 8, &[(2, 2), (2, 3), (2, 4), (3, 2), (3, 3), (3, 4)]);
        let b = mask(8, 8, &[(3, 2), (3, 3), (3, 4), (4, 2), (4, 3), (4, 4)]);
        assert_eq!(nsd(&a, &b, 8, 8, 2.0).unwrap(), 1.0);
        // far translation drops below 1
        let c = mask(8, 8, &[(6, 6), (6, 7), (7, 6), (7, 7)]);
        assert!(nsd(&a, &c, 8, 8, 2.0).unwrap() < 1.0);
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = crate::rng::Stream::new(17);
        for _ in 0..20 {
            let (h, w) = (1 + rng.index(8), 1 + rng.index(8));
            let seeds: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.3).collect();
            if !seeds.iter().any(|&s| s) {
                continue;
            }
            let fast = edt_squared(&seeds, h, w);
            for i in 0..h {
                for j in 0..w {
                    let mut best = f64::INFINITY;
                    for si in 0..h {
                        for sj in 0..w {
                            if seeds[si * w + sj] {
                                let d = (i as f64 - si as f64).powi(2) + (j as f64 - sj as f64).powi(2);
                                best = best.min(d);
                            }
                        }
                    }
                    assert_eq!(fast[i * w + j], best, "({i},{j}) in {h}x{w}");
                }
            }
        }
    }

    #[test]
    fn f1_basic_cases() {
        let a: Vec<u32> = vec![1, 1, 0, 2, 2, 0];
        assert_eq!(instance_f1(&a, &a, 0.5), 1.0);
        let empty = vec![0u32; 6];
        assert_eq!(instance_f1(&empty, &a, 0.5), 0.0);
        assert_eq!(instance_f1(&empty, &empty, 0.5), 1.0);
        // 2 gt instances, 1 matching pred: F1 = 2*1/(2*1+0+1) = 2/3
        let pred = vec![1, 1, 0, 0, 0, 0];
        let f1 = instance_f1(&pred, &a, 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_requires_iou_threshold() {
        // overlap 1 px, union 3 px -> IoU 1/3 < 0.5: no match
        let gt = vec![1, 1, 0, 0];
        let pred = vec![0, 2, 2, 0];
        assert_eq!(instance_f1(&pred, &gt, 0.5), 0.0);
        // IoU 2/2 = 1.0 with different ids still matches
        let pred2 = vec![7, 7, 0, 0];
        assert_eq!(instance_f1(&pred2, &gt, 0.5), 1.0);
    }

    #[test]
    fn metrics_symmetry() {
        let mut rng = crate::rng::Stream::new(23);
        for _ in 0..30 {
            let (h, w) = (4 + rng.index(5), 4 + rng.index(5));
            let a: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.4).collect();
            let b: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.4).collect();
            assert_eq!(dsc(&a, &b), dsc(&b, &a));
            let n1 = nsd(&a, &b, h, w, 1.5).unwrap();
            let n2 = nsd(&b, &a, h, w, 1.5).unwrap();
            assert!((n1 - n2).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&n1));
        }
    }
}
