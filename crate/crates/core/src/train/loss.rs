//! Segmentation loss: soft Dice plus cross-entropy, with deep supervision
//! across multi-scale heads.
//!
//! Dice is computed per foreground class over the whole batch ("batch
//! Dice", smooth term 1e-5), averaged over classes present in the target;
//! background is excluded from the Dice term. Cross-entropy is the mean
//! over all pixels. Both run in f64 internally.

use crate::error::{Error, Result};
use crate::tensor::{autograd_enabled, ops, DType, Float, Node, Storage, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;

fn check_pair(logits: &Tensor, target: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let ls = logits.shape();
    let ts = target.shape();
    if ls.len() != 4 {
        return Err(Error::shape("dice_ce_loss", format!("logits must be [B,K,h,w], got {ls:?}")));
    }
    if ts.len() != 3 || target.dtype() != DType::U8 {
        return Err(Error::shape("dice_ce_loss", format!("target must be u8 [B,h,w], got {ts:?}")));
    }
    let (b, k, h, w) = (ls[0], ls[1], ls[2], ls[3]);
    if ts != [b, h, w] {
        return Err(Error::shape(
            "dice_ce_loss",
            format!("target extents {ts:?} do not match logits [{b},{h},{w}]"),
        ));
    }
    Ok((b, k, h, w))
}

/// Forward pieces reused by the backward rule.
struct DiceStats {
    /// per foreground class: (present, numerator, denominator)
    per_class: Vec<(bool, f64, f64)>,
    n_present: usize,
    n_pixels: usize,
}

fn softmax_rows_f64<T: Float>(logits: &[T], b: usize, k: usize, plane: usize) -> Vec<f64> {
    let mut probs = vec![0.0f64; b * k * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for ki in 0..k {
                mx = mx.max(logits[(bi * k + ki) * plane + p].to_f64());
            }
            let mut denom = 0.0f64;
            for ki in 0..k {
                denom += (logits[(bi * k + ki) * plane + p].to_f64() - mx).exp();
            }
            for ki in 0..k {
                probs[(bi * k + ki) * plane + p] =
                    (logits[(bi * k + ki) * plane + p].to_f64() - mx).exp() / denom;
            }
        }
    }
    probs
}

fn dice_stats(probs: &[f64], labels: &[u8], b: usize, k: usize, plane: usize) -> DiceStats {
    let n_pixels = b * plane;
    let mut per_class = Vec::with_capacity(k.saturating_sub(1));
    for ki in 1..k {
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut gsum = 0.0f64;
        for bi in 0..b {
            for p in 0..plane {
                let prob = probs[(bi * k + ki) * plane + p];
                psum += prob;
                if labels[bi * plane + p] as usize == ki {
                    inter += prob;
                    gsum += 1.0;
                }
            }
        }
        per_class.push((gsum > 0.0, inter, psum + gsum));
    }
    let n_present = per_class.iter().filter(|(p, _, _)| *p).count();
    DiceStats { per_class, n_present, n_pixels }
}

/// Sum of soft Dice loss and cross-entropy over one head.
pub fn dice_ce_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = check_pair(logits, target)?;
    let plane = h * w;
    let labels: Vec<u8> = match &*target.data() {
        Storage::U8(v) => v.clone(),
        _ => unreachable!(),
    };
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Data(format!("target label {bad} >= num_classes {k}")));
    }

    fn run<T: Float>(logits: &Tensor, labels: Vec<u8>, b: usize, k: usize, plane: usize) -> Tensor {
        let (loss, _probs) = {
            let d = logits.data();
            let lv = T::slice(&d);
            let probs = softmax_rows_f64::<T>(lv, b, k, plane);
            let stats = dice_stats(&probs, &labels, b, k, plane);
            let mut ce = 0.0f64;
            for bi in 0..b {
                for p in 0..plane {
                    let t = labels[bi * plane + p] as usize;
                    ce -= probs[(bi * k + t) * plane + p].max(1e-300).ln();
                }
            }
            ce /= stats.n_pixels as f64;
            let dice_loss = if stats.n_present == 0 {
                0.0
            } else {
                let mean: f64 = stats
                    .per_class
                    .iter()
                    .filter(|(present, _, _)| *present)
                    .map(|(_, num, den)| (2.0 * num + DICE_SMOOTH) / (den + DICE_SMOOTH))
                    .sum::<f64>()
                    / stats.n_present as f64;
                1.0 - mean
            };
            (ce + dice_loss, probs)
        };
        let node = if autograd_enabled() && logits.on_tape() {
            let lc = logits.clone();
            let labels_c = labels.clone();
            Some(Node {
                parents: vec![logits.clone()],
                backward: Box::new(move |gout: &Storage| {
                    let g = T::slice(gout)[0].to_f64();
                    let d = lc.data();
                    let lv = T::slice(&d);
                    let probs = softmax_rows_f64::<T>(lv, b, k, plane);
                    let stats = dice_stats(&probs, &labels_c, b, k, plane);
                    let npix = stats.n_pixels as f64;
                    // dL/dp per class-pixel for the Dice term
                    let mut grad = vec![T::ZERO; b * k * plane];
                    for bi in 0..b {
                        for p in 0..plane {
                            let t = labels_c[bi * plane + p] as usize;
                            // dL/dp_k for the dice term, then softmax chain
                            let mut dldp = vec![0.0f64; k];
                            if stats.n_present > 0 {
                                for ki in 1..k {
                                    let (present, num, den) = stats.per_class[ki - 1];
                                    if !present {
                                        continue;
                                    }
                                    let denom = den + DICE_SMOOTH;
                                    let is_t = if t == ki { 1.0 } else { 0.0 };
                                    let ddice_dp = (2.0 * is_t * denom - (2.0 * num + DICE_SMOOTH)) / (denom * denom);
                                    dldp[ki] = -ddice_dp / stats.n_present as f64;
                                }
                            }
                            // CE contribution directly on logits; dice via
                            // softmax jacobian: dl_j = p_j (dldp_j - sum_k dldp_k p_k)
                            let mut dot = 0.0f64;
                            for ki in 0..k {
                                dot += dldp[ki] * probs[(bi * k + ki) * plane + p];
                            }
                            for ki in 0..k {
                                let pk = probs[(bi * k + ki) * plane + p];
                                let ce_term = (pk - if ki == t { 1.0 } else { 0.0 }) / npix;
                                let dice_term = pk * (dldp[ki] - dot);
                                grad[(bi * k + ki) * plane + p] = T::from_f64(g * (ce_term + dice_term));
                            }
                        }
                    }
                    vec![Some(T::wrap(grad))]
                }),
            })
        } else {
            None
        };
        Tensor::from_op(vec![], T::wrap(vec![T::from_f64(loss)]), node)
    }
    match logits.dtype() {
        DType::F32 => Ok(run::<f32>(logits, labels, b, k, plane)),
        DType::F64 => Ok(run::<f64>(logits, labels, b, k, plane)),
        DType::U8 => Err(Error::shape("dice_ce_loss", "u8 logits")),
    }
}

/// Default deep-supervision weights for `n` heads, finest first:
/// 2^-(l+1) with the last repeated so the weights sum to exactly 1.
pub fn default_ds_weights(n: usize) -> Vec<f64> {
    assert!(n >= 1);
    if n == 1 {
        return vec![1.0];
    }
    let mut w: Vec<f64> = (0..n - 1).map(|l| 0.5f64.powi(l as i32 + 1)).collect();
    w.push(*w.last().unwrap());
    w
}

/// Weighted sum of per-head losses; targets are nearest-neighbor
/// downsampled to each head resolution. Zero-weight heads are skipped
/// entirely, so their exclusive parameters receive no gradient.
pub fn deep_supervised_loss(heads: &[Tensor], target: &Tensor, weights: &[f64]) -> Result<Tensor> {
    if heads.is_empty() || heads.len() != weights.len() {
        return Err(Error::Config(format!(
            "deep supervision expects one weight per head: {} heads, {} weights",
            heads.len(),
            weights.len()
        )));
    }
    let ts = target.shape();
    let (th, tw) = (ts[1], ts[2]);
    let mut total: Option<Tensor> = None;
    for (head, &w) in heads.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let hs = head.shape();
        if th % hs[2] != 0 || tw % hs[3] != 0 || th / hs[2] != tw / hs[3] {
            return Err(Error::shape(
                "deep_supervised_loss",
                format!("head {}x{} incompatible with target {th}x{tw}", hs[2], hs[3]),
            ));
        }
        let factor = th / hs[2];
        let t_ds = if factor == 1 { target.clone() } else { ops::nearest_downsample_labels(target, factor)? };
        let term = ops::scale(&dice_ce_loss(head, &t_ds)?, w)?;
        total = Some(match total {
            Some(acc) => ops::add(&acc, &term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("all deep-supervision weights are zero".into()))
}
