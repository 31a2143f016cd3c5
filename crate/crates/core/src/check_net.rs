//! End-to-end finite-difference verification: a micro-scale network at f64
//! driven through the full forward + deep-supervised loss, with sampled
//! parameters probed against central differences.

use crate::arch::{ModelConfig, Network, Variant};
use crate::check::{check_param, GradReport};
use crate::error::Result;
use crate::rng::Stream;
use crate::tensor::{DType, Tensor};
use crate::train::{deep_supervised_loss, default_ds_weights};

pub fn micro_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(variant, 2, 1, 32);
    cfg.stage_dims = vec![4, 8, 16, 32, 64];
    cfg.d_state = 2;
    cfg
}

/// Probes up to `sample_params` parameter tensors (stride-sampled over the
/// full list) at `probes_per_param` elements each. Tolerance judgement is
/// the caller's.
pub fn network_gradcheck(
    variant: Variant,
    sample_params: usize,
    probes_per_param: usize,
    seed: u64,
) -> Result<Vec<GradReport>> {
    let cfg = micro_config(variant);
    let net = Network::build(&cfg, seed, DType::F64)?;
    let mut rng = Stream::child(seed, "gradcheck-data");
    let (h, w) = cfg.input_size;
    let x = Tensor::from_f64(&[1, 1, h, w], (0..h * w).map(|_| rng.normal() * 0.5).collect())?;
    let y = Tensor::from_u8(&[1, h, w], (0..h * w).map(|_| rng.index(cfg.num_classes) as u8).collect())?;
    let weights = default_ds_weights(net.head_count());

    let params = net.named_params();
    let stride = (params.len() / sample_params.max(1)).max(1);
    let sampled: Vec<(String, Tensor)> =
        params.iter().step_by(stride).take(sample_params).map(|(n, t)| (n.clone(), t.clone())).collect();

    let mut reports = Vec::with_capacity(sampled.len());
    for (name, p) in &sampled {
        let probes: Vec<usize> = if p.numel() <= probes_per_param {
            (0..p.numel()).collect()
        } else {
            (0..probes_per_param).map(|k| k * p.numel() / probes_per_param).collect()
        };
        let mut loss_fn = || {
            let heads = net.forward(&x)?;
            deep_supervised_loss(&heads, &y, &weights)
        };
        reports.push(check_param(name, p, &probes, &mut loss_fn)?);
    }
    Ok(reports)
}
