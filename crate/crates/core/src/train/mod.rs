//! Training recipe: AdamW with cosine decay, deep supervision, the
//! freeze-then-unfreeze protocol for pretrained-designated parameters, and
//! per-epoch evaluation. Deterministic given (config, data, seed).

pub mod loss;
pub mod optim;

pub use loss::{deep_supervised_loss, default_ds_weights, dice_ce_loss};
pub use optim::{cosine_lr, AdamW};

use std::collections::HashSet;

use serde::Serialize;

use crate::arch::Network;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, DEFAULT_NSD_TOLERANCE};
use crate::rng::Stream;
use crate::tensor::{no_grad, ops, Storage};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub freeze_epochs: usize,
    /// Per-head loss weights, finest first; defaults to the 2^-(l+1)
    /// convention normalized to 1.
    pub ds_weights: Option<Vec<f64>>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            iters_per_epoch: 250,
            base_lr: 1e-4,
            weight_decay: 0.05,
            freeze_epochs: 10,
            ds_weights: None,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, head_count: usize) -> Result<Vec<f64>> {
        if self.epochs == 0 || self.iters_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, iters_per_epoch, batch_size must be >= 1".into()));
        }
        let w = match &self.ds_weights {
            Some(w) => w.clone(),
            None => default_ds_weights(head_count),
        };
        if w.len() != head_count {
            return Err(Error::Config(format!(
                "ds_weights has {} entries for {} heads",
                w.len(),
                head_count
            )));
        }
        if w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("ds_weights must be >= 0 and sum to 1, got {w:?}")));
        }
        Ok(w)
    }
}

/// One line of the training log (emitted as line-delimited JSON).
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    pub frozen: usize,
}

/// Runs the training loop. `frozen_names` marks pretrained-designated
/// tensors excluded from updates while epoch < freeze_epochs. The
/// per-epoch callback receives each log record as it is produced.
pub fn train_loop(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    frozen_names: &HashSet<String>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let weights = cfg.validate(net.head_count())?;
    let ds_weights = if net.config.deep_supervision {
        weights
    } else {
        let mut w = vec![0.0; net.head_count()];
        w[0] = 1.0;
        w
    };
    let train_stems: Vec<String> = data.stems("train")?.to_vec();
    if train_stems.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let params = net.named_params();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut batch_rng = Stream::child(cfg.seed, "batch");
    let total_iters = cfg.epochs * cfg.iters_per_epoch;
    let empty: HashSet<String> = HashSet::new();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let frozen = if epoch < cfg.freeze_epochs { frozen_names } else { &empty };
        let mut loss_sum = 0.0f64;
        let mut lr_last = 0.0f64;
        for it in 0..cfg.iters_per_epoch {
            let global = epoch * cfg.iters_per_epoch + it;
            let lr = cosine_lr(cfg.base_lr, global, total_iters);
            lr_last = lr;
            let idx: Vec<&str> =
                (0..cfg.batch_size).map(|_| train_stems[batch_rng.index(train_stems.len())].as_str()).collect();
            let (x, y) = data.load_batch(&idx)?;
            let heads = net.forward(&x)?;
            let loss = deep_supervised_loss(&heads, &y, &ds_weights)?;
            let lv = loss.to_f64_vec()[0];
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {epoch} iter {it} (lr {lr:.3e})"
                )));
            }
            loss_sum += lv;
            loss.backward()?;
            opt.step(&params, lr, frozen)?;
            net.zero_grads();
        }
        let report = evaluate(net, data, "train", DEFAULT_NSD_TOLERANCE)?;
        let log = EpochLog {
            epoch,
            lr: lr_last,
            train_loss: loss_sum / cfg.iters_per_epoch as f64,
            mean_dsc: report.mean_dsc,
            mean_nsd: report.mean_nsd,
            frozen: frozen.len(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Single-forward-pass evaluation over a split (no test-time augmentation).
pub fn evaluate(net: &Network, data: &Dataset, split: &str, nsd_tol: f64) -> Result<MetricReport> {
    let stems = data.stems(split)?.to_vec();
    if stems.is_empty() {
        return Err(Error::Data(format!("split '{split}' is empty")));
    }
    let mut preds = Vec::with_capacity(stems.len());
    let mut gts = Vec::with_capacity(stems.len());
    for stem in &stems {
        let (x, y) = data.load_batch(&[stem.as_str()])?;
        let heads = no_grad(|| net.forward(&x))?;
        let pred = ops::argmax_channels(&heads[0])?;
        let (pd, gd) = (pred.data(), y.data());
        match (&*pd, &*gd) {
            (Storage::U8(p), Storage::U8(g)) => {
                preds.push(p.clone());
                gts.push(g.clone());
            }
            _ => unreachable!(),
        }
        drop(pd);
        drop(gd);
    }
    let (h, w) = data.manifest.size;
    MetricReport::evaluate(&preds, &gts, h, w, data.manifest.num_classes, nsd_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ModelConfig, Variant};
    use crate::data::gen_data;
    use crate::tensor::DType;

    fn tiny_data(tag: &str, n: usize) -> Dataset {
        let dir = std::env::temp_dir().join(format!("sumamba-train-{}-{tag}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        gen_data(2, 1, n, 1, 32, 3, &dir).unwrap();
        Dataset::open(&dir).unwrap()
    }

    fn micro_config() -> ModelConfig {
        let mut cfg = ModelConfig::tiny(Variant::Umamba, 2, 1, 32);
        cfg.stage_dims = vec![4, 8, 16, 32, 64];
        cfg.d_state = 2;
        cfg
    }

    #[test]
    fn loop_runs_and_loss_is_finite() {
        let data = tiny_data("run", 4);
        let net = Network::build(&micro_config(), 1, DType::F32).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            iters_per_epoch: 2,
            base_lr: 1e-3,
            batch_size: 2,
            freeze_epochs: 0,
            ..TrainConfig::default()
        };
        let logs = train_loop(&net, &data, &cfg, &HashSet::new(), |_| {}).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.train_loss.is_finite()));
        assert!(logs[1].lr < cfg.base_lr);
    }

    #[test]
    fn same_seed_twice_bit_identical_params() {
        let data = tiny_data("det", 3);
        let cfg = TrainConfig {
            epochs: 1,
            iters_per_epoch: 3,
            base_lr: 1e-3,
            batch_size: 2,
            freeze_epochs: 0,
            seed: 11,
            ..TrainConfig::default()
        };
        let collect = |_: &()| {};
        let _ = collect;
        let run = || {
            let net = Network::build(&micro_config(), 5, DType::F32).unwrap();
            train_loop(&net, &data, &cfg, &HashSet::new(), |_| {}).unwrap();
            net.named_params()
                .iter()
                .map(|(n, t)| (n.clone(), t.to_f64_vec()))
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for ((na, va), (nb, vb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(va, vb, "{na} differs between identical runs");
        }
    }

    #[test]
    fn nan_weight_aborts_with_numeric_diagnostic() {
        let data = tiny_data("nan", 2);
        let net = Network::build(&micro_config(), 1, DType::F32).unwrap();
        // poison one weight; the first forward produces a non-finite loss
        let (_, t) = &net.named_params()[3];
        t.with_data_mut(|s| match s {
            crate::tensor::Storage::F32(v) => v[0] = f32::NAN,
            _ => unreachable!(),
        });
        let cfg = TrainConfig { epochs: 1, iters_per_epoch: 1, batch_size: 1, freeze_epochs: 0, ..TrainConfig::default() };
        match train_loop(&net, &data, &cfg, &HashSet::new(), |_| {}) {
            Err(crate::error::Error::Numeric(msg)) => assert!(msg.contains("non-finite"), "{msg}"),
            other => panic!("expected numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn invalid_ds_weights_rejected() {
        let net = Network::build(&micro_config(), 1, DType::F32).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.ds_weights = Some(vec![0.5, 0.5]); // wrong arity for 5 heads
        assert!(cfg.validate(net.head_count()).is_err());
        cfg.ds_weights = Some(vec![0.5, 0.25, 0.125, 0.0625, 0.0625 + 0.5]); // sum != 1
        assert!(cfg.validate(net.head_count()).is_err());
    }
}
