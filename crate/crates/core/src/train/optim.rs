//! AdamW with decoupled weight decay, the cosine learning-rate schedule,
//! and the freeze window for pretrained-designated parameters.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::{Storage, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// lr(t) = 0.5 * base * (1 + cos(pi * t / total)); t > total clamps to 0.
pub fn cosine_lr(base_lr: f64, t: usize, total: usize) -> f64 {
    if total == 0 || t >= total {
        return if t == 0 { base_lr } else { 0.0 };
    }
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

pub struct AdamW {
    pub weight_decay: f64,
    /// First/second moment estimates per parameter name, kept in f64.
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW { weight_decay, state: HashMap::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all non-frozen parameters that hold a gradient.
    /// Any non-finite gradient aborts the step before touching weights.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64, frozen: &HashSet<String>) -> Result<()> {
        for (name, p) in params {
            if frozen.contains(name) {
                continue;
            }
            if let Some(g) = p.grad_f64() {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient in {name}: {bad}")));
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, p) in params {
            if frozen.contains(name) {
                continue; // gradients discarded during the freeze window
            }
            let Some(g) = p.grad_f64() else { continue };
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let wd = self.weight_decay;
            p.with_data_mut(|s| {
                let update = |theta: f64, i: usize, m: &mut [f64], v: &mut [f64]| -> f64 {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    theta - lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * theta)
                };
                match s {
                    Storage::F32(data) => {
                        for (i, x) in data.iter_mut().enumerate() {
                            *x = update(*x as f64, i, m, v) as f32;
                        }
                    }
                    Storage::F64(data) => {
                        for (i, x) in data.iter_mut().enumerate() {
                            *x = update(*x, i, m, v);
                        }
                    }
                    Storage::U8(_) => {}
                }
            });
        }
        Ok(())
    }
}
