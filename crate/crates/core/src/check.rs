//! Finite-difference gradient verification.
//!
//! Central differences at f64 with h = 1e-5, compared against tape
//! gradients by relative error. Used by the test suites and the
//! `gradcheck` CLI command. The probes perturb raw data directly and are
//! independent of any backward rule.

use crate::error::Result;
use crate::tensor::{Float, Storage, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Result of checking one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// rel_err(a, n) = |a - n| / max(|a|, |n|, scale_floor). The floor keeps
/// near-zero gradients comparable: central differences of an O(1) loss
/// bottom out around 1e-10 absolute from cancellation, so magnitudes below
/// the floor are effectively checked absolutely at tol * floor.
fn rel_err(analytic: f64, numeric: f64, scale_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(scale_floor)
}

fn nudge(t: &Tensor, idx: usize, delta: f64) {
    t.with_data_mut(|s| match s {
        Storage::F64(v) => v[idx] += delta,
        Storage::F32(v) => v[idx] += delta as f32,
        Storage::U8(_) => panic!("cannot perturb u8 tensor"),
    });
}

/// Check d(loss)/d(param) for `param` against central differences.
///
/// `loss_fn` must rebuild the forward pass from current parameter data on
/// every call. `probe_indices` limits which elements are probed (useful for
/// large parameter tensors); empty means all.
pub fn check_param(
    name: &str,
    param: &Tensor,
    probe_indices: &[usize],
    loss_fn: &mut dyn FnMut() -> Result<Tensor>,
) -> Result<GradReport> {
    param.zero_grad();
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic = param
        .grad_f64()
        .unwrap_or_else(|| vec![0.0; param.numel()]);

    let all: Vec<usize>;
    let probes: &[usize] = if probe_indices.is_empty() {
        all = (0..param.numel()).collect();
        &all
    } else {
        probe_indices
    };

    let mut report = GradReport {
        name: name.to_string(),
        checked: probes.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in probes {
        nudge(param, i, FD_STEP);
        let up = loss_fn()?.to_f64_vec()[0];
        nudge(param, i, -2.0 * FD_STEP);
        let down = loss_fn()?.to_f64_vec()[0];
        nudge(param, i, FD_STEP);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(analytic[i], numeric, 1e-4);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Check several named leaves against one loss function; every leaf is
/// probed at up to `max_probes` deterministic indices.
pub fn check_params(
    params: &[(String, Tensor)],
    max_probes: usize,
    loss_fn: &mut dyn FnMut() -> Result<Tensor>,
) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    for (name, p) in params {
        let n = p.numel();
        let probes: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            // deterministic stride sampling across the tensor
            (0..max_probes).map(|k| k * n / max_probes).collect()
        };
        reports.push(check_param(name, p, &probes, loss_fn)?);
    }
    Ok(reports)
}

/// Convenience: random f64 leaf for gradient checks.
pub fn random_param(rng: &mut crate::rng::Stream, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.normal() * scale).collect();
    Tensor::param(shape, f64::wrap(data)).unwrap()
}
