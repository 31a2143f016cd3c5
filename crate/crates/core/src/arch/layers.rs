//! Parameterized layers: thin structs over tensor ops that own their
//! weights, know how to initialize them, and report them by dotted name.

use crate::error::Result;
use crate::rng::Stream;
use crate::tensor::{conv, ops, DType, Storage, Tensor};

pub type NamedParams = Vec<(String, Tensor)>;

pub(crate) fn param_from_f64(shape: &[usize], data: Vec<f64>, dtype: DType) -> Tensor {
    let storage = match dtype {
        DType::F32 => Storage::F32(data.into_iter().map(|v| v as f32).collect()),
        DType::F64 => Storage::F64(data),
        DType::U8 => unreachable!("float params only"),
    };
    Tensor::param(shape, storage).expect("param shape/data agree")
}

/// Truncated normal (sigma 0.02, cut at 2 sigma) for projection weights.
pub(crate) fn trunc_normal_param(shape: &[usize], rng: &mut Stream, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    param_from_f64(shape, (0..n).map(|_| rng.trunc_normal(0.02, 2.0)).collect(), dtype)
}

/// Fan-in uniform for convolution weights.
pub(crate) fn fan_in_uniform_param(shape: &[usize], fan_in: usize, rng: &mut Stream, dtype: DType) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    param_from_f64(shape, (0..n).map(|_| rng.uniform_in(-bound, bound)).collect(), dtype)
}

pub struct Linear {
    pub w: Tensor, // [d_out, d_in]
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, bias: bool, rng: &mut Stream, dtype: DType) -> Linear {
        Linear {
            w: trunc_normal_param(&[d_out, d_in], rng, dtype),
            b: bias.then(|| param_from_f64(&[d_out], vec![0.0; d_out], dtype)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.w, self.b.as_ref())
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.weight"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(d: usize, dtype: DType) -> LayerNorm {
        LayerNorm {
            gamma: param_from_f64(&[d], vec![1.0; d], dtype),
            beta: param_from_f64(&[d], vec![0.0; d], dtype),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct InstanceNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn init(c: usize, dtype: DType) -> InstanceNorm2d {
        InstanceNorm2d {
            gamma: param_from_f64(&[c], vec![1.0; c], dtype),
            beta: param_from_f64(&[c], vec![0.0; c], dtype),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::instance_norm2d(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct Conv2d {
    pub w: Tensor, // [O, C/groups, kh, kw]
    pub b: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
        rng: &mut Stream,
        dtype: DType,
    ) -> Conv2d {
        let cg = c_in / groups;
        Conv2d {
            w: fan_in_uniform_param(&[c_out, cg, k, k], cg * k * k, rng, dtype),
            b: bias.then(|| param_from_f64(&[c_out], vec![0.0; c_out], dtype)),
            stride,
            pad,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv::conv2d(x, &self.w, self.b.as_ref(), self.stride, self.pad, self.groups)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.weight"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub struct ConvT2d {
    pub w: Tensor, // [Cin, Cout, k, k], k == stride
    pub b: Option<Tensor>,
    pub stride: usize,
}

impl ConvT2d {
    pub fn init(c_in: usize, c_out: usize, stride: usize, bias: bool, rng: &mut Stream, dtype: DType) -> ConvT2d {
        ConvT2d {
            w: fan_in_uniform_param(&[c_in, c_out, stride, stride], c_in * stride * stride, rng, dtype),
            b: bias.then(|| param_from_f64(&[c_out], vec![0.0; c_out], dtype)),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv::conv_transpose2d(x, &self.w, self.b.as_ref(), self.stride)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.weight"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}
