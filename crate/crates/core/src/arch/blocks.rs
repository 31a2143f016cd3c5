//! Building blocks: the VSS block, patch embed/merge/expand, residual conv
//! blocks, and the decoder up-sample block.

use super::layers::{Conv2d, ConvT2d, InstanceNorm2d, LayerNorm, Linear, NamedParams};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::ssm::{ss2d, Ss2dParams};
use crate::tensor::{ops, DType, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Residual gated block whose core mixer is SS2D.
///
/// x + Proj_out( LN(SS2D(silu(DWConv3x3(Proj_in1(LN(x)))))) ⊙ silu(Proj_in2(LN(x))) )
///
/// Channels-last [B,H,W,d]; the SS2D branch runs NCHW internally. Expansion
/// ratio 2; Δ-rank follows the backbone rule ceil(d/16).
pub struct VssBlock {
    pub dim: usize,
    pub ln1: LayerNorm,
    pub proj_in1: Linear,
    pub proj_in2: Linear,
    pub dwconv: Conv2d,
    pub ssm: Ss2dParams,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
}

impl VssBlock {
    pub fn init(d: usize, d_state: usize, rng: &mut Stream, dtype: DType) -> Result<VssBlock> {
        let d_inner = 2 * d;
        let dt_rank = d.div_ceil(16);
        Ok(VssBlock {
            dim: d,
            ln1: LayerNorm::init(d, dtype),
            proj_in1: Linear::init(d, d_inner, false, rng, dtype),
            proj_in2: Linear::init(d, d_inner, false, rng, dtype),
            dwconv: Conv2d::init(d_inner, d_inner, 3, 1, 1, d_inner, true, rng, dtype),
            ssm: Ss2dParams::init(d_inner, d_state, dt_rank, rng, dtype)?,
            out_norm: LayerNorm::init(d_inner, dtype),
            out_proj: Linear::init(d_inner, d, false, rng, dtype),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.dim {
            return Err(Error::shape(
                "vss_block",
                format!("channel axis (3) has extent {:?}, block expects {}", s.last(), self.dim),
            ));
        }
        let ln = self.ln1.forward(x)?;
        let a = self.proj_in1.forward(&ln)?;
        let a = ops::nhwc_to_nchw(&a)?;
        let a = self.dwconv.forward(&a)?;
        let a = ops::silu(&a)?;
        let a = ss2d(&a, &self.ssm)?;
        let a = ops::nchw_to_nhwc(&a)?;
        let a = self.out_norm.forward(&a)?;
        let g = ops::silu(&self.proj_in2.forward(&ln)?)?;
        let gated = ops::mul(&a, &g)?;
        let out = self.out_proj.forward(&gated)?;
        ops::add(x, &out)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.proj_in1.collect(&format!("{prefix}.proj_in1"), out);
        self.proj_in2.collect(&format!("{prefix}.proj_in2"), out);
        self.dwconv.collect(&format!("{prefix}.dwconv"), out);
        for (i, dir) in self.ssm.dirs.iter().enumerate() {
            for (name, t) in dir.tensors() {
                out.push((format!("{prefix}.ssm.dir{}.{name}", i + 1), t.clone()));
            }
        }
        self.out_norm.collect(&format!("{prefix}.out_norm"), out);
        self.out_proj.collect(&format!("{prefix}.out_proj"), out);
    }
}

/// Non-overlapping patch linearization + linear projection + LN.
/// [B,C,H,W] -> [B,H/p,W/p,d].
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn init(c_in: usize, patch: usize, d_out: usize, rng: &mut Stream, dtype: DType) -> PatchEmbed {
        PatchEmbed {
            patch,
            proj: Linear::init(patch * patch * c_in, d_out, true, rng, dtype),
            norm: LayerNorm::init(d_out, dtype),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = ops::extract_patches(x, self.patch)?;
        self.norm.forward(&self.proj.forward(&p)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.proj.collect(&format!("{prefix}.proj"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
    }
}

/// 2x down-sampling: concat 2x2 neighbors (4d) -> LN -> linear 4d -> 2d.
/// [B,H,W,d] -> [B,H/2,W/2,2d].
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn init(d: usize, rng: &mut Stream, dtype: DType) -> PatchMerge {
        PatchMerge {
            norm: LayerNorm::init(4 * d, dtype),
            reduce: Linear::init(4 * d, 2 * d, false, rng, dtype),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = ops::space_to_channel2(x)?;
        self.reduce.forward(&self.norm.forward(&g)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.norm.collect(&format!("{prefix}.norm"), out);
        self.reduce.collect(&format!("{prefix}.reduce"), out);
    }
}

/// Patch expanding: linear channel expansion then pixel rearrangement.
/// factor 2: d -> 2d -> spatial 2x with d/2 channels.
/// factor 4: d -> 16d -> spatial 4x with d channels.
pub struct PatchExpand {
    pub factor: usize,
    pub expand: Linear,
}

impl PatchExpand {
    pub fn init(d: usize, factor: usize, rng: &mut Stream, dtype: DType) -> Result<PatchExpand> {
        let widen = match factor {
            2 => 2 * d,
            4 => 16 * d,
            other => return Err(Error::Config(format!("patch_expand factor must be 2 or 4, got {other}"))),
        };
        if factor == 2 && d % 2 != 0 {
            return Err(Error::shape("patch_expand", format!("channel axis extent {d} not divisible by factor 2")));
        }
        Ok(PatchExpand { factor, expand: Linear::init(d, widen, false, rng, dtype) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let wide = self.expand.forward(x)?;
        ops::channel_to_space(&wide, self.factor)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.expand.collect(&format!("{prefix}.expand"), out);
    }
}

/// Two conv3x3 + instance norm + LeakyReLU layers with an additive skip
/// (1x1 projection when the channel count changes).
pub struct ResBlock {
    pub conv1: Conv2d,
    pub norm1: InstanceNorm2d,
    pub conv2: Conv2d,
    pub norm2: InstanceNorm2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn init(c_in: usize, c_out: usize, rng: &mut Stream, dtype: DType) -> ResBlock {
        ResBlock {
            conv1: Conv2d::init(c_in, c_out, 3, 1, 1, 1, true, rng, dtype),
            norm1: InstanceNorm2d::init(c_out, dtype),
            conv2: Conv2d::init(c_out, c_out, 3, 1, 1, 1, true, rng, dtype),
            norm2: InstanceNorm2d::init(c_out, dtype),
            skip: (c_in != c_out).then(|| Conv2d::init(c_in, c_out, 1, 1, 0, 1, true, rng, dtype)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = ops::leaky_relu(&self.norm1.forward(&self.conv1.forward(x)?)?, LEAKY_SLOPE)?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let s = match &self.skip {
            Some(proj) => proj.forward(x)?,
            None => x.clone(),
        };
        ops::leaky_relu(&ops::add(&h, &s)?, LEAKY_SLOPE)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.norm1.collect(&format!("{prefix}.norm1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.norm2.collect(&format!("{prefix}.norm2"), out);
        if let Some(skip) = &self.skip {
            skip.collect(&format!("{prefix}.skip"), out);
        }
    }
}

/// Decoder up-sample block (CNN decoder).
///
/// Given the previous decoder feature (already at skip resolution) and the
/// skip feature: ẑ = Res2(Cat(z_next, Res1(skip))), then z_out = DeConv(ẑ)
/// (2x up, next stage width) and y = 1x1 head on ẑ.
pub struct UpBlock {
    pub width: usize,
    pub res_skip: ResBlock,
    pub res_fuse: ResBlock,
    pub deconv_out: ConvT2d,
    pub head: Conv2d,
}

impl UpBlock {
    pub fn init(
        skip_c: usize,
        width: usize,
        next_width: usize,
        num_classes: usize,
        rng: &mut Stream,
        dtype: DType,
    ) -> UpBlock {
        UpBlock {
            width,
            res_skip: ResBlock::init(skip_c, width, rng, dtype),
            res_fuse: ResBlock::init(2 * width, width, rng, dtype),
            deconv_out: ConvT2d::init(width, next_width, 2, true, rng, dtype),
            head: Conv2d::init(width, num_classes, 1, 1, 0, 1, true, rng, dtype),
        }
    }

    /// Returns (z_out at 2x resolution, y head logits at this resolution).
    pub fn forward(&self, z_next: &Tensor, skip: &Tensor) -> Result<(Tensor, Tensor)> {
        let (zs, ss) = (z_next.shape(), skip.shape());
        if zs[2] != ss[2] || zs[3] != ss[3] {
            return Err(Error::shape(
                "upsample_block",
                format!("spatial axes differ: z {}x{} vs skip {}x{}", zs[2], zs[3], ss[2], ss[3]),
            ));
        }
        let lifted = self.res_skip.forward(skip)?;
        let zhat = self.res_fuse.forward(&ops::cat(&[z_next, &lifted], 1)?)?;
        let y = self.head.forward(&zhat)?;
        let z_out = self.deconv_out.forward(&zhat)?;
        Ok((z_out, y))
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.res_skip.collect(&format!("{prefix}.res_skip"), out);
        self.res_fuse.collect(&format!("{prefix}.res_fuse"), out);
        self.deconv_out.collect(&format!("{prefix}.deconv"), out);
        self.head.collect(&format!("{prefix}.head"), out);
    }
}

/// Stem: 7x7 stride-2 conv + 2D instance norm. Rejects odd extents.
pub struct Stem {
    pub conv: Conv2d,
    pub norm: InstanceNorm2d,
}

impl Stem {
    pub fn init(c_in: usize, c_out: usize, rng: &mut Stream, dtype: DType) -> Stem {
        Stem {
            conv: Conv2d::init(c_in, c_out, 7, 2, 3, 1, true, rng, dtype),
            norm: InstanceNorm2d::init(c_out, dtype),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("stem", format!("spatial axes must be even, got {}x{}", s[2], s[3])));
        }
        self.norm.forward(&self.conv.forward(x)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
    }
}

/// Mamba-based decoder stage: 2x patch expand, concat skip, linear
/// reduction, then VSS blocks; channels-last throughout.
pub struct DaggerStage {
    pub expand: PatchExpand,
    pub reduce: Linear,
    pub blocks: Vec<VssBlock>,
    pub head: Linear,
}

impl DaggerStage {
    pub fn init(
        d_in: usize,
        d_out: usize,
        depth: usize,
        d_state: usize,
        num_classes: usize,
        rng: &mut Stream,
        dtype: DType,
    ) -> Result<DaggerStage> {
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            blocks.push(VssBlock::init(d_out, d_state, rng, dtype)?);
        }
        Ok(DaggerStage {
            expand: PatchExpand::init(d_in, 2, rng, dtype)?,
            reduce: Linear::init(2 * d_out, d_out, false, rng, dtype),
            blocks,
            head: Linear::init(d_out, num_classes, true, rng, dtype),
        })
    }

    /// Returns (stage feature NHWC, head logits NCHW).
    pub fn forward(&self, below: &Tensor, skip: &Tensor) -> Result<(Tensor, Tensor)> {
        let up = self.expand.forward(below)?;
        let mut f = self.reduce.forward(&ops::cat(&[&up, skip], 3)?)?;
        for b in &self.blocks {
            f = b.forward(&f)?;
        }
        let y = ops::nhwc_to_nchw(&self.head.forward(&f)?)?;
        Ok((f, y))
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.expand.collect(&format!("{prefix}.expand"), out);
        self.reduce.collect(&format!("{prefix}.reduce"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.block{}", i + 1), out);
        }
        self.head.collect(&format!("{prefix}.head"), out);
    }
}

/// One encoder stage: optional patch merging then VSS blocks (NHWC).
pub struct EncStage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<VssBlock>,
}

impl EncStage {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut f = match &self.merge {
            Some(m) => m.forward(x)?,
            None => x.clone(),
        };
        for b in &self.blocks {
            f = b.forward(&f)?;
        }
        Ok(f)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams) {
        if let Some(m) = &self.merge {
            m.collect(&format!("{prefix}.merge"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.block{}", i + 1), out);
        }
    }
}

/// 1x1 conv head used by the CNN decoder's final output.
pub fn conv_head(c_in: usize, num_classes: usize, rng: &mut Stream, dtype: DType) -> Conv2d {
    Conv2d::init(c_in, num_classes, 1, 1, 0, 1, true, rng, dtype)
}
