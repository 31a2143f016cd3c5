//! Full segmentation networks built deterministically from a ModelConfig.
//!
//! `umamba`: stem (7x7 s2 conv + instance norm) -> 2x2 patch embed ->
//! four VSS stages -> CNN decoder with residual skip processing, deep
//! supervision heads at 1/16..1/2, input-level Res-Cat-Res and a final
//! 1x1 head.
//!
//! `umamba_dagger`: 4x4 patch embed -> same VSS stages -> Mamba decoder
//! (patch expand + two VSS blocks per scale) with heads at 1/16, 1/8, 1/4
//! and full resolution after a final 4x expand.

pub mod blocks;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{ops, DType, Tensor};
use blocks::{conv_head, DaggerStage, EncStage, PatchEmbed, PatchExpand, PatchMerge, ResBlock, Stem, UpBlock, VssBlock};
use layers::{Conv2d, ConvT2d, Linear, NamedParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Umamba,
    UmambaDagger,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Umamba => "umamba",
            Variant::UmambaDagger => "umamba_dagger",
        }
    }
}

fn default_decoder_vss_depth() -> usize {
    2
}

/// Complete architectural description; a network is built deterministically
/// from (config, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_dims: Vec<usize>,
    pub vss_depths: Vec<usize>,
    pub d_state: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub deep_supervision: bool,
    #[serde(default = "default_decoder_vss_depth")]
    pub decoder_vss_depth: usize,
}

impl ModelConfig {
    pub fn umamba_default(num_classes: usize, input_channels: usize, input_size: (usize, usize)) -> ModelConfig {
        ModelConfig {
            variant: Variant::Umamba,
            stage_dims: vec![48, 96, 192, 384, 768],
            vss_depths: vec![2, 2, 9, 2],
            d_state: 16,
            num_classes,
            input_channels,
            input_size,
            deep_supervision: true,
            decoder_vss_depth: 2,
        }
    }

    pub fn dagger_default(num_classes: usize, input_channels: usize, input_size: (usize, usize)) -> ModelConfig {
        ModelConfig { variant: Variant::UmambaDagger, ..ModelConfig::umamba_default(num_classes, input_channels, input_size) }
    }

    /// Desk-scale configuration for tests and demos.
    pub fn tiny(variant: Variant, num_classes: usize, input_channels: usize, size: usize) -> ModelConfig {
        ModelConfig {
            variant,
            stage_dims: vec![8, 16, 32, 64, 128],
            vss_depths: vec![1, 1, 1, 1],
            d_state: 4,
            num_classes,
            input_channels,
            input_size: (size, size),
            deep_supervision: true,
            decoder_vss_depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_dims.len() != 5 {
            return Err(Error::Config(format!("stage_dims must have 5 entries, got {}", self.stage_dims.len())));
        }
        for i in 0..4 {
            if self.stage_dims[i + 1] != 2 * self.stage_dims[i] {
                return Err(Error::Config(format!(
                    "stage_dims must double per stage: dims[{}]={} vs dims[{}]={}",
                    i, self.stage_dims[i], i + 1, self.stage_dims[i + 1]
                )));
            }
        }
        if self.vss_depths.len() != 4 || self.vss_depths.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("vss_depths must have 4 positive entries, got {:?}", self.vss_depths)));
        }
        let (h, w) = self.input_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be divisible by 32")));
        }
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::Config(format!("num_classes {} out of range [1,256]", self.num_classes)));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if self.d_state == 0 || self.decoder_vss_depth == 0 {
            return Err(Error::Config("d_state and decoder_vss_depth must be >= 1".into()));
        }
        // VSS dims must keep the expansion divisible for patch expand (d/2)
        if self.stage_dims[0] % 4 != 0 {
            return Err(Error::Config("stage_dims[0] must be divisible by 4".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<ModelConfig> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("cannot parse model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Shared encoder: optional stem, patch embed, four VSS stages.
pub struct Encoder {
    pub stem: Option<Stem>,
    pub embed: PatchEmbed,
    pub stages: Vec<EncStage>,
}

pub struct EncoderOut {
    /// Stem feature (umamba only), NCHW at 1/2 resolution.
    pub stem: Option<Tensor>,
    /// Per-stage NHWC features at 1/4, 1/8, 1/16, 1/32.
    pub stages: Vec<Tensor>,
}

impl Encoder {
    fn init(cfg: &ModelConfig, rng: &mut Stream, dtype: DType) -> Result<Encoder> {
        let dims = &cfg.stage_dims;
        let (stem, embed) = match cfg.variant {
            Variant::Umamba => (
                Some(Stem::init(cfg.input_channels, dims[0], rng, dtype)),
                PatchEmbed::init(dims[0], 2, dims[1], rng, dtype),
            ),
            Variant::UmambaDagger => (None, PatchEmbed::init(cfg.input_channels, 4, dims[1], rng, dtype)),
        };
        let mut stages = Vec::with_capacity(4);
        for (i, (&d, &depth)) in dims[1..].iter().zip(&cfg.vss_depths).enumerate() {
            let merge = (i > 0).then(|| PatchMerge::init(dims[i], rng, dtype));
            let mut bs = Vec::with_capacity(depth);
            for _ in 0..depth {
                bs.push(VssBlock::init(d, cfg.d_state, rng, dtype)?);
            }
            stages.push(EncStage { merge, blocks: bs });
        }
        Ok(Encoder { stem, embed, stages })
    }

    pub fn forward(&self, x: &Tensor) -> Result<EncoderOut> {
        let (stem_out, embed_in) = match &self.stem {
            Some(stem) => {
                let s = stem.forward(x)?;
                (Some(s.clone()), s)
            }
            None => (None, x.clone()),
        };
        let mut f = self.embed.forward(&embed_in)?;
        let mut stages = Vec::with_capacity(4);
        for stage in &self.stages {
            f = stage.forward(&f)?;
            stages.push(f.clone());
        }
        Ok(EncoderOut { stem: stem_out, stages })
    }

    fn collect(&self, out: &mut NamedParams) {
        if let Some(stem) = &self.stem {
            stem.collect("encoder.stem", out);
        }
        self.embed.collect("encoder.stage2.embed", out);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.collect(&format!("encoder.stage{}", i + 2), out);
        }
    }
}

/// CNN decoder (umamba variant).
pub struct UmambaDecoder {
    /// Bottleneck 2x up-sample, stage-5 width preserved.
    pub deconv_in: ConvT2d,
    /// Up blocks at 1/16, 1/8, 1/4, 1/2.
    pub ups: Vec<UpBlock>,
    pub res_in: ResBlock,
    pub res_fuse: ResBlock,
    pub final_head: Conv2d,
}

impl UmambaDecoder {
    fn init(cfg: &ModelConfig, rng: &mut Stream, dtype: DType) -> UmambaDecoder {
        let dims = &cfg.stage_dims;
        let k = cfg.num_classes;
        // decoder width at scale 1/2^i is dims[i] (2x the skip width);
        // the last up block hands a stem-width feature to the input level.
        let mut ups = Vec::with_capacity(4);
        for idx in 0..4 {
            let width = dims[4 - idx];
            let skip_c = dims[3 - idx];
            let next_width = if idx == 3 { dims[0] } else { dims[3 - idx] };
            ups.push(UpBlock::init(skip_c, width, next_width, k, rng, dtype));
        }
        UmambaDecoder {
            deconv_in: ConvT2d::init(dims[4], dims[4], 2, true, rng, dtype),
            ups,
            res_in: ResBlock::init(cfg.input_channels, dims[0], rng, dtype),
            res_fuse: ResBlock::init(2 * dims[0], dims[0], rng, dtype),
            final_head: conv_head(dims[0], k, rng, dtype),
        }
    }

    /// Returns heads ordered [final 1x, 1/2, 1/4, 1/8, 1/16].
    pub fn forward(&self, input: &Tensor, enc: &EncoderOut) -> Result<Vec<Tensor>> {
        let skips_nchw: Vec<Tensor> = enc
            .stages
            .iter()
            .take(3)
            .map(|t| ops::nhwc_to_nchw(t))
            .collect::<Result<_>>()?;
        let bottleneck = ops::nhwc_to_nchw(&enc.stages[3])?;
        let stem = enc.stem.as_ref().expect("umamba encoder provides a stem feature");

        let mut z = self.deconv_in.forward(&bottleneck)?;
        let mut heads_coarse_first = Vec::with_capacity(4);
        // skips at 1/16, 1/8, 1/4 come from stages 4,3,2; 1/2 from the stem
        let skip_order = [&skips_nchw[2], &skips_nchw[1], &skips_nchw[0], stem];
        for (up, skip) in self.ups.iter().zip(skip_order) {
            let (z_next, y) = up.forward(&z, skip)?;
            heads_coarse_first.push(y);
            z = z_next;
        }
        let lifted = self.res_in.forward(input)?;
        let fused = self.res_fuse.forward(&ops::cat(&[&z, &lifted], 1)?)?;
        let final_y = self.final_head.forward(&fused)?;

        let mut heads = vec![final_y];
        heads.extend(heads_coarse_first.into_iter().rev());
        Ok(heads)
    }

    fn collect(&self, out: &mut NamedParams) {
        self.deconv_in.collect("decoder.deconv_in", out);
        for (up, scale) in self.ups.iter().zip([16usize, 8, 4, 2]) {
            up.collect(&format!("decoder.up{scale}"), out);
        }
        self.res_in.collect("decoder.input_res", out);
        self.res_fuse.collect("decoder.input_fuse", out);
        self.final_head.collect("decoder.final_head", out);
    }
}

/// Mamba decoder (dagger variant).
pub struct DaggerDecoder {
    /// Stages at 1/16, 1/8, 1/4.
    pub stages: Vec<DaggerStage>,
    pub final_expand: PatchExpand,
    pub final_head: Linear,
}

impl DaggerDecoder {
    fn init(cfg: &ModelConfig, rng: &mut Stream, dtype: DType) -> Result<DaggerDecoder> {
        let dims = &cfg.stage_dims;
        let k = cfg.num_classes;
        let mut stages = Vec::with_capacity(3);
        for idx in 0..3 {
            let d_in = dims[4 - idx];
            let d_out = dims[3 - idx];
            stages.push(DaggerStage::init(d_in, d_out, cfg.decoder_vss_depth, cfg.d_state, k, rng, dtype)?);
        }
        Ok(DaggerDecoder {
            stages,
            final_expand: PatchExpand::init(dims[1], 4, rng, dtype)?,
            final_head: Linear::init(dims[1], k, true, rng, dtype),
        })
    }

    /// Returns heads ordered [final 1x, 1/4, 1/8, 1/16].
    pub fn forward(&self, enc: &EncoderOut) -> Result<Vec<Tensor>> {
        let mut f = enc.stages[3].clone();
        let mut heads_coarse_first = Vec::with_capacity(3);
        for (stage, skip) in self.stages.iter().zip([&enc.stages[2], &enc.stages[1], &enc.stages[0]]) {
            let (next, y) = stage.forward(&f, skip)?;
            heads_coarse_first.push(y);
            f = next;
        }
        let full = self.final_expand.forward(&f)?;
        let final_y = ops::nhwc_to_nchw(&self.final_head.forward(&full)?)?;
        let mut heads = vec![final_y];
        heads.extend(heads_coarse_first.into_iter().rev());
        Ok(heads)
    }

    fn collect(&self, out: &mut NamedParams) {
        for (stage, scale) in self.stages.iter().zip([16usize, 8, 4]) {
            stage.collect(&format!("decoder.up{scale}"), out);
        }
        self.final_expand.collect("decoder.final_expand", out);
        self.final_head.collect("decoder.final_head", out);
    }
}

enum Decoder {
    Umamba(UmambaDecoder),
    Dagger(DaggerDecoder),
}

/// A built network: immutable during forward; parameter mutation
/// (optimizer steps) requires exclusive access by construction.
pub struct Network {
    pub config: ModelConfig,
    pub dtype: DType,
    encoder: Encoder,
    decoder: Decoder,
}

impl Network {
    /// Deterministic build: same (config, seed, dtype) yields bit-identical
    /// parameters.
    pub fn build(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Network> {
        config.validate()?;
        if dtype == DType::U8 {
            return Err(Error::Config("network dtype must be f32 or f64".into()));
        }
        let mut rng = Stream::child(seed, "init");
        let encoder = Encoder::init(config, &mut rng, dtype)?;
        let decoder = match config.variant {
            Variant::Umamba => Decoder::Umamba(UmambaDecoder::init(config, &mut rng, dtype)),
            Variant::UmambaDagger => Decoder::Dagger(DaggerDecoder::init(config, &mut rng, dtype)?),
        };
        Ok(Network { config: config.clone(), dtype, encoder, decoder })
    }

    /// Forward pass. Returns segmentation heads ordered full-resolution
    /// first, then ascending scale (umamba: 1x, 1/2, 1/4, 1/8, 1/16;
    /// dagger: 1x, 1/4, 1/8, 1/16). All heads have num_classes channels.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("forward", format!("expected [B,C,H,W], got {s:?}")));
        }
        if s[1] != self.config.input_channels {
            return Err(Error::shape(
                "forward",
                format!("channel axis (1) has extent {}, config expects {}", s[1], self.config.input_channels),
            ));
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::shape("forward", format!("spatial axes {}x{} must be divisible by 32", s[2], s[3])));
        }
        if x.dtype() != self.dtype {
            return Err(Error::shape("forward", "input dtype differs from network dtype"));
        }
        let enc = self.encoder.forward(x)?;
        match &self.decoder {
            Decoder::Umamba(d) => d.forward(x, &enc),
            Decoder::Dagger(d) => d.forward(&enc),
        }
    }

    /// Encoder features (for tests and instrumentation).
    pub fn encode(&self, x: &Tensor) -> Result<EncoderOut> {
        self.encoder.forward(x)
    }

    /// All parameters in deterministic construction order.
    pub fn named_params(&self) -> NamedParams {
        let mut out = Vec::new();
        self.encoder.collect(&mut out);
        match &self.decoder {
            Decoder::Umamba(d) => d.collect(&mut out),
            Decoder::Dagger(d) => d.collect(&mut out),
        }
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Number of segmentation heads the forward pass emits.
    pub fn head_count(&self) -> usize {
        match self.config.variant {
            Variant::Umamba => 5,
            Variant::UmambaDagger => 4,
        }
    }

    /// Down-sampling factor of each head relative to the input, in the
    /// order `forward` returns them.
    pub fn head_scales(&self) -> Vec<usize> {
        match self.config.variant {
            Variant::Umamba => vec![1, 2, 4, 8, 16],
            Variant::UmambaDagger => vec![1, 4, 8, 16],
        }
    }
}

/// Pretrained-designation rule: exactly the VSS blocks and patch-merging
/// layers of encoder stages 2-5; never the patch embedding, stem, or any
/// decoder tensor.
pub fn is_pretrained_designated(name: &str) -> bool {
    let Some(rest) = name.strip_prefix("encoder.stage") else {
        return false;
    };
    let Some((stage, tail)) = rest.split_once('.') else {
        return false;
    };
    matches!(stage, "2" | "3" | "4" | "5") && (tail.starts_with("block") || tail.starts_with("merge."))
}
