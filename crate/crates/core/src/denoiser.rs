//! UNet denoiser predicting the clean mask from a noised one.
//!
//! The encoder runs on the noised mask alone and produces one feature map per
//! adapter stage, at exactly the adapter's resolutions. Each map is fused with
//! the matching conditioning map before it is handed to the decoder as a skip
//! connection, so every decoder level sees conditioned features.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::{overlap_kernel, Fusion, FusionMode, PyramidFeatures};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, group_count, Conv2d, GroupNorm, Linear};
use crate::params::ParamBuilder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub classes: usize,
    pub stem_channels: usize,
    /// Encoder width per scale.
    pub widths: Vec<usize>,
    /// Downsampling factor into each scale; must equal the adapter strides.
    pub strides: Vec<usize>,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            stem_channels: 8,
            widths: vec![32, 64, 160, 256],
            strides: vec![4, 2, 2, 2],
            time_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.classes < 2 {
            out.push(format!("denoiser needs at least 2 classes, got {}", self.classes));
        }
        if self.widths.len() != self.strides.len() {
            out.push(format!(
                "denoiser has {} widths but {} strides",
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.widths.iter().any(|w| *w == 0) || self.stem_channels == 0 {
            out.push("denoiser widths must be positive".into());
        }
        if self.strides.iter().any(|s| *s < 2) {
            out.push("denoiser strides must be >= 2".into());
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            out.push(format!("denoiser.time_dim must be even and positive, got {}", self.time_dim));
        }
        out
    }
}

/// Sinusoidal embedding: `sin(t·ω_k)` for the first half, `cos(t·ω_k)` for
/// the second, with `ω_k = 10000^(−2k/dim)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Invalid(format!("timestep embedding width must be even, got {dim}")));
    }
    if t < 0.0 {
        return Err(Error::Invalid(format!("negative timestep {t}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| 10000f64.powf(-2.0 * k as f64 / dim as f64))
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

/// `[B, dim]` embeddings for a batch of timesteps.
pub fn timestep_embedding_batch(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embedding(t as f64, dim)?);
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Pre-activation residual block with an additive timestep projection.
#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut ParamBuilder<'_>, in_ch: usize, out_ch: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut b.pp("norm1"), group_count(in_ch), in_ch)?,
            conv1: Conv2d::new(&mut b.pp("conv1"), in_ch, out_ch, 3, 1, 1)?,
            time: Linear::new(&mut b.pp("time"), temb, out_ch)?,
            norm2: GroupNorm::new(&mut b.pp("norm2"), group_count(out_ch), out_ch)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), out_ch, out_ch, 3, 1, 1)?,
            skip: if in_ch == out_ch {
                None
            } else {
                Some(Conv2d::new(&mut b.pp("skip"), in_ch, out_ch, 1, 1, 0)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    /// 1×1 channel reduction, applied before upsampling.
    proj: Conv2d,
    block: ResBlock,
    factor: usize,
}

#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    /// Raw per-class network output (class logits), unbounded.
    pub logits: Tensor,
    /// Clean-mask estimate in the diffusion domain, `2·softmax(logits) − 1`.
    pub x0_hat: Tensor,
    /// Pre-fusion encoder features, one per scale.
    pub encoder_features: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    time_fc1: Linear,
    time_fc2: Linear,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    enc_blocks: Vec<ResBlock>,
    fusions: Vec<Fusion>,
    mid: ResBlock,
    /// Coarse to fine: level `i` lands on scale `S − 2 − i`; the last lands on the stem.
    ups: Vec<DecoderLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Denoiser {
    /// `cond_dims` are the channel counts of the conditioning pyramid.
    pub fn new(b: &mut ParamBuilder<'_>, config: &DenoiserConfig, cond_dims: &[usize], mode: FusionMode) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        if cond_dims.len() != config.widths.len() {
            return Err(Error::Config(format!(
                "denoiser has {} scales but the conditioning pyramid has {}",
                config.widths.len(),
                cond_dims.len()
            )));
        }
        let temb = 2 * config.time_dim;
        let c0 = config.stem_channels;
        let k = config.classes;
        let ws = &config.widths;
        let s_count = ws.len();

        let time_fc1 = Linear::new(&mut b.pp("time.fc1"), config.time_dim, temb)?;
        let time_fc2 = Linear::new(&mut b.pp("time.fc2"), temb, temb)?;
        let stem = Conv2d::new(&mut b.pp("stem"), k, c0, 3, 1, 1)?;

        let mut downs = Vec::with_capacity(s_count);
        let mut enc_blocks = Vec::with_capacity(s_count);
        let mut fusions = Vec::with_capacity(s_count);
        let mut in_ch = c0;
        for s in 0..s_count {
            let (kernel, pad) = overlap_kernel(config.strides[s]);
            downs.push(Conv2d::new(&mut b.pp(&format!("enc{s}.down")), in_ch, ws[s], kernel, config.strides[s], pad)?);
            enc_blocks.push(ResBlock::new(&mut b.pp(&format!("enc{s}.block")), ws[s], ws[s], temb)?);
            fusions.push(Fusion::new(&mut b.pp(&format!("fuse{s}")), mode, ws[s], cond_dims[s])?);
            in_ch = ws[s];
        }
        let mid = ResBlock::new(&mut b.pp("mid"), ws[s_count - 1], ws[s_count - 1], temb)?;

        let mut ups = Vec::with_capacity(s_count);
        for s in (0..s_count - 1).rev() {
            let mut lb = b.pp(&format!("dec{s}"));
            ups.push(DecoderLevel {
                proj: Conv2d::new(&mut lb.pp("proj"), ws[s + 1], ws[s], 1, 1, 0)?,
                block: ResBlock::new(&mut lb.pp("block"), 2 * ws[s], ws[s], temb)?,
                factor: config.strides[s + 1],
            });
        }
        let mut lb = b.pp("dec_stem");
        ups.push(DecoderLevel {
            proj: Conv2d::new(&mut lb.pp("proj"), ws[0], c0, 1, 1, 0)?,
            block: ResBlock::new(&mut lb.pp("block"), 2 * c0, c0, temb)?,
            factor: config.strides[0],
        });
        let out_norm = GroupNorm::new(&mut b.pp("out_norm"), group_count(c0), c0)?;
        let out_conv = Conv2d::new(&mut b.pp("out"), c0, k, 3, 1, 1)?;
        Ok(Self {
            config: config.clone(),
            time_fc1,
            time_fc2,
            stem,
            downs,
            enc_blocks,
            fusions,
            mid,
            ups,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn time_embedding(&self, ts: &[usize], like: &Tensor) -> Result<Tensor> {
        let e = timestep_embedding_batch(ts, self.config.time_dim, like.dtype(), like.device())?;
        Ok(self.time_fc2.forward(&self.time_fc1.forward(&e)?.silu()?)?.silu()?)
    }

    fn check_input(&self, x_t: &Tensor, ts: &[usize]) -> Result<()> {
        let (b, k, h, w) = x_t.dims4()?;
        if k != self.config.classes {
            return shape_err(format!("expected {} mask channels, got {k}", self.config.classes));
        }
        if ts.len() != b {
            return shape_err(format!("{} timesteps for batch of {b}", ts.len()));
        }
        let total: usize = self.config.strides.iter().product();
        if h % total != 0 || w % total != 0 {
            return shape_err(format!("{h}x{w} input not divisible by cumulative stride {total}"));
        }
        Ok(())
    }

    fn encode_inner(&self, x_t: &Tensor, temb: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let h0 = self.stem.forward(x_t)?;
        let mut feats = Vec::with_capacity(self.downs.len());
        let mut h = h0.clone();
        for (down, block) in self.downs.iter().zip(&self.enc_blocks) {
            h = block.forward(&down.forward(&h)?, temb)?;
            feats.push(h.clone());
        }
        Ok((h0, feats))
    }

    /// Per-scale encoder features `Enc(x_t, t)`.
    pub fn encode(&self, x_t: &Tensor, ts: &[usize]) -> Result<Vec<Tensor>> {
        self.check_input(x_t, ts)?;
        let temb = self.time_embedding(ts, x_t)?;
        Ok(self.encode_inner(x_t, &temb)?.1)
    }

    /// Clean-mask prediction `D([Enc(x_t, t) ⊕ c], t)`.
    pub fn predict_x0(&self, x_t: &Tensor, cond: &PyramidFeatures, ts: &[usize]) -> Result<DenoiserOutput> {
        self.check_input(x_t, ts)?;
        let temb = self.time_embedding(ts, x_t)?;
        let (h0, feats) = self.encode_inner(x_t, &temb)?;
        if cond.stages.len() != feats.len() {
            return shape_err(format!(
                "conditioning pyramid has {} stages, encoder has {}",
                cond.stages.len(),
                feats.len()
            ));
        }
        let fused = feats
            .iter()
            .zip(&cond.stages)
            .zip(&self.fusions)
            .map(|((z, c), f)| f.forward(z, c))
            .collect::<Result<Vec<_>>>()?;

        let s_count = fused.len();
        let mut h = self.mid.forward(&fused[s_count - 1], &temb)?;
        for (i, level) in self.ups.iter().enumerate() {
            let skip = if i + 1 < s_count { &fused[s_count - 2 - i] } else { &h0 };
            let up = nn::upsample_nearest(&level.proj.forward(&h)?, level.factor)?;
            h = level.block.forward(&Tensor::cat(&[&up, skip], 1)?, &temb)?;
        }
        let logits = self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)?;
        let x0_hat = nn::softmax(&logits, 1)?.affine(2.0, -1.0)?;
        Ok(DenoiserOutput {
            logits,
            x0_hat,
            encoder_features: feats,
        })
    }
}
