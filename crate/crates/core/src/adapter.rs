//! Pyramid vision transformer adapter.
//!
//! The adapter turns the conditioning image into a pyramid of feature maps
//! at strides `4, 8, 16, 32` (default layout). Its first stage also embeds
//! the current noised mask and the timestep, so the conditioning features
//! track the state of the reverse chain. Attention inside each stage uses
//! spatially reduced keys and values: with reduction ratio `r`, a grid of
//! `N` query tokens attends to `N / r²` key tokens.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::denoiser::timestep_embedding_batch;
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Conv2d, LayerNorm, Linear};
use crate::params::{Init, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Additive,
    Concat,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Additive => write!(f, "additive"),
            FusionMode::Concat => write!(f, "concat"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "additive" => Ok(FusionMode::Additive),
            "concat" => Ok(FusionMode::Concat),
            other => Err(format!("unknown fusion mode {other:?} (expected additive or concat)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub image_channels: usize,
    /// Channels of the noised mask injected at stage one (the class count).
    pub mask_channels: usize,
    pub stage_dims: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub reduction_ratios: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub depths: Vec<usize>,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    pub fusion_mode: FusionMode,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            mask_channels: 4,
            stage_dims: vec![32, 64, 160, 256],
            stage_strides: vec![4, 2, 2, 2],
            reduction_ratios: vec![8, 4, 2, 1],
            num_heads: vec![1, 2, 5, 8],
            depths: vec![1, 1, 1, 1],
            mlp_ratio: 4,
            time_dim: 64,
            fusion_mode: FusionMode::Additive,
        }
    }
}

impl AdapterConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_dims.len()
    }

    /// Per-head attention width `d` at a stage.
    pub fn head_dim(&self, stage: usize) -> usize {
        self.stage_dims[stage] / self.num_heads[stage]
    }

    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.stage_strides
            .iter()
            .scan(1, |acc, s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    /// Structural problems independent of input size.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let s = self.num_stages();
        if s < 2 {
            out.push(format!("adapter needs at least 2 stages, got {s}"));
        }
        for (name, len) in [
            ("stage_strides", self.stage_strides.len()),
            ("reduction_ratios", self.reduction_ratios.len()),
            ("num_heads", self.num_heads.len()),
            ("depths", self.depths.len()),
        ] {
            if len != s {
                out.push(format!("adapter.{name} has {len} entries, expected {s}"));
            }
        }
        if !out.is_empty() {
            return out;
        }
        for i in 0..s {
            if self.stage_dims[i] == 0 {
                out.push(format!("adapter stage {i} has zero width"));
            }
            if self.num_heads[i] == 0 || self.stage_dims[i] % self.num_heads[i] != 0 {
                out.push(format!(
                    "adapter stage {i}: width {} not divisible by {} heads",
                    self.stage_dims[i], self.num_heads[i]
                ));
            }
            if self.reduction_ratios[i] == 0 {
                out.push(format!("adapter stage {i}: reduction ratio must be >= 1"));
            }
            if self.stage_strides[i] < 2 {
                out.push(format!("adapter stage {i}: stride must be >= 2 for a shrinking pyramid"));
            }
            if i > 0 && self.stage_dims[i] < self.stage_dims[i - 1] {
                out.push(format!("adapter stage {i}: widths must be non-decreasing"));
            }
        }
        if self.image_channels == 0 || self.mask_channels == 0 {
            out.push("adapter input channel counts must be positive".into());
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            out.push(format!("adapter.time_dim must be even and positive, got {}", self.time_dim));
        }
        if self.mlp_ratio == 0 {
            out.push("adapter.mlp_ratio must be positive".into());
        }
        out
    }

    /// Problems for a concrete `h × w` input.
    pub fn input_problems(&self, h: usize, w: usize) -> Vec<String> {
        let mut out = Vec::new();
        let (mut gh, mut gw) = (h, w);
        for (i, (&stride, &r)) in self.stage_strides.iter().zip(&self.reduction_ratios).enumerate() {
            if stride == 0 || gh % stride != 0 || gw % stride != 0 {
                out.push(format!("{gh}x{gw} grid not divisible by stage {i} stride {stride}"));
                return out;
            }
            gh /= stride;
            gw /= stride;
            if r == 0 || gh % r != 0 || gw % r != 0 {
                out.push(format!("stage {i} grid {gh}x{gw} not divisible by reduction ratio {r}"));
            }
        }
        out
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let p = self.input_problems(h, w);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape(p.join("; ")))
        }
    }

    /// Spatial grid of every stage for an `h × w` input.
    pub fn stage_grids(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        self.check_input(h, w)?;
        Ok(self
            .cumulative_strides()
            .iter()
            .map(|s| (h / s, w / s))
            .collect())
    }
}

/// Multi-scale conditioning features, coarsest last.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub stages: Vec<Tensor>,
    pub reduction_ratios: Vec<usize>,
}

impl PyramidFeatures {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.stages.iter().map(|s| s.dims().to_vec()).collect()
    }

    /// Same geometry, all values zero.
    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self {
            stages: self.stages.iter().map(|s| s.zeros_like()).collect::<candle_core::Result<_>>()?,
            reduction_ratios: self.reduction_ratios.clone(),
        })
    }

    pub fn check(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return shape_err("pyramid needs at least 2 stages");
        }
        for w in self.stages.windows(2) {
            let (_, c0, h0, w0) = w[0].dims4()?;
            let (_, c1, h1, w1) = w[1].dims4()?;
            if !(h1 < h0 && w1 < w0) || c1 < c0 || h0 % h1 != 0 || w0 % w1 != 0 {
                return shape_err(format!("pyramid stages out of order: {:?} then {:?}", w[0].dims(), w[1].dims()));
            }
        }
        Ok(())
    }
}

/// Overlapping convolutional patch embedding followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    conv: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(b: &mut ParamBuilder<'_>, in_ch: usize, dim: usize, stride: usize) -> Result<Self> {
        let (kernel, pad) = overlap_kernel(stride);
        Ok(Self {
            conv: Conv2d::new(&mut b.pp("proj"), in_ch, dim, kernel, stride, pad)?,
            norm: LayerNorm::new(&mut b.pp("norm"), dim)?,
        })
    }

    /// Returns `[B, N, C]` tokens and the `(H, W)` grid they came from.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (_, _, h, w) = x.dims4()?;
        let s = self.conv.stride();
        if h % s != 0 || w % s != 0 {
            return shape_err(format!("{h}x{w} input not divisible by patch stride {s}"));
        }
        let y = self.conv.forward(x)?;
        let (_, _, gh, gw) = y.dims4()?;
        let tokens = self.norm.forward(&nn::map_to_tokens(&y)?)?;
        Ok((tokens, (gh, gw)))
    }
}

/// Kernel and padding for an overlapping embedding at `stride`: kernel
/// `2·stride − 1` so neighbouring patches share a border, padding chosen so
/// the output grid is exactly `input / stride`.
pub fn overlap_kernel(stride: usize) -> (usize, usize) {
    (2 * stride - 1, stride - 1)
}

/// Multi-head attention whose keys and values come from a grid downsampled by
/// `ratio` per side (strided `ratio × ratio` aggregation, then layer norm).
#[derive(Clone, Debug)]
pub struct SraAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    ratio: usize,
}

impl SraAttention {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, heads: usize, ratio: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        if ratio == 0 {
            return Err(Error::Config("reduction ratio must be >= 1".into()));
        }
        let reduce = if ratio > 1 {
            Some((
                Conv2d::new(&mut b.pp("sr"), dim, dim, ratio, ratio, 0)?,
                LayerNorm::new(&mut b.pp("sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&mut b.pp("q"), dim, dim)?,
            k: Linear::new(&mut b.pp("k"), dim, dim)?,
            v: Linear::new(&mut b.pp("v"), dim, dim)?,
            proj: Linear::new(&mut b.pp("proj"), dim, dim)?,
            reduce,
            heads,
            ratio,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    /// Query, key, value and output projections in that order.
    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.proj]
    }

    pub fn forward(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, grid)?.0)
    }

    /// Output `[B, N, C]` and the attention weights `[B, heads, N, N / r²]`.
    pub fn forward_with_weights(&self, x: &Tensor, grid: (usize, usize)) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = x.dims3()?;
        let (h, w) = grid;
        if n != h * w {
            return shape_err(format!("{n} tokens do not fill a {h}x{w} grid"));
        }
        if h % self.ratio != 0 || w % self.ratio != 0 {
            return shape_err(format!("reduction ratio {} does not divide {h}x{w}", self.ratio));
        }
        if c % self.heads != 0 {
            return shape_err(format!("width {c} not divisible by {} heads", self.heads));
        }
        let d = c / self.heads;
        let kv_src = match &self.reduce {
            Some((conv, norm)) => {
                let m = conv.forward(&nn::tokens_to_map(x, h, w)?)?;
                norm.forward(&nn::map_to_tokens(&m)?)?
            }
            None => x.clone(),
        };
        let m = kv_src.dim(1)?;
        let split = |t: Tensor, len: usize| -> candle_core::Result<Tensor> {
            t.reshape((b, len, self.heads, d))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(x)?, n)?;
        let k = split(self.k.forward(&kv_src)?, m)?;
        let v = split(self.v.forward(&kv_src)?, m)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (d as f64).sqrt()))?;
        let attn = nn::softmax(&scores, 3)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        Ok((self.proj.forward(&out)?, attn))
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

#[derive(Clone, Debug)]
pub struct PvtBlock {
    norm1: LayerNorm,
    attn: SraAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl PvtBlock {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, heads: usize, ratio: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut b.pp("norm1"), dim)?,
            attn: SraAttention::new(&mut b.pp("attn"), dim, heads, ratio)?,
            norm2: LayerNorm::new(&mut b.pp("norm2"), dim)?,
            mlp: Mlp {
                fc1: Linear::new(&mut b.pp("fc1"), dim, dim * mlp_ratio)?,
                fc2: Linear::new(&mut b.pp("fc2"), dim * mlp_ratio, dim)?,
            },
        })
    }

    pub fn attention(&self) -> &SraAttention {
        &self.attn
    }

    pub fn forward(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, grid)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

#[derive(Clone, Debug)]
struct PvtStage {
    embed: PatchEmbed,
    blocks: Vec<PvtBlock>,
    norm: LayerNorm,
}

impl PvtStage {
    fn run_blocks(&self, mut tokens: Tensor, grid: (usize, usize)) -> Result<Tensor> {
        for blk in &self.blocks {
            tokens = blk.forward(&tokens, grid)?;
        }
        let tokens = self.norm.forward(&tokens)?;
        Ok(nn::tokens_to_map(&tokens, grid.0, grid.1)?)
    }
}

/// The conditioning network E(I, x_t, t).
#[derive(Clone, Debug)]
pub struct PvtAdapter {
    config: AdapterConfig,
    stages: Vec<PvtStage>,
    mask_embed: Conv2d,
    time_proj: Linear,
}

impl PvtAdapter {
    pub fn new(b: &mut ParamBuilder<'_>, config: &AdapterConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let mut stages = Vec::with_capacity(config.num_stages());
        let mut in_ch = config.image_channels;
        for s in 0..config.num_stages() {
            let dim = config.stage_dims[s];
            let mut sb = b.pp(&format!("stage{s}"));
            let embed = PatchEmbed::new(&mut sb.pp("embed"), in_ch, dim, config.stage_strides[s])?;
            let blocks = (0..config.depths[s])
                .map(|i| {
                    PvtBlock::new(
                        &mut sb.pp(&format!("block{i}")),
                        dim,
                        config.num_heads[s],
                        config.reduction_ratios[s],
                        config.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&mut sb.pp("norm"), dim)?;
            stages.push(PvtStage { embed, blocks, norm });
            in_ch = dim;
        }
        let (kernel, pad) = overlap_kernel(config.stage_strides[0]);
        let d0 = config.stage_dims[0];
        // Both injection paths start at zero so the adapter is image-only at init.
        let mask_embed = Conv2d::with_init(
            &mut b.pp("mask_embed"),
            config.mask_channels,
            d0,
            kernel,
            config.stage_strides[0],
            pad,
            Init::Zeros,
            Init::Zeros,
        )?;
        let time_proj = Linear::with_init(&mut b.pp("time_proj"), config.time_dim, d0, Init::Zeros)?;
        Ok(Self {
            config: config.clone(),
            stages,
            mask_embed,
            time_proj,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn block(&self, stage: usize, index: usize) -> Option<&PvtBlock> {
        self.stages.get(stage)?.blocks.get(index)
    }

    /// Patch-embeds `x` with the given stage's embedding.
    pub fn patch_embed(&self, x: &Tensor, stage: usize) -> Result<(Tensor, (usize, usize))> {
        let st = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::Invalid(format!("no adapter stage {stage}")))?;
        st.embed.forward(x)
    }

    /// Conditioning pyramid for image `I`, noised mask `x_t` and per-item
    /// timesteps `ts`.
    pub fn extract_conditioning(&self, image: &Tensor, x_t: &Tensor, ts: &[usize]) -> Result<PyramidFeatures> {
        let (b, ci, h, w) = image.dims4()?;
        let (bm, cm, hm, wm) = x_t.dims4()?;
        if (b, h, w) != (bm, hm, wm) {
            return shape_err(format!("image {:?} and noised mask {:?} disagree", image.dims(), x_t.dims()));
        }
        if ci != self.config.image_channels || cm != self.config.mask_channels {
            return shape_err(format!(
                "expected {} image and {} mask channels, got {ci} and {cm}",
                self.config.image_channels, self.config.mask_channels
            ));
        }
        if ts.len() != b {
            return shape_err(format!("{} timesteps for batch of {b}", ts.len()));
        }
        self.forward_inner(image, Some((x_t, ts)))
    }

    /// Pyramid of the image alone, without the noised-mask and timestep injection.
    pub fn image_pyramid(&self, image: &Tensor) -> Result<PyramidFeatures> {
        self.forward_inner(image, None)
    }

    fn forward_inner(&self, image: &Tensor, inject: Option<(&Tensor, &[usize])>) -> Result<PyramidFeatures> {
        let (_, _, h, w) = image.dims4()?;
        self.config.check_input(h, w)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for (s, stage) in self.stages.iter().enumerate() {
            let (mut tokens, grid) = stage.embed.forward(&x)?;
            if s == 0 {
                if let Some((x_t, ts)) = inject {
                    let m = nn::map_to_tokens(&self.mask_embed.forward(x_t)?)?;
                    let temb = timestep_embedding_batch(ts, self.config.time_dim, image.dtype(), image.device())?;
                    let tproj = self.time_proj.forward(&temb)?.unsqueeze(1)?;
                    tokens = (tokens + m)?.broadcast_add(&tproj)?;
                }
            }
            x = stage.run_blocks(tokens, grid)?;
            outs.push(x.clone());
        }
        Ok(PyramidFeatures {
            stages: outs,
            reduction_ratios: self.config.reduction_ratios.clone(),
        })
    }
}

/// Channel concatenation of two maps with equal batch and spatial dims.
pub fn concat_channels(z: &Tensor, c: &Tensor) -> Result<Tensor> {
    check_spatial(z, c)?;
    Ok(Tensor::cat(&[z, c], 1)?)
}

fn check_spatial(z: &Tensor, c: &Tensor) -> Result<()> {
    let (bz, _, hz, wz) = z.dims4()?;
    let (bc, _, hc, wc) = c.dims4()?;
    if (bz, hz, wz) != (bc, hc, wc) {
        return shape_err(format!("cannot fuse {:?} with {:?}", z.dims(), c.dims()));
    }
    Ok(())
}

/// Learned fusion `z ⊕ c` at one scale. Output always has `z`'s shape.
#[derive(Clone, Debug)]
pub struct Fusion {
    mode: FusionMode,
    proj: Option<Conv2d>,
}

impl Fusion {
    pub fn new(b: &mut ParamBuilder<'_>, mode: FusionMode, z_ch: usize, c_ch: usize) -> Result<Self> {
        let proj = match mode {
            FusionMode::Additive if z_ch == c_ch => None,
            FusionMode::Additive => Some(Conv2d::with_init(
                &mut b.pp("proj"),
                c_ch,
                z_ch,
                1,
                1,
                0,
                Init::Identity,
                Init::Zeros,
            )?),
            FusionMode::Concat => Some(Conv2d::new(&mut b.pp("proj"), z_ch + c_ch, z_ch, 1, 1, 0)?),
        };
        Ok(Self { mode, proj })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn forward(&self, z: &Tensor, c: &Tensor) -> Result<Tensor> {
        check_spatial(z, c)?;
        match (self.mode, &self.proj) {
            (FusionMode::Additive, None) => {
                if z.dims() != c.dims() {
                    return shape_err(format!("additive fusion of {:?} with {:?}", z.dims(), c.dims()));
                }
                Ok((z + c)?)
            }
            (FusionMode::Additive, Some(p)) => Ok((z + p.forward(c)?)?),
            (FusionMode::Concat, Some(p)) => Ok(p.forward(&concat_channels(z, c)?)?),
            (FusionMode::Concat, None) => unreachable!("concat fusion always owns a projection"),
        }
    }
}

/// Largest absolute entry, for finiteness and difference checks.
pub fn max_abs(x: &Tensor) -> Result<f64> {
    Ok(x.abs()?.flatten_all()?.max(D::Minus1)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
