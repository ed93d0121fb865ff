//! Minimal layer set on top of candle tensors.

use candle_core::{Module, Tensor, Var, D};

use crate::error::Result;
use crate::params::{Init, ParamBuilder};

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// Weights truncated-normal with std 0.02, zero bias.
    pub fn new(b: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(b, in_dim, out_dim, Init::TruncNormal(0.02))
    }

    pub fn with_init(b: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[out_dim, in_dim], init)?,
            bias: b.get("bias", &[out_dim], Init::Zeros)?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn bias(&self) -> &Tensor {
        self.bias.as_tensor()
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = self.weight.as_tensor().t()?;
        x.broadcast_matmul(&w)?.broadcast_add(self.bias.as_tensor())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Uniform fan-in initialization, matching the usual convolution default.
    pub fn new(
        b: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self::with_init(b, in_ch, out_ch, kernel, stride, padding, Init::Uniform(bound), Init::Uniform(bound))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        b: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[out_ch, in_ch, kernel, kernel], weight_init)?,
            bias: b.get("bias", &[out_ch], bias_init)?,
            stride,
            padding,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = crate::conv::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        let c = self.bias.dims()[0];
        y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)
    }
}

/// Normalization over the trailing dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[dim], Init::Ones)?,
            bias: b.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    weight: Var,
    bias: Var,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(b: &mut ParamBuilder<'_>, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(crate::Error::Config(format!(
                "group norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            weight: b.get("weight", &[channels], Init::Ones)?,
            bias: b.get("bias", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let gc = g.broadcast_sub(&mean)?;
        let var = gc.sqr()?.mean_keepdim(D::Minus1)?;
        let gn = gc.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, h, w))?;
        gn.broadcast_mul(&self.weight.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)
    }
}

/// Largest group count not above 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Numerically stable softmax; the shift by the maximum carries no gradient.
pub fn softmax(x: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(dim)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Nearest-neighbour upsampling by an integer factor, built from broadcast
/// and reshape so gradients accumulate correctly through shared inputs.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .contiguous()?
        .reshape((b, c, h * factor, w * factor))
}

/// `[B, N, C]` tokens to a `[B, C, H, W]` map.
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let (b, _n, c) = x.dims3()?;
    x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))
}

/// `[B, C, H, W]` map to `[B, H*W, C]` tokens.
pub fn map_to_tokens(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()
}
