//! Minimal differentiable building blocks over candle tensors.
//!
//! Feature maps are laid out `(B * F, C, H, W)`: spatial ops treat every frame
//! as an image, temporal attention regroups by pixel location.

use candle_core::{DType, Tensor, D};

use super::im2col::im2col;
use super::params::{Init, ParamBuilder};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(pb, name, d_in, d_out, true, Init::FanIn(d_in))
    }

    pub fn with_init(
        pb: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            let weight = pb.param("weight", &[d_out, d_in], init)?;
            let bias = if bias {
                Some(pb.param("bias", &[d_out], Init::FanIn(d_in))?)
            } else {
                None
            };
            Ok(Self { weight, bias })
        })
    }

    /// `x` has shape `(..., d_in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = dims[dims.len() - 1];
        let flat = x.reshape(((), d_in))?.matmul(&self.weight.t()?)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = flat.dim(1)?;
        let y = flat.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_init(pb, name, c_in, c_out, kernel, stride, Init::FanIn(c_in * kernel * kernel))
    }

    pub fn with_init(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let bias_init = match init {
            Init::Zeros => Init::Zeros,
            _ => Init::FanIn(c_in * kernel * kernel),
        };
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.param("weight", &[c_out, c_in, kernel, kernel], init)?,
                bias: pb.param("bias", &[c_out], bias_init)?,
                stride,
                padding: kernel / 2,
            })
        })
    }

    /// Convolution as patch extraction plus one matmul. The CPU backend's
    /// direct conv kernels are several times slower for these sizes.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (o, _, k, _) = self.weight.dims4()?;
        let (s, p) = (self.stride, self.padding);
        let (ho, wo) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        let cols = if k == 1 && s == 1 {
            x.transpose(0, 1)?.reshape((c, n * h * w))?
        } else {
            im2col(x, k, s, p)?
        };
        let y = self.weight.reshape((o, c * k * k))?.matmul(&cols)?;
        Ok(y.reshape((o, n, ho, wo))?
            .transpose(0, 1)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

/// Largest group count <= 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                gamma: pb.param("weight", &[channels], Init::Ones)?,
                beta: pb.param("bias", &[channels], Init::Zeros)?,
                groups: group_count(channels),
                eps: 1e-5,
            })
        })
    }

    /// Normalizes `(N, C, ...)` over each group of channels and all trailing dims.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (n, c) = (dims[0], dims[1]);
        let grouped = x.reshape((n, self.groups, ()))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let mut affine_shape = vec![1, c];
        affine_shape.extend(std::iter::repeat_n(1, dims.len() - 2));
        let normed = normed.reshape(dims.as_slice())?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(affine_shape.as_slice())?)?
            .broadcast_add(&self.beta.reshape(affine_shape.as_slice())?)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Softmax over the last dimension, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Multi-head self-attention over token sequences `(N, L, C)` with a pre-norm
/// and residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: GroupNorm,
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, heads: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                norm: GroupNorm::new(pb, "norm", channels)?,
                qkv: Linear::new(pb, "qkv", channels, 3 * channels)?,
                out: Linear::new(pb, "out", channels, channels)?,
                heads,
            })
        })
    }

    /// `tokens`: `(N, L, C)`. `position`: optional `(L, C)` encoding added to
    /// queries and keys' input.
    pub fn forward(&self, tokens: &Tensor, position: Option<&Tensor>) -> Result<Tensor> {
        let (n, l, c) = tokens.dims3()?;
        let hd = c / self.heads;
        // group norm over channels: treat tokens as (N, C, L)
        let normed = self
            .norm
            .forward(&tokens.transpose(1, 2)?.contiguous()?)?
            .transpose(1, 2)?;
        let normed = match position {
            Some(p) => normed.broadcast_add(p)?,
            None => normed,
        };
        let qkv = self.qkv.forward(&normed)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * c, c)?
                .reshape((n, l, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scale = 1.0 / (hd as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = softmax_last(&scores)?;
        let mixed = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, l, c))?;
        Ok((tokens + self.out.forward(&mixed)?)?)
    }
}

/// Fixed sinusoidal encoding, `(len, dim)` rows for positions `0..len`.
pub fn sinusoidal_table(positions: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let freq = |i: usize| (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        data.extend((0..half).map(|i| (p * freq(i)).sin()));
        data.extend((0..half).map(|i| (p * freq(i)).cos()));
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    let t = Tensor::from_vec(data, (positions.len(), dim), &candle_core::Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}
