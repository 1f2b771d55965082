use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;

use crate::error::Result;
use crate::nn::{group_norm, layer_norm, LayerNorm, multi_head_attention, sinusoidal_embedding, Conv2d, Init, Linear};

fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::silu(x)
}

/// Two 3x3 convolutions with group norm, an optional additive timestep
/// projection, and a 1x1 skip when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, temb_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(&mut init.pp("norm1"), c_in)?,
            conv1: Conv2d::new(&mut init.pp("conv1"), c_in, c_out, 3, 1)?,
            temb: temb_dim.map(|d| Linear::new(&mut init.pp("temb"), d, c_out)).transpose()?,
            norm2: group_norm(&mut init.pp("norm2"), c_out)?,
            conv2: Conv2d::new(&mut init.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: (c_in != c_out).then(|| Conv2d::new(&mut init.pp("skip"), c_in, c_out, 1, 1)).transpose()?,
        })
    }

    pub fn parameter_count(c_in: usize, c_out: usize, temb_dim: Option<usize>) -> usize {
        2 * c_in
            + Conv2d::parameter_count(c_in, c_out, 3)
            + temb_dim.map_or(0, |d| Linear::parameter_count(d, c_out))
            + 2 * c_out
            + Conv2d::parameter_count(c_out, c_out, 3)
            + if c_in != c_out { Conv2d::parameter_count(c_in, c_out, 1) } else { 0 }
    }

    /// `x: [N, C, H, W]`; `temb: [1, D]` broadcast over N.
    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            let t = proj.forward(&silu(t)?)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_add(&t)?;
        }
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Pre-norm attention projections shared by the three attention flavours.
#[derive(Debug, Clone)]
struct Attention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(init: &mut Init, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: layer_norm(&mut init.pp("norm"), dim)?,
            q: Linear::new(&mut init.pp("q"), dim, dim)?,
            k: Linear::new(&mut init.pp("k"), context_dim, dim)?,
            v: Linear::new(&mut init.pp("v"), context_dim, dim)?,
            out: Linear::new(&mut init.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn parameter_count(dim: usize, context_dim: usize) -> usize {
        2 * dim + 2 * Linear::parameter_count(dim, dim) + 2 * Linear::parameter_count(context_dim, dim)
    }

    /// Residual attention over `[B, N, C]` tokens; `context` defaults to the
    /// normalized tokens themselves.
    fn forward(&self, tokens: &Tensor, context: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let normed = self.norm.forward(tokens)?;
        let ctx = context.unwrap_or(&normed);
        let (att, weights) =
            multi_head_attention(&self.q.forward(&normed)?, &self.k.forward(ctx)?, &self.v.forward(ctx)?, self.heads)?;
        Ok(((tokens + self.out.forward(&att)?)?, weights))
    }
}

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (f, c, h, w) = x.dims4()?;
    Ok(x.reshape((f, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (f, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.reshape((f, c, h, w))?)
}

/// Spatial self-attention within each frame.
#[derive(Debug, Clone)]
pub struct SelfAttention(Attention);

impl SelfAttention {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self(Attention::new(init, dim, dim, heads)?))
    }

    pub fn parameter_count(dim: usize) -> usize {
        Attention::parameter_count(dim, dim)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        from_tokens(&self.0.forward(&to_tokens(x)?, None)?.0, h, w)
    }
}

/// Spatial tokens of each frame attend to that frame's audio window.
#[derive(Debug, Clone)]
pub struct AudioCrossAttention(Attention);

impl AudioCrossAttention {
    pub fn new(init: &mut Init, dim: usize, audio_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self(Attention::new(init, dim, audio_dim, heads)?))
    }

    pub fn parameter_count(dim: usize, audio_dim: usize) -> usize {
        Attention::parameter_count(dim, audio_dim)
    }

    /// `audio: [F, 2k+1, D_a]`. Returns the updated features and the
    /// attention weights `[F, heads, H*W, 2k+1]`.
    pub fn forward(&self, x: &Tensor, audio: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let (out, weights) = self.0.forward(&to_tokens(x)?, Some(audio))?;
        Ok((from_tokens(&out, h, w)?, weights))
    }
}

/// Attention across frames at every spatial location, with sinusoidal frame
/// positions added to the queries' and keys' input.
#[derive(Debug, Clone)]
pub struct TemporalAttention(Attention);

impl TemporalAttention {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self(Attention::new(init, dim, dim, heads)?))
    }

    pub fn parameter_count(dim: usize) -> usize {
        Attention::parameter_count(dim, dim)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (f, c, h, w) = x.dims4()?;
        // [F, C, H, W] -> [H*W, F, C]
        let seq = x.reshape((f, c, h * w))?.permute((2, 0, 1))?.contiguous()?;
        let positions = Tensor::arange(0u32, f as u32, x.device())?.to_dtype(x.dtype())?;
        let pos = sinusoidal_embedding(&positions, c)?.unsqueeze(0)?;
        let with_pos = seq.broadcast_add(&pos)?;
        let (out, _) = self.0.forward(&with_pos, None)?;
        // residual is taken around the positional input; remove positions again
        let out = out.broadcast_sub(&pos)?;
        Ok(out.permute((1, 2, 0))?.reshape((f, c, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Downsample(Conv2d);

impl Downsample {
    pub fn new(init: &mut Init, ch: usize) -> Result<Self> {
        Ok(Self(Conv2d::new(init, ch, ch, 3, 2)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Upsample(Conv2d);

impl Upsample {
    pub fn new(init: &mut Init, ch: usize) -> Result<Self> {
        Ok(Self(Conv2d::new(init, ch, ch, 3, 1)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.0.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}

pub(crate) fn timestep_embedding(c_noise: f64, dim: usize, dtype: candle_core::DType) -> Result<Tensor> {
    let v = Tensor::new(&[c_noise], &candle_core::Device::Cpu)?.to_dtype(dtype)?;
    Ok(sinusoidal_embedding(&v, dim)?)
}
