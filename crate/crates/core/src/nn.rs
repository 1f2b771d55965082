//! Named, seeded parameter storage and the handful of layers the networks use.
//!
//! Parameters are candle `Var`s kept in a `BTreeMap`, so iteration order (and
//! with it initialization, checkpoint layout and optimizer state) is stable.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Zeros,
    Ones,
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&mut self) -> Init<'_> {
        Init { store: self, prefix: String::new() }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load_from(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::ConfigMismatch(format!("checkpoint has unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    fn create(&mut self, name: String, shape: &[usize], kind: InitKind) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match kind {
            InitKind::Zeros => vec![0.0; n],
            InitKind::Ones => vec![1.0; n],
            InitKind::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

/// A prefixed view into a [`ParamStore`] used while building modules.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Init<'_> {
    pub fn pp(&mut self, name: impl std::fmt::Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Init { store: self.store, prefix }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.create(full, shape, kind)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Self::with_init(init, c_in, c_out, kernel, stride, InitKind::FanIn(fan_in))
    }

    /// Convolution whose weights and bias start at exactly zero.
    pub fn zeros(init: &mut Init, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::with_init(init, c_in, c_out, kernel, 1, InitKind::Zeros)
    }

    fn with_init(init: &mut Init, c_in: usize, c_out: usize, kernel: usize, stride: usize, kind: InitKind) -> Result<Self> {
        let bias_kind = match kind {
            InitKind::FanIn(f) => InitKind::FanIn(f),
            _ => InitKind::Zeros,
        };
        let weight = init.tensor("weight", &[c_out, c_in, kernel, kernel], kind)?;
        let bias = init.tensor("bias", &[c_out], bias_kind)?;
        Ok(Self { weight, bias, stride })
    }

    pub fn parameter_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_in * c_out * kernel * kernel + c_out
    }
}

/// Zero-padded ("same" for stride 1) convolution computed as patch
/// extraction plus one matmul. Both directions then run on the GEMM
/// kernels; the direct CPU conv backward is an order of magnitude slower.
impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let (c_out, _, k, _) = self.weight.dims4()?;
        let (s, p) = (self.stride, k / 2);
        let (ho, wo) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        let cols = if k == 1 && s == 1 {
            xs.reshape((b, c, h * w))?
        } else {
            let padded = xs.pad_with_zeros(2, p, p + s)?.pad_with_zeros(3, p, p + s)?;
            let mut patches = Vec::with_capacity(k * k);
            for ky in 0..k {
                for kx in 0..k {
                    let mut patch = padded.narrow(2, ky, ho * s)?.narrow(3, kx, wo * s)?;
                    if s > 1 {
                        patch = patch.reshape((b, c, ho, s, wo, s))?.narrow(3, 0, 1)?.narrow(5, 0, 1)?;
                    }
                    patches.push(patch.reshape((b, c, ho, wo))?);
                }
            }
            Tensor::stack(&patches, 2)?.reshape((b, c * k * k, ho * wo))?
        };
        let weight = self.weight.reshape((c_out, c * k * k))?;
        let out = weight.broadcast_matmul(&cols)?.reshape((b, c_out, ho, wo))?;
        out.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = init.tensor("weight", &[d_out, d_in], InitKind::FanIn(d_in))?;
        let bias = init.tensor("bias", &[d_out], InitKind::FanIn(d_in))?;
        Ok(Self { inner: candle_nn::Linear::new(weight, Some(bias)) })
    }

    pub fn parameter_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        self.inner.forward(xs)
    }
}

pub fn group_count(channels: usize) -> usize {
    // largest of 32, 16, 8, 4, 2, 1 dividing the channel count
    [32, 16, 8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

pub fn group_norm(init: &mut Init, channels: usize) -> Result<candle_nn::GroupNorm> {
    let weight = init.tensor("weight", &[channels], InitKind::Ones)?;
    let bias = init.tensor("bias", &[channels], InitKind::Zeros)?;
    Ok(candle_nn::GroupNorm::new(weight, bias, channels, group_count(channels), 1e-5)?)
}

/// Layer norm over the last dimension built from primitive ops, so every
/// parameter receives gradients.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

pub fn layer_norm(init: &mut Init, dim: usize) -> Result<LayerNorm> {
    let weight = init.tensor("weight", &[dim], InitKind::Ones)?;
    let bias = init.tensor("bias", &[dim], InitKind::Zeros)?;
    Ok(LayerNorm { weight, bias, eps: 1e-5 })
}

/// Sinusoidal embedding of a scalar per row: `[N] -> [N, dim]`.
pub fn sinusoidal_embedding(values: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let dtype = values.dtype();
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let freqs = Tensor::from_vec(freqs, (1, half), values.device())?.to_dtype(dtype)?;
    let args = values.unsqueeze(1)?.broadcast_mul(&freqs)?;
    let emb = Tensor::cat(&[args.cos()?, args.sin()?], D::Minus1)?;
    if dim % 2 == 1 {
        Ok(emb.pad_with_zeros(D::Minus1, 0, 1)?)
    } else {
        Ok(emb)
    }
}

/// Multi-head scaled dot-product attention over `[B, N, C]` inputs.
///
/// Returns the attended values `[B, Nq, C]` and the attention weights
/// `[B, heads, Nq, Nk]`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (b, nq, c) = q.dims3()?;
    let nk = k.dim(1)?;
    if c % heads != 0 {
        return Err(Error::ConfigMismatch(format!("{c} channels not divisible by {heads} heads")));
    }
    let d = c / heads;
    let split = |t: &Tensor, n: usize| -> candle_core::Result<Tensor> {
        t.reshape((b, n, heads, d))?.transpose(1, 2)?.contiguous()
    };
    let (qh, kh, vh) = (split(q, nq)?, split(k, nk)?, split(v, nk)?);
    let scores = (qh.matmul(&kh.t()?)? / (d as f64).sqrt())?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = weights.matmul(&vh)?.transpose(1, 2)?.reshape((b, nq, c))?;
    Ok((out, weights))
}
