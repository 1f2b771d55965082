//! The conditional video denoiser.
//!
//! Frames are processed as a batch by the 2D layers; temporal attention mixes
//! information across them. Each resolution level of the down and up paths
//! runs ResBlock, optional spatial self-attention, audio cross-attention and
//! temporal attention, in that order. Identity features from the guider are
//! added after every down-path ResBlock.

pub mod blocks;

use candle_core::{DType, Module, Tensor};
use candle_nn::GroupNorm;
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionBundle;
use crate::diffusion::DenoisingNetwork;
use crate::error::{Error, Result};
use crate::nn::{group_norm, Conv2d, Linear, ParamStore};
use blocks::{timestep_embedding, AudioCrossAttention, Downsample, ResBlock, SelfAttention, TemporalAttention, Upsample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub down_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub attn_heads: usize,
    /// Per-level switch for spatial self-attention; empty enables it everywhere.
    pub self_attention: Vec<bool>,
    pub temporal_attention: bool,
    /// Longest clip, in frames, the temporal layers accept.
    pub temporal_window: usize,
    pub audio_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            down_channels: vec![32, 64],
            layers_per_block: 1,
            attn_heads: 2,
            self_attention: Vec::new(),
            temporal_attention: true,
            temporal_window: 64,
            audio_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigMismatch(m));
        if self.down_channels.is_empty() {
            return bad("down_channels must be nonempty".into());
        }
        if self.down_channels.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("down_channels must be nondecreasing, got {:?}", self.down_channels));
        }
        if self.latent_channels == 0 || self.layers_per_block == 0 || self.audio_dim == 0 || self.temporal_window == 0 {
            return bad("latent_channels, layers_per_block, audio_dim and temporal_window must be positive".into());
        }
        if self.attn_heads == 0 || self.down_channels.iter().any(|c| c % self.attn_heads != 0) {
            return bad(format!("channels {:?} not divisible by {} heads", self.down_channels, self.attn_heads));
        }
        if !self.self_attention.is_empty() && self.self_attention.len() != self.down_channels.len() {
            return bad(format!(
                "self_attention has {} entries for {} levels",
                self.self_attention.len(),
                self.down_channels.len()
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.down_channels.len()
    }

    pub fn self_attention_at(&self, level: usize) -> bool {
        self.self_attention.get(level).copied().unwrap_or(true)
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.down_channels[0]
    }

    /// Latent height and width must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Closed-form trainable parameter count of [`UNet::new`].
    pub fn parameter_count(&self) -> usize {
        let ch = &self.down_channels;
        let (c0, t, d_a) = (ch[0], self.temb_dim(), self.audio_dim);
        let level_attn = |level: usize, c: usize, audio: bool| {
            (if self.self_attention_at(level) { SelfAttention::parameter_count(c) } else { 0 })
                + if audio { AudioCrossAttention::parameter_count(c, d_a) } else { 0 }
                + if self.temporal_attention { TemporalAttention::parameter_count(c) } else { 0 }
        };
        let mut n = Conv2d::parameter_count(2 * self.latent_channels, c0, 3);
        n += Linear::parameter_count(c0, t) + Linear::parameter_count(t, t);
        let mut prev = c0;
        for (i, &c) in ch.iter().enumerate() {
            for _ in 0..self.layers_per_block {
                n += ResBlock::parameter_count(prev, c, Some(t)) + level_attn(i, c, true);
                prev = c;
            }
            if i + 1 < ch.len() {
                n += Conv2d::parameter_count(c, c, 3);
            }
        }
        let top = *ch.last().unwrap_or(&c0);
        let last = ch.len() - 1;
        n += ResBlock::parameter_count(top, top, Some(t)) + level_attn(last, top, false);
        let mut prev = top;
        for (i, &c) in ch.iter().enumerate().rev() {
            if i != last {
                n += Conv2d::parameter_count(prev, prev, 3);
            }
            for layer in 0..self.layers_per_block {
                let c_in = if layer == 0 { prev + c } else { c };
                n += ResBlock::parameter_count(c_in, c, Some(t)) + level_attn(i, c, true);
            }
            prev = c;
        }
        n + 2 * c0 + Conv2d::parameter_count(c0, self.latent_channels, 3)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    self_attn: Option<SelfAttention>,
    audio_attn: Option<AudioCrossAttention>,
    temporal: Option<TemporalAttention>,
}

impl Stage {
    fn forward(
        &self,
        x: &Tensor,
        temb: &Tensor,
        id_residual: Option<&Tensor>,
        audio: &Tensor,
        attention_log: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let mut h = self.res.forward(x, Some(temb))?;
        if let Some(id) = id_residual {
            h = h.broadcast_add(id)?;
        }
        if let Some(a) = &self.self_attn {
            h = a.forward(&h)?;
        }
        if let Some(a) = &self.audio_attn {
            let (out, weights) = a.forward(&h, audio)?;
            if let Some(log) = attention_log.as_deref_mut() {
                log.push(weights);
            }
            h = out;
        }
        if let Some(t) = &self.temporal {
            h = t.forward(&h)?;
        }
        Ok(h)
    }
}

pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    conv_in: Conv2d,
    time_mlp: (Linear, Linear),
    down: Vec<Vec<Stage>>,
    downsample: Vec<Downsample>,
    mid: Stage,
    upsample: Vec<Upsample>,
    up: Vec<Vec<Stage>>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, DType::F32);
        let cfg = &config;
        let mut root = params.root();
        let ch = cfg.down_channels.clone();
        let (c0, t, heads) = (ch[0], cfg.temb_dim(), cfg.attn_heads);
        let stage = |init: &mut crate::nn::Init, level: usize, c_in: usize, c: usize, audio: bool| -> Result<Stage> {
            Ok(Stage {
                res: ResBlock::new(&mut init.pp("res"), c_in, c, Some(t))?,
                self_attn: cfg.self_attention_at(level).then(|| SelfAttention::new(&mut init.pp("self_attn"), c, heads)).transpose()?,
                audio_attn: audio
                    .then(|| AudioCrossAttention::new(&mut init.pp("audio_attn"), c, cfg.audio_dim, heads))
                    .transpose()?,
                temporal: cfg.temporal_attention.then(|| TemporalAttention::new(&mut init.pp("temporal"), c, heads)).transpose()?,
            })
        };

        let conv_in = Conv2d::new(&mut root.pp("conv_in"), 2 * cfg.latent_channels, c0, 3, 1)?;
        let time_mlp = (Linear::new(&mut root.pp("time.0"), c0, t)?, Linear::new(&mut root.pp("time.1"), t, t)?);
        let (mut down, mut downsample) = (Vec::new(), Vec::new());
        let mut prev = c0;
        for (i, &c) in ch.iter().enumerate() {
            let mut stages = Vec::new();
            for layer in 0..cfg.layers_per_block {
                stages.push(stage(&mut root.pp(format!("down.{i}.{layer}")), i, prev, c, true)?);
                prev = c;
            }
            down.push(stages);
            if i + 1 < ch.len() {
                downsample.push(Downsample::new(&mut root.pp(format!("down.{i}.downsample")), c)?);
            }
        }
        let last = ch.len() - 1;
        let mid = stage(&mut root.pp("mid"), last, prev, prev, false)?;
        let (mut up, mut upsample) = (Vec::new(), Vec::new());
        for (i, &c) in ch.iter().enumerate().rev() {
            if i != last {
                upsample.push(Upsample::new(&mut root.pp(format!("up.{i}.upsample")), prev)?);
            }
            let mut stages = Vec::new();
            for layer in 0..cfg.layers_per_block {
                let c_in = if layer == 0 { prev + c } else { c };
                stages.push(stage(&mut root.pp(format!("up.{i}.{layer}")), i, c_in, c, true)?);
            }
            up.push(stages);
            prev = c;
        }
        let norm_out = group_norm(&mut root.pp("norm_out"), c0)?;
        let conv_out = Conv2d::new(&mut root.pp("conv_out"), c0, cfg.latent_channels, 3, 1)?;
        Ok(Self { config, params, conv_in, time_mlp, down, downsample, mid, upsample, up, norm_out, conv_out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Like [`DenoisingNetwork::forward`], also returning every audio
    /// cross-attention map `[F, heads, H*W, 2k+1]` in evaluation order.
    pub fn forward_with_attention(&self, x: &Tensor, cond: &ConditionBundle, c_noise: f64) -> Result<(Tensor, Vec<Tensor>)> {
        let mut log = Vec::new();
        let out = self.run(x, cond, c_noise, Some(&mut log))?;
        Ok((out, log))
    }

    fn check_inputs(&self, x: &Tensor, cond: &ConditionBundle) -> Result<()> {
        let (f, c, h, w) = x.dims4()?;
        let cfg = &self.config;
        if c != cfg.latent_channels {
            return Err(Error::shape(format!("expected {} latent channels, got {c}", cfg.latent_channels)));
        }
        if cond.masked_latents.dims() != x.dims() {
            return Err(Error::shape(format!("masked latents {:?} vs noisy {:?}", cond.masked_latents.dims(), x.dims())));
        }
        let m = cfg.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("{h}x{w} latents not divisible by {m}")));
        }
        if cfg.temporal_attention && f > cfg.temporal_window {
            return Err(Error::shape(format!("{f} frames exceed temporal window {}", cfg.temporal_window)));
        }
        if let Some(audio) = &cond.audio {
            let (af, _, d) = audio.per_frame.dims3()?;
            if af != f || d != cfg.audio_dim {
                return Err(Error::shape(format!("audio windows {:?} for {f} frames of dim {}", audio.per_frame.dims(), cfg.audio_dim)));
            }
        }
        if let Some(id) = &cond.id_features {
            if id.levels.len() != cfg.levels() {
                return Err(Error::ConfigMismatch(format!("{} identity levels for {} UNet levels", id.levels.len(), cfg.levels())));
            }
            for (i, level) in id.levels.iter().enumerate() {
                let (_, lc, lh, lw) = level.dims4()?;
                let expected = (cfg.down_channels[i], h >> i, w >> i);
                if (lc, lh, lw) != expected {
                    return Err(Error::ConfigMismatch(format!(
                        "identity level {i} is {:?}, UNet expects channels/height/width {expected:?}",
                        level.dims()
                    )));
                }
            }
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, cond: &ConditionBundle, c_noise: f64, mut log: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        self.check_inputs(x, cond)?;
        let f = x.dim(0)?;
        let dtype = DType::F32;
        let audio = match &cond.audio {
            Some(a) => a.per_frame.to_dtype(dtype)?,
            None => Tensor::zeros((f, 1, self.config.audio_dim), dtype, x.device())?,
        };
        let input = Tensor::cat(&[x.to_dtype(dtype)?, cond.masked_latents.data.to_dtype(dtype)?], 1)?;
        let temb = timestep_embedding(c_noise, self.config.down_channels[0], dtype)?;
        let temb = self.time_mlp.1.forward(&candle_nn::ops::silu(&self.time_mlp.0.forward(&temb)?)?)?;

        let mut h = self.conv_in.forward(&input)?;
        let mut skips = Vec::new();
        for (i, stages) in self.down.iter().enumerate() {
            let id = match &cond.id_features {
                Some(p) => Some(p.levels[i].to_dtype(dtype)?),
                None => None,
            };
            for s in stages {
                h = s.forward(&h, &temb, id.as_ref(), &audio, &mut log)?;
            }
            skips.push(h.clone());
            if let Some(d) = self.downsample.get(i) {
                h = d.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb, None, &audio, &mut log)?;
        let mut ups = self.upsample.iter();
        for (n, stages) in self.up.iter().enumerate() {
            if n > 0 {
                h = ups.next().ok_or_else(|| Error::shape("upsample chain exhausted"))?.forward(&h)?;
            }
            let skip = skips.pop().ok_or_else(|| Error::shape("skip stack exhausted"))?;
            h = Tensor::cat(&[&h, &skip], 1)?;
            for s in stages {
                h = s.forward(&h, &temb, None, &audio, &mut log)?;
            }
        }
        let out = self.conv_out.forward(&candle_nn::ops::silu(&self.norm_out.forward(&h)?)?)?;
        Ok(out.to_dtype(x.dtype())?)
    }
}

impl DenoisingNetwork for UNet {
    fn forward(&self, scaled_noisy: &Tensor, cond: &ConditionBundle, c_noise: f64) -> Result<Tensor> {
        self.run(scaled_noisy, cond, c_noise, None)
    }
}

/// Exact number of trainable scalars.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.num_parameters()
}
