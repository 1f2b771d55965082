use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use super::IdFeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::unet::blocks::{Downsample, ResBlock};
use crate::unet::UNetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdGuiderConfig {
    /// Reference image channels; the lip-mask indicator adds one more.
    pub image_channels: usize,
    pub downsampler_channels: Vec<usize>,
    /// Pixel-to-latent scale; `log2(scale)` downsampler convs have stride 2.
    pub scale: usize,
    /// UNet down-path channels to mirror.
    pub level_channels: Vec<usize>,
    pub layers_per_block: usize,
}

impl Default for IdGuiderConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            downsampler_channels: vec![32, 64, 128, 64],
            scale: 1,
            level_channels: vec![32, 64],
            layers_per_block: 1,
        }
    }
}

impl IdGuiderConfig {
    /// Guider matching a UNet operating on latents `scale` times smaller than pixels.
    pub fn mirroring(unet: &UNetConfig, image_channels: usize, scale: usize) -> Self {
        Self {
            image_channels,
            scale,
            level_channels: unet.down_channels.clone(),
            layers_per_block: unet.layers_per_block,
            ..Self::default()
        }
    }

    fn stride_two_count(&self) -> Result<usize> {
        if !self.scale.is_power_of_two() {
            return Err(Error::ConfigMismatch(format!("guider scale {} is not a power of two", self.scale)));
        }
        let n = self.scale.trailing_zeros() as usize;
        if n > self.downsampler_channels.len() {
            return Err(Error::ConfigMismatch(format!(
                "scale {} needs {n} strided convs, downsampler has {}",
                self.scale,
                self.downsampler_channels.len()
            )));
        }
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.downsampler_channels.is_empty() || self.level_channels.is_empty() {
            return Err(Error::ConfigMismatch("guider needs image channels, a downsampler and at least one level".into()));
        }
        if self.layers_per_block == 0 {
            return Err(Error::ConfigMismatch("guider layers_per_block must be positive".into()));
        }
        self.stride_two_count().map(|_| ())
    }

    /// Closed-form trainable parameter count of [`IdGuider::new`].
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        let mut prev = self.image_channels + 1;
        for &c in &self.downsampler_channels {
            n += Conv2d::parameter_count(prev, c, 3);
            prev = c;
        }
        for (i, &c) in self.level_channels.iter().enumerate() {
            for _ in 0..self.layers_per_block {
                n += ResBlock::parameter_count(prev, c, None);
                prev = c;
            }
            n += Conv2d::parameter_count(c, c, 1);
            if i + 1 < self.level_channels.len() {
                n += Conv2d::parameter_count(c, c, 3);
            }
        }
        n
    }
}

/// Pure convolutional identity encoder producing zero-initialized residuals
/// for every UNet level. Has no timestep input.
pub struct IdGuider {
    config: IdGuiderConfig,
    params: ParamStore,
    downsampler: Vec<Conv2d>,
    levels: Vec<Vec<ResBlock>>,
    level_downsample: Vec<Downsample>,
    outputs: Vec<Conv2d>,
}

impl IdGuider {
    pub fn new(config: IdGuiderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let strided = config.stride_two_count()?;
        let mut params = ParamStore::new(seed, DType::F32);
        let mut root = params.root();
        let mut downsampler = Vec::new();
        let mut prev = config.image_channels + 1;
        for (i, &c) in config.downsampler_channels.iter().enumerate() {
            let stride = if i < strided { 2 } else { 1 };
            downsampler.push(Conv2d::new(&mut root.pp(format!("downsampler.{i}")), prev, c, 3, stride)?);
            prev = c;
        }
        let (mut levels, mut level_downsample, mut outputs) = (Vec::new(), Vec::new(), Vec::new());
        for (i, &c) in config.level_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for layer in 0..config.layers_per_block {
                blocks.push(ResBlock::new(&mut root.pp(format!("level.{i}.{layer}")), prev, c, None)?);
                prev = c;
            }
            levels.push(blocks);
            outputs.push(Conv2d::zeros(&mut root.pp(format!("level.{i}.out")), c, c, 1)?);
            if i + 1 < config.level_channels.len() {
                level_downsample.push(Downsample::new(&mut root.pp(format!("level.{i}.downsample")), c)?);
            }
        }
        Ok(Self { config, params, downsampler, levels, level_downsample, outputs })
    }

    pub fn config(&self) -> &IdGuiderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `input: [B, C+1, H, W]` -> one `[B, C_l, H/(scale 2^l), W/(scale 2^l)]` per level.
    pub fn forward(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = input.dims4()?;
        if c != self.config.image_channels + 1 {
            return Err(Error::shape(format!("guider expects {} channels, got {c}", self.config.image_channels + 1)));
        }
        let m = self.config.scale << (self.config.level_channels.len() - 1);
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("{h}x{w} reference not divisible by {m}")));
        }
        let mut x = input.to_dtype(DType::F32)?;
        let n = self.downsampler.len();
        for (i, conv) in self.downsampler.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < n {
                x = candle_nn::ops::silu(&x)?;
            }
        }
        let mut out = Vec::with_capacity(self.levels.len());
        for (i, blocks) in self.levels.iter().enumerate() {
            for b in blocks {
                x = b.forward(&x, None)?;
            }
            out.push(self.outputs[i].forward(&x)?);
            if let Some(d) = self.level_downsample.get(i) {
                x = d.forward(&x)?;
            }
        }
        Ok(out)
    }
}

/// Concatenates the lip-mask indicator to the reference image and runs the
/// guider. The result depends only on the reference, so callers compute it
/// once per clip and reuse it at every denoising step.
pub fn encode_identity(ref_image: &Tensor, lip_mask: &Tensor, guider: &IdGuider) -> Result<IdFeaturePyramid> {
    let (_, h, w) = ref_image.dims3()?;
    let mask = match lip_mask.rank() {
        2 => lip_mask.unsqueeze(0)?,
        3 => lip_mask.clone(),
        r => return Err(Error::shape(format!("lip mask must be [H, W] or [1, H, W], got rank {r}"))),
    };
    if mask.dims() != [1, h, w] {
        return Err(Error::shape(format!("lip mask {:?} does not match reference {:?}", lip_mask.dims(), ref_image.dims())));
    }
    let input = Tensor::cat(&[ref_image.to_dtype(DType::F32)?, mask.to_dtype(DType::F32)?], 0)?.unsqueeze(0)?;
    Ok(IdFeaturePyramid { levels: guider.forward(&input)? })
}
