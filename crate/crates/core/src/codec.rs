//! Pixel <-> latent codecs.
//!
//! Codecs receive pixels in `[0, 1]` and convert to their native range
//! internally. Bundled backends:
//!
//! * `identity` — scale 1, latents are the pixels themselves.
//! * `space-to-depth` — exact, parameter-free rearrangement of `r x r` pixel
//!   blocks into channels (scale `r`).
//! * `autoencoder` — small trainable convolutional autoencoder working in
//!   `[-1, 1]`, for toy runs that want a compressed latent space.
//!
//! Pretrained video VAEs plug in by implementing [`LatentCodec`] and
//! registering a factory.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{ensure_finite, LatentVolume, VideoClip};
use crate::nn::{Conv2d, ParamStore};
use crate::registry::{Options, OptionsExt, Registry};

pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;

    /// Spatial downsampling factor between pixels and latents.
    fn scale(&self) -> usize;

    fn latent_channels(&self, pixel_channels: usize) -> usize;

    /// `[F, C, H, W]` pixels in `[0, 1]` to `[F, C_lat, H/scale, W/scale]`.
    fn encode(&self, pixels: &Tensor) -> Result<Tensor>;

    /// Inverse of [`encode`](Self::encode); output is in pixel range but not clamped.
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
}

pub fn builtin_codecs() -> Registry<dyn LatentCodec> {
    let mut reg: Registry<dyn LatentCodec> = Registry::new("latent codec");
    reg.register("identity", |_| Ok(Box::new(IdentityCodec)));
    reg.register("space-to-depth", |opts: &Options| {
        Ok(Box::new(SpaceToDepthCodec::new(opts.usize_or("factor", 2)?)?))
    });
    reg.register("autoencoder", |opts: &Options| {
        let cfg = AutoencoderConfig {
            pixel_channels: opts.usize_or("pixel_channels", 3)?,
            latent_channels: opts.usize_or("latent_channels", 4)?,
            hidden: opts.usize_or("hidden", 32)?,
            scale: opts.usize_or("scale", 4)?,
        };
        let codec = AutoencoderCodec::new(cfg, opts.u64_or("seed", 0)?)?;
        if let Some(path) = opts.str_opt("weights")? {
            codec.load(Path::new(path))?;
        }
        Ok(Box::new(codec))
    });
    reg
}

fn check_pixels(pixels: &Tensor, scale: usize) -> Result<(usize, usize, usize, usize)> {
    let (f, c, h, w) = pixels.dims4()?;
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::shape(format!("{h}x{w} frames not divisible by codec scale {scale}")));
    }
    Ok((f, c, h, w))
}

/// Encodes a clip into latents, checking the `[F, C_lat, H/s, W/s]` contract.
pub fn pixel_to_latent(clip: &VideoClip, codec: &dyn LatentCodec) -> Result<LatentVolume> {
    let scale = codec.scale();
    let (f, c, h, w) = check_pixels(clip.frames(), scale)?;
    let data = codec.encode(clip.frames())?;
    let expected = [f, codec.latent_channels(c), h / scale, w / scale];
    if data.dims() != expected {
        return Err(Error::shape(format!(
            "codec `{}` produced {:?}, expected {expected:?}",
            codec.name(),
            data.dims()
        )));
    }
    ensure_finite(&data, "latents")?;
    LatentVolume::new(data, scale)
}

/// Decodes latents to a clip, clamping into `[0, 1]`.
pub fn latent_to_pixel(latents: &LatentVolume, codec: &dyn LatentCodec, fps: f64) -> Result<VideoClip> {
    ensure_finite(&latents.data, "latents")?;
    let pixels = codec.decode(&latents.data)?.to_dtype(DType::F32)?.clamp(0f32, 1f32)?;
    VideoClip::new(pixels, fps, None)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn name(&self) -> &str {
        "identity"
    }

    fn scale(&self) -> usize {
        1
    }

    fn latent_channels(&self, pixel_channels: usize) -> usize {
        pixel_channels
    }

    fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok(pixels.clone())
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpaceToDepthCodec {
    factor: usize,
}

impl SpaceToDepthCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("space-to-depth factor must be positive".into()));
        }
        Ok(Self { factor })
    }
}

impl LatentCodec for SpaceToDepthCodec {
    fn name(&self) -> &str {
        "space-to-depth"
    }

    fn scale(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self, pixel_channels: usize) -> usize {
        pixel_channels * self.factor * self.factor
    }

    fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        let r = self.factor;
        let (f, c, h, w) = check_pixels(pixels, r)?;
        Ok(pixels
            .reshape(vec![f, c, h / r, r, w / r, r])?
            .permute(vec![0, 1, 3, 5, 2, 4])?
            .reshape((f, c * r * r, h / r, w / r))?)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let r = self.factor;
        let (f, cl, hl, wl) = latents.dims4()?;
        if cl % (r * r) != 0 {
            return Err(Error::shape(format!("{cl} latent channels not divisible by {}", r * r)));
        }
        let c = cl / (r * r);
        Ok(latents
            .reshape(vec![f, c, r, r, hl, wl])?
            .permute(vec![0, 1, 4, 2, 5, 3])?
            .reshape((f, c, hl * r, wl * r))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub pixel_channels: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    /// Power of two.
    pub scale: usize,
}

/// Convolutional autoencoder; each halving is a stride-2 conv, each doubling a
/// nearest-neighbour upsample followed by a conv.
pub struct AutoencoderCodec {
    config: AutoencoderConfig,
    params: ParamStore,
    encoder: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
}

impl AutoencoderCodec {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        if !config.scale.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("autoencoder scale {} is not a power of two", config.scale)));
        }
        let levels = config.scale.trailing_zeros() as usize;
        let hid = config.hidden;
        let mut params = ParamStore::new(seed, DType::F32);
        let mut root = params.root();
        let mut encoder = vec![Conv2d::new(&mut root.pp("enc.in"), config.pixel_channels, hid, 3, 1)?];
        for i in 0..levels {
            encoder.push(Conv2d::new(&mut root.pp(format!("enc.down{i}")), hid, hid, 3, 2)?);
        }
        encoder.push(Conv2d::new(&mut root.pp("enc.out"), hid, config.latent_channels, 3, 1)?);
        let mut decoder = vec![Conv2d::new(&mut root.pp("dec.in"), config.latent_channels, hid, 3, 1)?];
        for i in 0..levels {
            decoder.push(Conv2d::new(&mut root.pp(format!("dec.up{i}")), hid, hid, 3, 1)?);
        }
        decoder.push(Conv2d::new(&mut root.pp("dec.out"), hid, config.pixel_channels, 3, 1)?);
        Ok(Self { config, params, encoder, decoder })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn run_encoder(&self, pixels: &Tensor) -> Result<Tensor> {
        let mut x = ((pixels.to_dtype(DType::F32)? * 2.0)? - 1.0)?;
        let last = self.encoder.len() - 1;
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(&x)?;
            if i != last {
                x = candle_nn::ops::silu(&x)?;
            }
        }
        Ok(x)
    }

    fn run_decoder(&self, latents: &Tensor) -> Result<Tensor> {
        let mut x = self.decoder[0].forward(&latents.to_dtype(DType::F32)?)?;
        for conv in &self.decoder[1..self.decoder.len() - 1] {
            let (_, _, h, w) = x.dims4()?;
            x = conv.forward(&candle_nn::ops::silu(&x)?.upsample_nearest2d(h * 2, w * 2)?)?;
        }
        let out = self.decoder[self.decoder.len() - 1].forward(&candle_nn::ops::silu(&x)?)?;
        Ok(((out.tanh()? + 1.0)? / 2.0)?)
    }

    /// Trains reconstruction (mean squared error) with Adam; returns per-step losses.
    pub fn fit(&self, frames: &Tensor, steps: usize, lr: f64) -> Result<Vec<f64>> {
        let mut opt = crate::training::optim::AdamW::new(lr, 0.0);
        let vars = self.params.all_vars();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let recon = self.run_decoder(&self.run_encoder(frames)?)?;
            let loss = (recon - frames.to_dtype(DType::F32)?)?.sqr()?.mean_all()?;
            losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
            let grads = loss.backward()?;
            crate::training::optim::Optimizer::step(&mut opt, &vars, &grads)?;
        }
        Ok(losses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: BTreeMap<String, Tensor> =
            self.params.vars().iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        crate::training::checkpoint::write_safetensors(path, &tensors, None)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let (tensors, _) = crate::training::checkpoint::read_safetensors(path)?;
        self.params.load_from(&tensors)
    }
}

impl LatentCodec for AutoencoderCodec {
    fn name(&self) -> &str {
        "autoencoder"
    }

    fn scale(&self) -> usize {
        self.config.scale
    }

    fn latent_channels(&self, _pixel_channels: usize) -> usize {
        self.config.latent_channels
    }

    fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = check_pixels(pixels, self.config.scale)?;
        if c != self.config.pixel_channels {
            return Err(Error::shape(format!("autoencoder expects {} channels, got {c}", self.config.pixel_channels)));
        }
        Ok(self.run_encoder(pixels)?.detach())
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(self.run_decoder(latents)?.detach())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn random_clip(f: usize, c: usize, h: usize, w: usize) -> VideoClip {
        let t = Tensor::rand(0f32, 1f32, (f, c, h, w), &Device::Cpu).unwrap();
        VideoClip::new(t, 25.0, None).unwrap()
    }

    #[test]
    fn identity_codec_is_exact() {
        let clip = random_clip(2, 3, 8, 8);
        let lat = pixel_to_latent(&clip, &IdentityCodec).unwrap();
        let back = latent_to_pixel(&lat, &IdentityCodec, 25.0).unwrap();
        let a = clip.frames().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.frames().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert_eq!(lat.dims(), clip.frames().dims());
    }

    #[test]
    fn scale_eight_shape_arithmetic() {
        let codec = SpaceToDepthCodec::new(8).unwrap();
        let lat = pixel_to_latent(&random_clip(2, 3, 64, 64), &codec).unwrap();
        assert_eq!(lat.dims(), &[2, 192, 8, 8]);
        assert_eq!(lat.scale, 8);
    }

    #[test]
    fn indivisible_frames_are_rejected() {
        let codec = SpaceToDepthCodec::new(8).unwrap();
        assert!(matches!(pixel_to_latent(&random_clip(1, 3, 60, 64), &codec), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn space_to_depth_round_trip_is_exact() {
        // measured reconstruction error on random inputs is exactly zero: the
        // codec only permutes elements
        for r in [1, 2, 4] {
            let codec = SpaceToDepthCodec::new(r).unwrap();
            let clip = random_clip(3, 3, 16, 8);
            let back = codec.decode(&codec.encode(clip.frames()).unwrap()).unwrap();
            let diff = (back - clip.frames()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0);
        }
    }

    #[test]
    fn space_to_depth_groups_pixel_blocks() {
        let t = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let enc = SpaceToDepthCodec::new(2).unwrap().encode(&t).unwrap();
        // channel k = (dy, dx) offset inside each 2x2 block
        let ch0 = enc.get(0).unwrap().get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ch0, vec![0.0, 2.0, 8.0, 10.0]);
        let ch3 = enc.get(0).unwrap().get(3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ch3, vec![5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn autoencoder_shapes_and_training_reduce_error() {
        let cfg = AutoencoderConfig { pixel_channels: 3, latent_channels: 4, hidden: 8, scale: 2 };
        let codec = AutoencoderCodec::new(cfg, 3).unwrap();
        let clip = random_clip(2, 3, 8, 8);
        let lat = pixel_to_latent(&clip, &codec).unwrap();
        assert_eq!(lat.dims(), &[2, 4, 4, 4]);
        let losses = codec.fit(clip.frames(), 60, 1e-2).unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.7), "{losses:?}");
    }

    #[test]
    fn registry_builds_every_codec() {
        let reg = builtin_codecs();
        for name in ["identity", "space-to-depth", "autoencoder"] {
            let codec = reg.create(name, &Options::new()).unwrap();
            assert_eq!(codec.name(), name);
        }
    }
}
