//! The trainable lip-sync model: codec, speech extractor, identity guider
//! and denoising UNet assembled from one configuration.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::{builtin_codecs, LatentCodec};
use crate::conditions::{
    builtin_speech_extractors, extract_audio_features, window_audio, AudioFeatureWindowed, IdGuider, IdGuiderConfig,
    SpeechFeatureExtractor,
};
use crate::diffusion::DEFAULT_SIGMA_DATA;
use crate::error::{Error, Result};
use crate::media::{resample_audio, AudioTrack};
use crate::registry::StrategySpec;
use crate::training::checkpoint::{read_safetensors, take_prefixed, with_prefix, write_safetensors, Metadata};
use crate::unet::{UNet, UNetConfig};

pub const CHECKPOINT_FORMAT: &str = "lipsync-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub pixel_channels: usize,
    /// Side length of the square frames the model works on.
    pub resolution: usize,
    pub codec: StrategySpec,
    pub speech: StrategySpec,
    /// `latent_channels` and `audio_dim` are derived from the codec and speech extractor.
    pub unet: UNetConfig,
    pub guider_downsampler: Vec<usize>,
    /// Audio context radius: each frame sees `2k+1` feature rows.
    pub audio_k: usize,
    pub sigma_data: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pixel_channels: 3,
            resolution: 64,
            codec: StrategySpec::named("identity"),
            speech: StrategySpec::named("mel-projection"),
            unet: UNetConfig {
                down_channels: vec![16, 32],
                self_attention: vec![false, true],
                temporal_window: 32,
                ..UNetConfig::default()
            },
            guider_downsampler: vec![32, 64, 128, 64],
            audio_k: 2,
            sigma_data: DEFAULT_SIGMA_DATA,
        }
    }
}

pub struct LipSyncModel {
    config: ModelConfig,
    codec: Box<dyn LatentCodec>,
    speech: Box<dyn SpeechFeatureExtractor>,
    unet: UNet,
    guider: IdGuider,
}

impl LipSyncModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let codec = builtin_codecs().resolve(&config.codec)?;
        let speech = builtin_speech_extractors().resolve(&config.speech)?;
        let mut config = config;
        if config.resolution == 0 || config.resolution % codec.scale() != 0 {
            return Err(Error::ConfigMismatch(format!(
                "resolution {} not divisible by codec scale {}",
                config.resolution,
                codec.scale()
            )));
        }
        config.unet.latent_channels = codec.latent_channels(config.pixel_channels);
        config.unet.audio_dim = speech.dim();
        let latent_side = config.resolution / codec.scale();
        if latent_side % config.unet.spatial_multiple() != 0 {
            return Err(Error::ConfigMismatch(format!(
                "latent side {latent_side} not divisible by {}",
                config.unet.spatial_multiple()
            )));
        }
        let unet = UNet::new(config.unet.clone(), seed)?;
        let guider_cfg = IdGuiderConfig {
            downsampler_channels: config.guider_downsampler.clone(),
            ..IdGuiderConfig::mirroring(&config.unet, config.pixel_channels, codec.scale())
        };
        let guider = IdGuider::new(guider_cfg, seed.wrapping_add(1))?;
        Ok(Self { config, codec, speech, unet, guider })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn codec(&self) -> &dyn LatentCodec {
        self.codec.as_ref()
    }

    pub fn speech(&self) -> &dyn SpeechFeatureExtractor {
        self.speech.as_ref()
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn guider(&self) -> &IdGuider {
        &self.guider
    }

    /// UNet parameters followed by guider parameters, in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut v = self.unet.params().all_vars();
        v.extend(self.guider.params().all_vars());
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.unet.params().num_parameters() + self.guider.params().num_parameters()
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let grab = |prefix: &str, vars: &BTreeMap<String, Var>| {
            vars.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.as_tensor().clone())).collect::<Vec<_>>()
        };
        let mut out: BTreeMap<String, Tensor> = grab("unet", self.unet.params().vars()).into_iter().collect();
        out.extend(grab("guider", self.guider.params().vars()));
        out
    }

    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let known = |k: &String| k.starts_with("unet.") || k.starts_with("guider.");
        if let Some(extra) = tensors.keys().find(|k| !known(k)) {
            return Err(Error::ConfigMismatch(format!("unexpected model tensor `{extra}`")));
        }
        self.unet.params().load_from(&take_prefixed(tensors, "unet"))?;
        self.guider.params().load_from(&take_prefixed(tensors, "guider"))
    }

    /// Writes model weights plus `extra` tensors (already prefixed) and metadata.
    pub fn write_checkpoint(&self, path: &Path, extra: BTreeMap<String, Tensor>, mut metadata: Metadata) -> Result<()> {
        let mut tensors: BTreeMap<String, Tensor> = with_prefix(self.named_tensors(), "model").collect();
        tensors.extend(extra);
        metadata.insert("format".into(), CHECKPOINT_FORMAT.into());
        metadata.insert("model_config".into(), serde_json::to_string(&self.config)?);
        write_safetensors(path, &tensors, Some(&metadata))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_checkpoint(path, BTreeMap::new(), Metadata::new())
    }

    /// Rebuilds the model described by a checkpoint and loads its weights.
    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = read_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_str(
            meta.get("model_config").ok_or_else(|| Error::ConfigMismatch("checkpoint lacks model_config".into()))?,
        )?;
        let model = Self::new(config, 0)?;
        model.load_tensors(&take_prefixed(&tensors, "model"))?;
        Ok(model)
    }

    /// Loads weights into this model; the checkpoint must describe the same configuration.
    pub fn load_weights(&self, path: &Path) -> Result<()> {
        let (tensors, meta) = read_checkpoint(path)?;
        let saved: ModelConfig = serde_json::from_str(
            meta.get("model_config").ok_or_else(|| Error::ConfigMismatch("checkpoint lacks model_config".into()))?,
        )?;
        if saved != self.config {
            return Err(Error::ConfigMismatch("checkpoint was written for a different model configuration".into()));
        }
        self.load_tensors(&take_prefixed(&tensors, "model"))
    }

    /// Windowed audio features with exactly `frames` rows, resampling the
    /// track to the extractor's rate first.
    pub fn audio_windows(&self, track: &AudioTrack, fps: f64, frames: usize) -> Result<AudioFeatureWindowed> {
        let rate = self.speech.sample_rate();
        let track =
            if track.sample_rate() == rate { track.clone() } else { resample_audio(track, rate as f64)? };
        let feats = extract_audio_features(&track, fps, self.speech.as_ref())?;
        let have = feats.dims()[0];
        // duration rounding can leave the feature count one off the frame count
        let feats = if have >= frames { feats.narrow(0, 0, frames)? } else { feats.pad_with_zeros(0, 0, frames - have)? };
        window_audio(&feats, self.config.audio_k)
    }
}

pub(crate) fn read_checkpoint(path: &Path) -> Result<(BTreeMap<String, Tensor>, Metadata)> {
    let (tensors, meta) = read_safetensors(path)?;
    match meta.get("format") {
        Some(f) if f == CHECKPOINT_FORMAT => Ok((tensors, meta)),
        other => Err(Error::ConfigMismatch(format!("unsupported checkpoint format {other:?}"))),
    }
}
