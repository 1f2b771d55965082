//! The three condition streams fed to the denoiser: identity features from
//! the reference frame, per-frame audio windows, and latents of the masked
//! video.

mod audio;
mod guider;

pub use audio::{
    builtin_speech_extractors, extract_audio_features, window_audio, MelProjectionExtractor, PrecomputedFeatures,
    SpeechFeatureExtractor,
};
pub use guider::{encode_identity, IdGuider, IdGuiderConfig};

use candle_core::Tensor;
use rand::Rng;

use crate::codec::{pixel_to_latent, LatentCodec};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskSequence};
use crate::media::{LatentVolume, VideoClip};

/// One `[1, C_l, H_l, W_l]` tensor per UNet resolution level.
#[derive(Debug, Clone)]
pub struct IdFeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl IdFeaturePyramid {
    pub fn zeroed(&self) -> Result<Self> {
        Ok(Self { levels: self.levels.iter().map(|l| l.zeros_like()).collect::<candle_core::Result<_>>()? })
    }
}

/// `[F, 2k+1, D_a]`: each frame's window of audio embeddings.
#[derive(Debug, Clone)]
pub struct AudioFeatureWindowed {
    pub per_frame: Tensor,
    pub k: usize,
}

impl AudioFeatureWindowed {
    pub fn num_frames(&self) -> usize {
        self.per_frame.dims()[0]
    }

    pub fn zeroed(&self) -> Result<Self> {
        Ok(Self { per_frame: self.per_frame.zeros_like()?, k: self.k })
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self { per_frame: self.per_frame.narrow(0, start, len)?, k: self.k })
    }
}

/// Conditions for one clip. `None` streams are treated as zeros by the
/// network; dropped streams hold zero tensors of the original shape.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub id_features: Option<IdFeaturePyramid>,
    pub audio: Option<AudioFeatureWindowed>,
    pub masked_latents: LatentVolume,
    pub audio_dropped: bool,
    pub reference_dropped: bool,
}

impl ConditionBundle {
    pub fn new(
        id_features: Option<IdFeaturePyramid>,
        audio: Option<AudioFeatureWindowed>,
        masked_latents: LatentVolume,
    ) -> Result<Self> {
        if let Some(a) = &audio {
            if a.num_frames() != masked_latents.num_frames() {
                return Err(Error::shape(format!(
                    "{} audio windows for {} latent frames",
                    a.num_frames(),
                    masked_latents.num_frames()
                )));
            }
        }
        Ok(Self { id_features, audio, masked_latents, audio_dropped: false, reference_dropped: false })
    }

    pub fn latents_only(masked_latents: LatentVolume) -> Self {
        Self { id_features: None, audio: None, masked_latents, audio_dropped: false, reference_dropped: false }
    }

    pub fn num_frames(&self) -> usize {
        self.masked_latents.num_frames()
    }

    /// The guidance-free counterpart: audio and reference zeroed, masked
    /// latents kept.
    pub fn unconditional(&self) -> Result<Self> {
        self.with_drops(DropDecision { audio: true, reference: true })
    }

    pub fn with_drops(&self, drop: DropDecision) -> Result<Self> {
        let mut out = self.clone();
        if drop.audio {
            out.audio = self.audio.as_ref().map(|a| a.zeroed()).transpose()?;
            out.audio_dropped = true;
        }
        if drop.reference {
            out.id_features = self.id_features.as_ref().map(|p| p.zeroed()).transpose()?;
            out.reference_dropped = true;
        }
        Ok(out)
    }

    /// Frames `start..start+len`; identity features are shared.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        let latents = self.masked_latents.with_data(self.masked_latents.data.narrow(0, start, len)?);
        Ok(Self {
            id_features: self.id_features.clone(),
            audio: self.audio.as_ref().map(|a| a.slice(start, len)).transpose()?,
            masked_latents: latents,
            audio_dropped: self.audio_dropped,
            reference_dropped: self.reference_dropped,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropDecision {
    pub audio: bool,
    pub reference: bool,
}

impl DropDecision {
    /// Independent draws for both streams; an audio drop forces a reference
    /// drop. Always consumes exactly two uniforms.
    pub fn draw<R: Rng + ?Sized>(p_audio: f64, p_ref: f64, rng: &mut R) -> Result<Self> {
        for (name, p) in [("p_audio", p_audio), ("p_ref", p_ref)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let audio = rng.random::<f64>() < p_audio;
        let reference = rng.random::<f64>() < p_ref;
        Ok(Self { audio, reference: reference || audio })
    }
}

pub fn drop_conditions<R: Rng + ?Sized>(bundle: &ConditionBundle, p_audio: f64, p_ref: f64, rng: &mut R) -> Result<ConditionBundle> {
    bundle.with_drops(DropDecision::draw(p_audio, p_ref, rng)?)
}

/// Latents of the clip with its editable region filled with zeros.
pub fn encode_masked_video(clip: &VideoClip, masks: &MaskSequence, codec: &dyn LatentCodec) -> Result<LatentVolume> {
    pixel_to_latent(&apply_mask(clip, masks, 0.0)?, codec)
}

#[cfg(test)]
mod tests;
