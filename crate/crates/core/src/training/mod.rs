//! Clip sampling, condition dropout and the denoising objective's
//! optimization loop.

pub mod checkpoint;
pub mod dataset;
pub mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::pixel_to_latent;
use crate::conditions::{encode_identity, AudioFeatureWindowed, ConditionBundle, DropDecision};
use crate::diffusion::{add_noise, builtin_loss_weightings, dsm_loss, DenoisingNetwork, DiffusionState, LossWeighting, SigmaDistribution};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, build_masks, MaskParams, MaskSequence};
use crate::media::{resize_frames, LandmarkSequence, LatentVolume, VideoClip};
use crate::model::{read_checkpoint, LipSyncModel, ModelConfig};
use crate::registry::StrategySpec;
use checkpoint::{take_prefixed, with_prefix, Metadata};
use optim::{builtin_optimizers, clip_grad_norm, Optimizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub frames_per_clip: usize,
    pub fps: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub p_audio: f64,
    pub p_ref: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub optimizer: StrategySpec,
    pub loss_weighting: StrategySpec,
    pub sigma: SigmaDistribution,
    pub mask: MaskParams,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            frames_per_clip: 16,
            fps: 25.0,
            lr: 6e-5,
            batch_size: 1,
            steps: 1000,
            p_audio: 0.05,
            p_ref: 0.15,
            seed: 0,
            grad_clip: 1.0,
            optimizer: StrategySpec::named("adamw").with_option("weight_decay", 0.01),
            loss_weighting: StrategySpec::named("edm"),
            sigma: SigmaDistribution::default(),
            mask: MaskParams::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames_per_clip == 0 || self.batch_size == 0 {
            return bad("frames_per_clip and batch_size must be positive".into());
        }
        if !(self.fps > 0.0) || !(self.lr > 0.0) {
            return bad(format!("fps and lr must be positive, got {} and {}", self.fps, self.lr));
        }
        for (name, p) in [("p_audio", self.p_audio), ("p_ref", self.p_ref)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.grad_clip >= 0.0) || !(self.sigma.log_std >= 0.0) {
            return bad("grad_clip and sigma.log_std must be nonnegative".into());
        }
        Ok(())
    }

    fn build_optimizer(&self) -> Result<Box<dyn Optimizer>> {
        let mut spec = self.optimizer.clone();
        spec.options.entry("lr").or_insert(self.lr.into());
        builtin_optimizers().resolve(&spec)
    }
}

/// A whole training video at model resolution with its masks and audio
/// windows precomputed.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub id: String,
    pub clip: VideoClip,
    pub masks: MaskSequence,
    pub audio: AudioFeatureWindowed,
}

pub fn prepare_clip(
    id: &str,
    clip: &VideoClip,
    landmarks: &LandmarkSequence,
    model: &LipSyncModel,
    config: &TrainConfig,
) -> Result<PreparedClip> {
    let f = clip.num_frames();
    if f < config.frames_per_clip {
        return Err(Error::ClipTooShort { frames: f, required: config.frames_per_clip });
    }
    if (clip.fps() - config.fps).abs() > 1e-6 {
        return Err(Error::ConfigMismatch(format!("clip `{id}` runs at {} fps, training expects {}", clip.fps(), config.fps)));
    }
    if landmarks.len() != f {
        return Err(Error::shape(format!("{} landmark frames for {f} video frames", landmarks.len())));
    }
    let mc = model.config();
    if clip.channels() != mc.pixel_channels {
        return Err(Error::shape(format!("clip has {} channels, model expects {}", clip.channels(), mc.pixel_channels)));
    }
    let r = mc.resolution;
    let (sx, sy) = (r as f64 / clip.width() as f64, r as f64 / clip.height() as f64);
    let landmarks = landmarks.scaled(sx, sy);
    let resized = VideoClip::new(resize_frames(clip.frames(), r, r)?, clip.fps(), clip.audio().cloned())?;
    let masks = build_masks(&landmarks, r, r, &config.mask)?;
    let audio = resized
        .audio()
        .ok_or_else(|| Error::InvalidArgument(format!("clip `{id}` has no audio track")))?;
    let audio = model.audio_windows(audio, resized.fps(), f)?;
    Ok(PreparedClip { id: id.to_string(), clip: resized, masks, audio })
}

/// Picks a contiguous window start and an independent reference frame, both uniform.
pub fn draw_window<R: Rng + ?Sized>(num_frames: usize, window: usize, rng: &mut R) -> Result<(usize, usize)> {
    if num_frames < window || window == 0 {
        return Err(Error::ClipTooShort { frames: num_frames, required: window });
    }
    let start = rng.random_range(0..=num_frames - window);
    let reference = rng.random_range(0..num_frames);
    Ok((start, reference))
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub start: usize,
    pub ref_index: usize,
    pub target: VideoClip,
    pub masked: VideoClip,
    pub masks: MaskSequence,
    /// `[C, H, W]`, unmasked.
    pub ref_image: Tensor,
    /// `[1, H, W]` lip-region indicator of the reference frame.
    pub ref_lip_mask: Tensor,
    pub audio: AudioFeatureWindowed,
}

pub fn build_sample<R: Rng + ?Sized>(clip: &PreparedClip, frames: usize, rng: &mut R) -> Result<TrainSample> {
    let (start, ref_index) = draw_window(clip.clip.num_frames(), frames, rng)?;
    let masks = clip.masks.slice(start, frames)?;
    for c in masks.coverage()? {
        if c <= 0.0 || c >= 1.0 {
            return Err(Error::DegenerateMask { coverage: c });
        }
    }
    let target = clip.clip.slice(start..start + frames)?;
    let masked = apply_mask(&target, &masks, 0.0)?;
    Ok(TrainSample {
        id: format!("{}@{start}", clip.id),
        start,
        ref_index,
        ref_image: clip.clip.frame(ref_index)?,
        ref_lip_mask: clip.masks.frame_mask(ref_index)?,
        audio: clip.audio.slice(start, frames)?,
        target,
        masked,
        masks,
    })
}

/// One sample's noisy state and (possibly dropped) conditions.
pub struct LossItem {
    pub id: String,
    pub z0: LatentVolume,
    pub state: DiffusionState,
    pub cond: ConditionBundle,
    pub drop: DropDecision,
}

/// Encodes a batch and draws, per sample and in this order, the dropout
/// decision, the noise level and the noise.
pub fn prepare_items<R: Rng + ?Sized>(
    batch: &[TrainSample],
    model: &LipSyncModel,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<LossItem>> {
    batch
        .iter()
        .map(|s| {
            let z0 = pixel_to_latent(&s.target, model.codec())?;
            let z0 = z0.with_data(z0.data.detach());
            let masked = pixel_to_latent(&s.masked, model.codec())?;
            let id = encode_identity(&s.ref_image, &s.ref_lip_mask, model.guider())?;
            let cond = ConditionBundle::new(Some(id), Some(s.audio.clone()), masked)?;
            let drop = DropDecision::draw(config.p_audio, config.p_ref, rng)?;
            let cond = cond.with_drops(drop)?;
            let sigma = config.sigma.sample(rng);
            let (z_t, _) = add_noise(&z0, sigma, rng)?;
            Ok(LossItem { id: s.id.clone(), z0, state: DiffusionState { z_t, sigma, step_index: 0 }, cond, drop })
        })
        .collect()
}

/// Mean of the per-sample objectives; errors if it is not finite.
pub fn batch_loss(
    items: &[LossItem],
    net: &dyn DenoisingNetwork,
    weighting: &dyn LossWeighting,
    sigma_data: f64,
) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let losses = items
        .iter()
        .map(|it| dsm_loss(&it.z0, &it.state, &it.cond, net, weighting, sigma_data))
        .collect::<Result<Vec<_>>>()?;
    let total = Tensor::stack(&losses, 0)?.mean_all()?;
    let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        let ids = items
            .iter()
            .zip(&losses)
            .filter(|(_, l)| l.to_dtype(DType::F64).and_then(|t| t.to_scalar::<f64>()).map_or(true, |v| !v.is_finite()))
            .map(|(it, _)| it.id.clone())
            .collect();
        return Err(Error::NonFiniteLoss { sample_ids: ids });
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimization step on `batch`; parameters are untouched if the loss is not finite.
pub fn train_step<R: Rng + ?Sized>(
    batch: &[TrainSample],
    model: &LipSyncModel,
    optimizer: &mut dyn Optimizer,
    weighting: &dyn LossWeighting,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let items = prepare_items(batch, model, config, rng)?;
    let loss = batch_loss(&items, model.unet(), weighting, model.config().sigma_data)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let vars = model.trainable_vars();
    let mut grads = loss.backward()?;
    let norm = if config.grad_clip > 0.0 {
        clip_grad_norm(&vars, &mut grads, config.grad_clip)?
    } else {
        clip_grad_norm(&vars, &mut grads, f64::INFINITY)?
    };
    optimizer.step(&vars, &grads)?;
    Ok((value, norm))
}

pub struct Trainer {
    model: LipSyncModel,
    optimizer: Box<dyn Optimizer>,
    weighting: Box<dyn LossWeighting>,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
    clips: Vec<PreparedClip>,
}

impl Trainer {
    pub fn new(model: LipSyncModel, config: TrainConfig, clips: Vec<PreparedClip>) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        if clips.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one clip".into()));
        }
        Ok(Self {
            optimizer: config.build_optimizer()?,
            weighting: builtin_loss_weightings().resolve(&config.loss_weighting)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            step: 0,
            clips,
        })
    }

    /// Loads the dataset of a manifest and prepares every clip for `model`.
    pub fn prepare_dataset(manifest: &Path, model: &LipSyncModel, config: &TrainConfig) -> Result<Vec<PreparedClip>> {
        dataset::load_dataset(manifest)?
            .iter()
            .map(|(id, clip, lm)| prepare_clip(id, clip, lm, model, config))
            .collect()
    }

    pub fn model(&self) -> &LipSyncModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let batch = (0..self.config.batch_size)
            .map(|_| {
                let i = self.rng.random_range(0..self.clips.len());
                build_sample(&self.clips[i], self.config.frames_per_clip, &mut self.rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad_norm) =
            train_step(&batch, &self.model, self.optimizer.as_mut(), self.weighting.as_ref(), &self.config, &mut self.rng)?;
        self.step += 1;
        tracing::debug!(step = self.step, loss, grad_norm, "train step");
        Ok(StepStats { step: self.step, loss, grad_norm })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = with_prefix(self.optimizer.state(), "optimizer").collect();
        let mut meta = Metadata::new();
        meta.insert("step".into(), self.step.to_string());
        meta.insert("train_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("rng".into(), serde_json::to_string(&self.rng)?);
        meta.insert("optimizer".into(), self.optimizer.name().to_string());
        self.model.write_checkpoint(path, extra, meta)
    }

    /// Restores model, optimizer moments, step counter and RNG stream.
    pub fn resume(path: &Path, clips: Vec<PreparedClip>) -> Result<Self> {
        let (tensors, meta) = read_checkpoint(path)?;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks `{k}`")));
        let model_config: ModelConfig = serde_json::from_str(field("model_config")?)?;
        let config: TrainConfig = serde_json::from_str(field("train_config")?)?;
        let model = LipSyncModel::new(model_config, 0)?;
        model.load_tensors(&take_prefixed(&tensors, "model"))?;
        let mut trainer = Self::new(model, config, clips)?;
        trainer.optimizer.load_state(&take_prefixed(&tensors, "optimizer"))?;
        trainer.rng = serde_json::from_str(field("rng")?)?;
        trainer.step = field("step")?.parse().map_err(|_| Error::ConfigMismatch("bad step counter".into()))?;
        Ok(trainer)
    }

    pub fn parameters_snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.model
            .named_tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.flatten_all()?.to_vec1::<f32>()?)))
            .collect()
    }
}
