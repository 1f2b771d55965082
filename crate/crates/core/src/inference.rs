//! Long-video lip sync: match the video to the audio length, crop and mask
//! the face, denoise overlapping fixed-length segments with guidance, blend
//! them, decode and paste the mouth region back into the source frames.

use std::ops::Range;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::{encode_identity, encode_masked_video, ConditionBundle};
use crate::curation::{builtin_face_detectors, detect_faces, face_prior_landmarks};
use crate::diffusion::{gaussian, sample, DenoisingNetwork, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::masking::{build_masks, fill_missing, landmarks_to_box, smooth_boxes, MaskParams};
use crate::media::{resize_frames, AudioTrack, BoundingBox, LandmarkSequence, LatentVolume, VideoClip};
use crate::model::LipSyncModel;
use crate::registry::StrategySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceChoice {
    /// A frame drawn with the inference seed.
    Random,
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Track the face and work on an expanded, smoothed face crop.
    Face,
    /// Use the whole frame.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub segment_len: usize,
    pub overlap: usize,
    pub guidance_scale: f64,
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub bbox_expand_ratio: f64,
    pub bbox_smooth_alpha: f64,
    pub dilation_px: f64,
    pub junction_smooth_frames: usize,
    pub reference: ReferenceChoice,
    pub crop: CropMode,
    pub detector: StrategySpec,
    pub mask: MaskParams,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let schedule = NoiseSchedule::default();
        Self {
            segment_len: 16,
            overlap: 4,
            guidance_scale: 3.0,
            steps: schedule.num_steps,
            sigma_min: schedule.sigma_min,
            sigma_max: schedule.sigma_max,
            rho: schedule.rho,
            bbox_expand_ratio: 0.4,
            bbox_smooth_alpha: 0.75,
            dilation_px: 2.0,
            junction_smooth_frames: 3,
            reference: ReferenceChoice::Random,
            crop: CropMode::Face,
            detector: StrategySpec::named("contrast-blob"),
            mask: MaskParams::default(),
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0 < self.overlap && self.overlap < self.segment_len) {
            return bad(format!("need 0 < overlap < segment_len, got {} and {}", self.overlap, self.segment_len));
        }
        if !(self.guidance_scale >= 0.0) {
            return bad(format!("guidance_scale must be nonnegative, got {}", self.guidance_scale));
        }
        if !(self.bbox_expand_ratio >= 0.0) || !(self.dilation_px >= 0.0) {
            return bad("bbox_expand_ratio and dilation_px must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.bbox_smooth_alpha) {
            return bad(format!("bbox_smooth_alpha must lie in [0, 1], got {}", self.bbox_smooth_alpha));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule { sigma_min: self.sigma_min, sigma_max: self.sigma_max, rho: self.rho, num_steps: self.steps }
    }

    pub fn sampler(&self, sigma_data: f64) -> SamplerConfig {
        SamplerConfig { schedule: self.schedule(), guidance_scale: self.guidance_scale, sigma_data }
    }
}

/// Source frame index for each of `out_len` output frames: a prefix when the
/// output is shorter, otherwise the palindrome `0..n, n-1..0, 0..n, ...`.
pub fn duration_index_map(n: usize, out_len: usize) -> Vec<usize> {
    (0..out_len)
        .map(|i| {
            let p = i % (2 * n);
            if p < n {
                p
            } else {
                2 * n - 1 - p
            }
        })
        .collect()
}

/// Output frames for `audio`: `round(duration * fps)`, at least one.
pub fn matched_frame_count(audio: &AudioTrack, fps: f64) -> usize {
    ((audio.duration() * fps).round() as usize).max(1)
}

/// Retimes `video` to the length of `audio` and attaches it.
///
/// Shorter audio truncates the video; longer audio extends it forwards and
/// backwards alternately. Each frame within `junction_frames` of a direction
/// change is blended toward the mean of itself and its two neighbours with
/// weight `1 - d / junction_frames`, `d` being its distance to the junction.
pub fn match_duration(video: &VideoClip, audio: &AudioTrack, junction_frames: usize) -> Result<VideoClip> {
    let n = video.num_frames();
    let out_len = matched_frame_count(audio, video.fps());
    let map = duration_index_map(n, out_len);
    let index = Tensor::from_vec(map.iter().map(|&i| i as u32).collect::<Vec<_>>(), out_len, &Device::Cpu)?;
    let mut frames = video.frames().index_select(&index, 0)?;
    if out_len > n && junction_frames > 0 && n > 1 {
        let mut smoothed = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let frame = frames.get(i)?;
            // junctions sit between output frames k*n - 1 and k*n
            let d = (1..=(out_len - 1) / n)
                .map(|k| if i < k * n { k * n - 1 - i } else { i - k * n })
                .min()
                .filter(|&d| d < junction_frames);
            smoothed.push(match d {
                Some(d) => {
                    let w = 1.0 - d as f64 / junction_frames as f64;
                    let prev = frames.get(i.saturating_sub(1))?;
                    let next = frames.get((i + 1).min(out_len - 1))?;
                    let avg = ((&prev + &frame)? + &next)?.affine(1.0 / 3.0, 0.0)?;
                    (frame.affine(1.0 - w, 0.0)? + avg.affine(w, 0.0)?)?
                }
                None => frame,
            });
        }
        frames = Tensor::stack(&smoothed, 0)?;
    }
    let audio = audio.slice_seconds(0.0, out_len as f64 / video.fps());
    VideoClip::new(frames, video.fps(), Some(audio))
}

/// Windows of `segment_len` frames with stride `segment_len - overlap`; the
/// last window is right-aligned to end at `frames`.
pub fn plan_segments(frames: usize, segment_len: usize, overlap: usize) -> Result<Vec<Range<usize>>> {
    if !(0 < overlap && overlap < segment_len) {
        return Err(Error::InvalidArgument(format!("need 0 < overlap < segment_len, got {overlap} and {segment_len}")));
    }
    if frames < segment_len {
        return Err(Error::TooShort { frames, segment_len });
    }
    let stride = segment_len - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    while start + segment_len < frames {
        out.push(start..start + segment_len);
        start += stride;
    }
    out.push(frames - segment_len..frames);
    Ok(out)
}

/// Blend weight of frame `j` inside `segment`: a linear ramp over `overlap`
/// frames at every edge that is not the sequence boundary.
pub fn ramp_weight(segment: &Range<usize>, j: usize, overlap: usize, frames: usize) -> f64 {
    let n = (overlap + 1) as f64;
    let left = if segment.start == 0 { 1.0 } else { (j - segment.start + 1) as f64 / n };
    let right = if segment.end == frames { 1.0 } else { (segment.end - j) as f64 / n };
    left.min(right).min(1.0)
}

/// Per-frame weights of each segment, normalized to sum to one per frame.
pub fn blend_weights(plan: &[Range<usize>], overlap: usize, frames: usize) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = plan.iter().map(|s| s.clone().map(|j| ramp_weight(s, j, overlap, frames)).collect()).collect();
    let mut total = vec![0.0; frames];
    for (s, w) in plan.iter().zip(&raw) {
        for (j, v) in s.clone().zip(w) {
            total[j] += v;
        }
    }
    plan.iter().zip(raw).map(|(s, w)| s.clone().zip(w).map(|(j, v)| v / total[j]).collect()).collect()
}

/// Samples every segment of `plan` from the matching slice of the
/// full-length `noise` and conditions, then blends overlaps.
pub fn run_segments(
    noise: &LatentVolume,
    cond: &ConditionBundle,
    net: &dyn DenoisingNetwork,
    plan: &[Range<usize>],
    overlap: usize,
    sampler: &SamplerConfig,
) -> Result<LatentVolume> {
    let frames = noise.num_frames();
    if cond.num_frames() != frames {
        return Err(Error::shape(format!("{} condition frames for {frames} noise frames", cond.num_frames())));
    }
    let weights = blend_weights(plan, overlap, frames);
    let mut acc = noise.data.zeros_like()?;
    for (seg, w) in plan.iter().zip(weights) {
        let len = seg.len();
        let part_noise = noise.with_data(noise.data.narrow(0, seg.start, len)?);
        let out = sample(&part_noise, &cond.slice_frames(seg.start, len)?, net, sampler)?;
        let w = Tensor::from_vec(w.iter().map(|&v| v as f32).collect::<Vec<_>>(), (len, 1, 1, 1), &Device::Cpu)?
            .to_dtype(out.data.dtype())?;
        let weighted = out.data.broadcast_mul(&w)?;
        let padded = weighted.pad_with_zeros(0, seg.start, frames - seg.end)?;
        acc = (acc + padded)?;
    }
    Ok(noise.with_data(acc))
}

/// Crop boxes snapped to the pixel grid.
fn snap(b: &BoundingBox, width: usize, height: usize) -> BoundingBox {
    let (c0, r0, c1, r1) = b.clamp(width, height).pixel_bounds();
    BoundingBox { x0: c0 as f64, y0: r0 as f64, x1: c1.max(c0 + 1) as f64, y1: r1.max(r0 + 1) as f64 }
}

/// Crops each frame to its box and resizes it to `side x side`.
pub fn crop_frames(clip: &VideoClip, crops: &[BoundingBox], side: usize) -> Result<Tensor> {
    let frames = (0..clip.num_frames())
        .map(|f| {
            let (c0, r0, c1, r1) = crops[f].pixel_bounds();
            let patch = clip.frame(f)?.narrow(1, r0, r1 - r0)?.narrow(2, c0, c1 - c0)?.unsqueeze(0)?;
            Ok(resize_frames(&patch, side, side)?.squeeze(0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&frames, 0)?)
}

fn to_crop(landmarks: &LandmarkSequence, crops: &[BoundingBox], side: usize) -> LandmarkSequence {
    LandmarkSequence::new(
        landmarks
            .frames
            .iter()
            .zip(crops)
            .map(|(pts, c)| {
                let (sx, sy) = (side as f64 / c.width(), side as f64 / c.height());
                pts.as_ref().map(|p| {
                    p.iter().map(|q| [((q[0] - c.x0) * sx).clamp(0.0, side as f64), ((q[1] - c.y0) * sy).clamp(0.0, side as f64)]).collect()
                })
            })
            .collect(),
    )
}

/// Pastes `generated` (crop-sized frames) back into `source`.
///
/// Per frame the paste region is the bounding rectangle of the dilated
/// source and generated lip boxes, limited to the crop. Pixels outside it are
/// copied from `source` unchanged.
pub fn composite(
    source: &VideoClip,
    generated: &Tensor,
    crops: &[BoundingBox],
    src_boxes: &[BoundingBox],
    gen_boxes: &[BoundingBox],
    dilation_px: f64,
) -> Result<VideoClip> {
    let (f, c, h, w) = source.frames().dims4()?;
    let (gf, gc, _, _) = generated.dims4()?;
    if (gf, gc) != (f, c) || [crops.len(), src_boxes.len(), gen_boxes.len()] != [f; 3] {
        return Err(Error::shape(format!(
            "composite needs {f} frames of {c} channels and one box per frame, got {:?} and {}/{}/{} boxes",
            generated.dims(),
            crops.len(),
            src_boxes.len(),
            gen_boxes.len()
        )));
    }
    let mut out = source.frames().flatten_all()?.to_vec1::<f32>()?;
    for t in 0..f {
        let crop = snap(&crops[t], w, h);
        let (c0, r0, c1, r1) = crop.pixel_bounds();
        let (cw, ch) = (c1 - c0, r1 - r0);
        let patch = resize_frames(&generated.narrow(0, t, 1)?, ch, cw)?.flatten_all()?.to_vec1::<f32>()?;
        let region = src_boxes[t].dilate(dilation_px).bounding_union(&gen_boxes[t].dilate(dilation_px)).intersect(&crop);
        let (x0, y0, x1, y1) = region.clamp(w, h).pixel_bounds();
        for k in 0..c {
            for y in y0..y1 {
                for x in x0..x1 {
                    out[((t * c + k) * h + y) * w + x] = patch[(k * ch + (y - r0)) * cw + (x - c0)];
                }
            }
        }
    }
    source.with_frames(Tensor::from_vec(out, (f, c, h, w), &Device::Cpu)?)
}

pub struct InferenceOutput {
    pub video: VideoClip,
    pub reference_index: usize,
    pub segments: Vec<Range<usize>>,
}

/// Lip-syncs `video` to `audio`. Without `landmarks`, lip positions come
/// from the face detector and a face-box prior.
pub fn run_inference(
    model: &LipSyncModel,
    video: &VideoClip,
    audio: &AudioTrack,
    landmarks: Option<&LandmarkSequence>,
    config: &InferenceConfig,
) -> Result<InferenceOutput> {
    config.validate()?;
    let mc = model.config();
    if video.channels() != mc.pixel_channels {
        return Err(Error::shape(format!("video has {} channels, model expects {}", video.channels(), mc.pixel_channels)));
    }
    if config.segment_len > mc.unet.temporal_window {
        return Err(Error::ConfigMismatch(format!(
            "segment_len {} exceeds the model's temporal window {}",
            config.segment_len, mc.unet.temporal_window
        )));
    }
    if let Some(lm) = landmarks {
        if lm.len() != video.num_frames() {
            return Err(Error::shape(format!("{} landmark frames for {} video frames", lm.len(), video.num_frames())));
        }
    }
    let clip = match_duration(video, audio, config.junction_smooth_frames)?;
    let map = duration_index_map(video.num_frames(), clip.num_frames());
    let (h, w, f) = (clip.height(), clip.width(), clip.num_frames());

    let needs_faces = config.crop == CropMode::Face || landmarks.is_none();
    let faces = if needs_faces {
        let detector = builtin_face_detectors().resolve(&config.detector)?;
        Some(fill_missing(&detect_faces(&clip, detector.as_ref())?, config.mask.max_gap)?)
    } else {
        None
    };
    let lips = match (landmarks, &faces) {
        (Some(lm), _) => LandmarkSequence::new(map.iter().map(|&i| lm.frames[i].clone()).collect()),
        (None, Some(faces)) => face_prior_landmarks(faces),
        (None, None) => unreachable!("faces are detected whenever landmarks are missing"),
    };
    let crops: Vec<BoundingBox> = match (config.crop, &faces) {
        (CropMode::Face, Some(faces)) => {
            let squared: Vec<_> = faces
                .iter()
                .map(|b| {
                    let side = b.width().max(b.height());
                    let [cx, cy] = b.center();
                    BoundingBox { x0: cx - side / 2.0, y0: cy - side / 2.0, x1: cx + side / 2.0, y1: cy + side / 2.0 }
                        .expand(config.bbox_expand_ratio / 2.0)
                })
                .collect();
            smooth_boxes(&squared, config.bbox_smooth_alpha)?.iter().map(|b| snap(b, w, h)).collect()
        }
        _ => vec![BoundingBox { x0: 0.0, y0: 0.0, x1: w as f64, y1: h as f64 }; f],
    };

    let side = mc.resolution;
    let cropped = VideoClip::new(crop_frames(&clip, &crops, side)?, clip.fps(), None)?;
    let crop_lips = to_crop(&lips, &crops, side);
    let masks = build_masks(&crop_lips, side, side, &config.mask)?;
    let audio_windows = model.audio_windows(clip.audio().expect("matched clip carries audio"), clip.fps(), f)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let reference_index = match config.reference {
        ReferenceChoice::Random => rng.random_range(0..f),
        ReferenceChoice::First => 0,
    };
    let id = encode_identity(&cropped.frame(reference_index)?, &masks.frame_mask(reference_index)?, model.guider())?;
    let masked = encode_masked_video(&cropped, &masks, model.codec())?;
    let cond = ConditionBundle::new(Some(id), Some(audio_windows), masked.clone())?;
    let noise = masked.with_data(gaussian(masked.dims(), masked.data.dtype(), &mut rng)?);

    // clips shorter than one segment are denoised in a single pass
    let plan = if f < config.segment_len { vec![0..f] } else { plan_segments(f, config.segment_len, config.overlap)? };
    let latents = run_segments(&noise, &cond, model.unet(), &plan, config.overlap, &config.sampler(mc.sigma_data))?;
    let generated = model.codec().decode(&latents.data)?.clamp(0f32, 1f32)?;

    // lip boxes back in source coordinates
    let back = |b: &BoundingBox, c: &BoundingBox| {
        let (sx, sy) = (c.width() / side as f64, c.height() / side as f64);
        BoundingBox { x0: c.x0 + b.x0 * sx, y0: c.y0 + b.y0 * sy, x1: c.x0 + b.x1 * sx, y1: c.y0 + b.y1 * sy }
    };
    let gen_boxes: Vec<_> = masks.boxes.iter().zip(&crops).map(|(b, c)| back(b, c)).collect();
    let src_boxes = fill_missing(&landmarks_to_box(&lips, config.mask.pad_ratio, w, h)?, config.mask.max_gap)?;
    let video = composite(&clip, &generated, &crops, &src_boxes, &gen_boxes, config.dilation_px)?;
    Ok(InferenceOutput { video, reference_index, segments: plan })
}

#[cfg(test)]
mod tests;
