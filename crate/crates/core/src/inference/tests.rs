use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use super::*;
use crate::model::ModelConfig;
use crate::synth::{synth_clip, SynthClipSpec};
use crate::unet::UNetConfig;

fn counting_clip(frames: usize, fps: f64) -> VideoClip {
    // frame i is filled with i / 1000
    let data: Vec<f32> = (0..frames).flat_map(|i| std::iter::repeat(i as f32 / 1000.0).take(4)).collect();
    VideoClip::new(Tensor::from_vec(data, (frames, 1, 2, 2), &Device::Cpu).unwrap(), fps, None).unwrap()
}

fn frame_ids(clip: &VideoClip) -> Vec<f32> {
    clip.frames().narrow(2, 0, 1).unwrap().narrow(3, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn tone(seconds: f64) -> AudioTrack {
    let n = (seconds * 16_000.0).round() as usize;
    AudioTrack::new((0..n).map(|i| (i as f32 * 0.05).sin()).collect(), 16_000).unwrap()
}

#[test]
fn shorter_audio_truncates_to_prefix() {
    let out = match_duration(&counting_clip(50, 25.0), &tone(1.0), 3).unwrap();
    assert_eq!(out.num_frames(), 25);
    assert_eq!(frame_ids(&out), frame_ids(&counting_clip(25, 25.0)));
    assert_eq!(out.audio().unwrap().len(), 16_000);
}

#[test]
fn longer_audio_extends_as_palindrome() {
    let src = counting_clip(25, 25.0);
    let out = match_duration(&src, &tone(2.0), 0).unwrap();
    assert_eq!(out.num_frames(), 50);
    // oracle: forward pass followed by the reversed pass
    let mut expected: Vec<usize> = (0..25).collect();
    expected.extend((0..25).rev());
    let ids: Vec<usize> = frame_ids(&out).iter().map(|v| (v * 1000.0).round() as usize).collect();
    assert_eq!(ids, expected);
    assert_eq!(ids[49], 0);
}

#[test]
fn junction_smoothing_is_local() {
    let src = counting_clip(10, 25.0);
    let plain = frame_ids(&match_duration(&src, &tone(1.2), 0).unwrap());
    let smooth = frame_ids(&match_duration(&src, &tone(1.2), 3).unwrap());
    assert_eq!(plain.len(), 30);
    for i in 0..30 {
        let d = [10usize, 20].iter().map(|&j| if i < j { j - 1 - i } else { i - j }).min().unwrap();
        if d >= 3 {
            assert_eq!(plain[i], smooth[i], "frame {i}");
        }
    }
    // at the first junction, frames 9 and 10 both show source frame 9; the
    // full-weight blend averages 8, 9, 9
    assert!((smooth[9] - (0.008 + 0.009 + 0.009) / 3.0).abs() < 1e-6);
}

#[test]
fn equal_length_is_identity() {
    let src = counting_clip(25, 25.0);
    let out = match_duration(&src, &tone(1.0), 3).unwrap();
    assert_eq!(frame_ids(&out), frame_ids(&src));
}

#[test]
fn segment_plans_match_hand_enumeration() {
    assert_eq!(plan_segments(16, 16, 4).unwrap(), vec![0..16]);
    assert_eq!(plan_segments(28, 16, 4).unwrap(), vec![0..16, 12..28]);
    assert_eq!(plan_segments(40, 16, 4).unwrap(), vec![0..16, 12..28, 24..40]);
    assert_eq!(plan_segments(41, 16, 4).unwrap(), vec![0..16, 12..28, 24..40, 25..41]);
    assert!(matches!(plan_segments(15, 16, 4), Err(Error::TooShort { frames: 15, segment_len: 16 })));
    assert!(plan_segments(20, 16, 16).is_err());
}

/// Frame-local stand-in: each output frame depends only on the same frame's
/// input and masked latents.
struct FrameLocal;

impl DenoisingNetwork for FrameLocal {
    fn forward(&self, x: &Tensor, cond: &ConditionBundle, c_noise: f64) -> Result<Tensor> {
        let m = cond.masked_latents.data.to_dtype(x.dtype())?;
        Ok(((x * (0.3 + 0.1 * c_noise))? + (m * 0.7)?)?)
    }
}

fn stub_inputs(frames: usize, seed: u64) -> (LatentVolume, ConditionBundle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = LatentVolume::new(gaussian(&[frames, 2, 4, 4], DType::F64, &mut rng).unwrap(), 1).unwrap();
    let masked = LatentVolume::new(gaussian(&[frames, 2, 4, 4], DType::F64, &mut rng).unwrap(), 1).unwrap();
    (noise, ConditionBundle::latents_only(masked))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn segmented_stub_output_equals_single_pass() {
    let sampler = SamplerConfig::default();
    for frames in [16, 28, 40, 41] {
        let (noise, cond) = stub_inputs(frames, frames as u64);
        let plan = plan_segments(frames, 16, 4).unwrap();
        let seg = run_segments(&noise, &cond, &FrameLocal, &plan, 4, &sampler).unwrap();
        let whole = sample(&noise, &cond, &FrameLocal, &sampler).unwrap();
        assert!(max_abs_diff(&seg.data, &whole.data) < 1e-6, "F={frames}");
    }
}

#[test]
fn single_segment_is_a_direct_sample() {
    let (noise, cond) = stub_inputs(16, 1);
    let sampler = SamplerConfig::default();
    let seg = run_segments(&noise, &cond, &FrameLocal, &[0..16], 4, &sampler).unwrap();
    let direct = sample(&noise, &cond, &FrameLocal, &sampler).unwrap();
    assert_eq!(max_abs_diff(&seg.data, &direct.data), 0.0);
}

#[test]
fn ramp_weights_partition_unity_and_ramp_inside_overlaps() {
    for frames in [16, 28, 40, 41, 100] {
        let plan = plan_segments(frames, 16, 4).unwrap();
        let weights = blend_weights(&plan, 4, frames);
        let mut total = vec![0.0; frames];
        for (s, w) in plan.iter().zip(&weights) {
            for (j, v) in s.clone().zip(w) {
                assert!(*v > 0.0);
                total[j] += v;
            }
        }
        assert!(total.iter().all(|t| (t - 1.0).abs() < 1e-12));
    }
    let s = 12..28;
    let ramp: Vec<f64> = (12..17).map(|j| ramp_weight(&s, j, 4, 40)).collect();
    assert_eq!(ramp, vec![0.2, 0.4, 0.6, 0.8, 1.0]);
}

fn plain_clip(frames: usize, value: f32) -> VideoClip {
    VideoClip::new(Tensor::full(value, (frames, 1, 8, 8), &Device::Cpu).unwrap(), 25.0, None).unwrap()
}

fn changed_pixels(a: &VideoClip, b: &VideoClip) -> Vec<(usize, usize)> {
    let (va, vb) = (a.frames().flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.frames().flatten_all().unwrap().to_vec1::<f32>().unwrap());
    va.iter().zip(&vb).enumerate().filter(|(_, (x, y))| x != y).map(|(i, _)| ((i % 64) / 8, i % 8)).collect()
}

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

#[test]
fn composite_pastes_exactly_the_region() {
    let src = plain_clip(1, 0.25);
    let gen = Tensor::full(0.75f32, (1, 1, 8, 8), &Device::Cpu).unwrap();
    let full = [bx(0.0, 0.0, 8.0, 8.0)];
    let b = [bx(2.0, 3.0, 5.0, 6.0)];
    let out = composite(&src, &gen, &full, &b, &b, 0.0).unwrap();
    let expected: Vec<_> = (3..6).flat_map(|y| (2..5).map(move |x| (y, x))).collect();
    assert_eq!(changed_pixels(&src, &out), expected);

    // disjoint boxes: the bounding rectangle of both, enumerated as an oracle
    let (a, c) = ([bx(1.0, 1.0, 2.0, 2.0)], [bx(5.0, 4.0, 7.0, 6.0)]);
    let out = composite(&src, &gen, &full, &a, &c, 0.0).unwrap();
    let expected: Vec<_> = (1..6).flat_map(|y| (1..7).map(move |x| (y, x))).collect();
    assert_eq!(changed_pixels(&src, &out), expected);

    // dilation grows both boxes; the crop bounds the result
    let out = composite(&src, &gen, &[bx(0.0, 0.0, 4.0, 8.0)], &b, &b, 1.0).unwrap();
    let expected: Vec<_> = (2..7).flat_map(|y| (1..4).map(move |x| (y, x))).collect();
    assert_eq!(changed_pixels(&src, &out), expected);
}

#[test]
fn compositing_the_source_crop_is_a_no_op() {
    let (clip, lm) = synth_clip(&SynthClipSpec { frames: 3, width: 32, height: 32, face_size: 24.0, ..Default::default() }).unwrap();
    let boxes = fill_missing(&landmarks_to_box(&lm, 0.3, 32, 32).unwrap(), 8).unwrap();
    let full = vec![bx(0.0, 0.0, 32.0, 32.0); 3];
    let out = composite(&clip, clip.frames(), &full, &boxes, &boxes, 2.0).unwrap();
    assert_eq!(out.digest().unwrap(), clip.digest().unwrap());
    assert!(composite(&clip, clip.frames(), &full[..2], &boxes, &boxes, 2.0).is_err());
}

fn tiny_model() -> LipSyncModel {
    let config = ModelConfig {
        resolution: 16,
        unet: UNetConfig { down_channels: vec![8, 16], self_attention: vec![false, false], temporal_window: 16, ..UNetConfig::default() },
        guider_downsampler: vec![8, 8, 8, 8],
        ..ModelConfig::default()
    };
    LipSyncModel::new(config, 3).unwrap()
}

fn quick_config(seed: u64) -> InferenceConfig {
    InferenceConfig { segment_len: 8, overlap: 2, steps: 2, seed, ..InferenceConfig::default() }
}

#[test]
fn pipeline_is_seed_deterministic_and_edits_only_the_mouth() {
    let model = tiny_model();
    let (clip, lm) = synth_clip(&SynthClipSpec { frames: 12, width: 32, height: 32, face_size: 24.0, ..Default::default() }).unwrap();
    let audio = synth_clip(&SynthClipSpec { frames: 14, width: 8, height: 8, face_size: 4.0, seed: 5, ..Default::default() })
        .unwrap()
        .0
        .audio()
        .cloned()
        .unwrap();
    for crop in [CropMode::Full, CropMode::Face] {
        let cfg = InferenceConfig { crop, ..quick_config(1) };
        let a = run_inference(&model, &clip, &audio, Some(&lm), &cfg).unwrap();
        let b = run_inference(&model, &clip, &audio, Some(&lm), &cfg).unwrap();
        assert_eq!(a.video.digest().unwrap(), b.video.digest().unwrap());
        assert_eq!(a.video.num_frames(), 14);
        assert_eq!(a.segments, vec![0..8, 6..14]);
        assert_eq!(a.video.audio().unwrap().len(), audio.len());
        // pixels far from the mouth come from the source
        let matched = match_duration(&clip, &audio, cfg.junction_smooth_frames).unwrap();
        let top = |v: &VideoClip| v.frames().narrow(2, 0, 8).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(top(&a.video), top(&matched));
    }
    let other = run_inference(&model, &clip, &audio, Some(&lm), &quick_config(2)).unwrap();
    let first = run_inference(&model, &clip, &audio, Some(&lm), &quick_config(1)).unwrap();
    assert_ne!(other.video.digest().unwrap(), first.video.digest().unwrap());
}

#[test]
fn short_video_runs_as_one_segment_and_first_reference_is_honoured() {
    let model = tiny_model();
    let (clip, _) = synth_clip(&SynthClipSpec { frames: 5, width: 32, height: 32, face_size: 24.0, ..Default::default() }).unwrap();
    let audio = clip.audio().cloned().unwrap();
    let cfg = InferenceConfig { reference: ReferenceChoice::First, ..quick_config(0) };
    let out = run_inference(&model, &clip, &audio, None, &cfg).unwrap();
    assert_eq!(out.segments, vec![0..5]);
    assert_eq!(out.reference_index, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(InferenceConfig { overlap: 16, ..Default::default() }.validate().is_err());
    assert!(InferenceConfig { steps: 0, ..Default::default() }.validate().is_err());
    assert!(InferenceConfig { guidance_scale: -1.0, ..Default::default() }.validate().is_err());
    let d = InferenceConfig::default();
    assert_eq!((d.guidance_scale, d.steps, d.overlap, d.segment_len), (3.0, 15, 4, 16));
    let model = tiny_model();
    let (clip, lm) = synth_clip(&SynthClipSpec { frames: 4, width: 32, height: 32, face_size: 24.0, ..Default::default() }).unwrap();
    let long = InferenceConfig { segment_len: 32, ..quick_config(0) };
    assert!(matches!(run_inference(&model, &clip, clip.audio().unwrap(), Some(&lm), &long), Err(Error::ConfigMismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn matched_length_is_rounded_audio_duration(frames in 1usize..40, samples in 1usize..40_000, fps in prop::sample::select(vec![24.0, 25.0, 30.0])) {
        let video = counting_clip(frames, fps);
        let audio = AudioTrack::new(vec![0.0; samples], 16_000).unwrap();
        let out = match_duration(&video, &audio, 3).unwrap();
        let expected = ((samples as f64 / 16_000.0 * fps).round() as usize).max(1);
        prop_assert_eq!(out.num_frames(), expected);
    }

    #[test]
    fn plans_cover_every_frame_with_required_overlap(segment_len in 2usize..20, overlap_frac in 0.0f64..1.0, extra in 0usize..60) {
        let overlap = 1 + ((segment_len - 2) as f64 * overlap_frac) as usize;
        let frames = segment_len + extra;
        let plan = plan_segments(frames, segment_len, overlap).unwrap();
        let mut cover = vec![0; frames];
        for s in &plan {
            prop_assert_eq!(s.len(), segment_len);
            for j in s.clone() { cover[j] += 1; }
        }
        prop_assert!(cover.iter().all(|&c| c >= 1));
        for pair in plan.windows(2) {
            prop_assert!(pair[0].end >= pair[1].start + overlap);
        }
        let stride = segment_len - overlap;
        prop_assert_eq!(plan.len(), (frames - segment_len).div_ceil(stride) + 1);
    }
}
