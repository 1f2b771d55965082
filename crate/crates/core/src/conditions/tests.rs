use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::codec::{AutoencoderCodec, AutoencoderConfig, IdentityCodec};
use crate::masking::rasterize;
use crate::media::{AudioTrack, BoundingBox};
use crate::unet::UNetConfig;

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    t.to_vec2().unwrap()
}

fn features(t: usize, d: usize) -> Tensor {
    Tensor::arange(1f32, (t * d) as f32 + 1.0, &Device::Cpu).unwrap().reshape((t, d)).unwrap()
}

#[test]
fn left_boundary_window_is_zero_padded() {
    let x = features(5, 3);
    let w = window_audio(&x, 2).unwrap();
    assert_eq!(w.per_frame.dims(), &[5, 5, 3]);
    let first = rows(&w.per_frame.get(0).unwrap());
    let src = rows(&x);
    assert_eq!(first, vec![vec![0.0; 3], vec![0.0; 3], src[0].clone(), src[1].clone(), src[2].clone()]);
}

#[test]
fn zero_radius_window_is_the_frame_itself() {
    let x = features(4, 2);
    let w = window_audio(&x, 0).unwrap();
    assert_eq!(rows(&w.per_frame.squeeze(1).unwrap()), rows(&x));
}

#[test]
fn interior_window_is_a_plain_slice() {
    let x = features(9, 2);
    let w = window_audio(&x, 2).unwrap();
    assert_eq!(rows(&w.per_frame.get(4).unwrap()), rows(&x.narrow(0, 2, 5).unwrap()));
}

#[test]
fn one_second_at_25_fps_gives_25_rows() {
    let ex = MelProjectionExtractor::new(16_000, 40, 64, 0).unwrap();
    let tone = AudioTrack::new((0..16_000).map(|i| (i as f32 * 0.05).sin()).collect(), 16_000).unwrap();
    let f = extract_audio_features(&tone, 25.0, &ex).unwrap();
    assert_eq!(f.dims(), &[25, 64]);
    assert_eq!(rows(&f), rows(&extract_audio_features(&tone, 25.0, &ex).unwrap()));
}

#[test]
fn silence_gives_identical_rows() {
    let ex = MelProjectionExtractor::new(16_000, 40, 64, 1).unwrap();
    let f = extract_audio_features(&AudioTrack::silence(0.8, 16_000).unwrap(), 25.0, &ex).unwrap();
    let r = rows(&f);
    assert_eq!(r.len(), 20);
    assert!(r.iter().all(|row| row == &r[0]));
}

#[test]
fn wrong_sample_rate_is_rejected() {
    let ex = MelProjectionExtractor::new(16_000, 40, 64, 0).unwrap();
    let err = extract_audio_features(&AudioTrack::silence(1.0, 8_000).unwrap(), 25.0, &ex).unwrap_err();
    assert!(matches!(err, Error::RateMismatch { expected: 16_000, actual: 8_000 }));
}

#[test]
fn precomputed_features_are_truncated_to_video_length() {
    let ex = PrecomputedFeatures::new(features(30, 4), 16_000).unwrap();
    let f = extract_audio_features(&AudioTrack::silence(1.0, 16_000).unwrap(), 25.0, &ex).unwrap();
    assert_eq!(f.dims(), &[25, 4]);
    assert!(extract_audio_features(&AudioTrack::silence(2.0, 16_000).unwrap(), 25.0, &ex).is_err());
}

fn sample_bundle() -> ConditionBundle {
    let latents = LatentVolume::new(Tensor::rand(0f32, 1.0, (3, 2, 4, 4), &Device::Cpu).unwrap(), 1).unwrap();
    let audio = window_audio(&features(3, 4), 1).unwrap();
    let id = IdFeaturePyramid { levels: vec![Tensor::ones((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap()] };
    ConditionBundle::new(Some(id), Some(audio), latents).unwrap()
}

fn is_zero(t: &Tensor) -> bool {
    t.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() == 0.0
}

#[test]
fn audio_drop_forces_reference_drop() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let out = drop_conditions(&sample_bundle(), 1.0, 0.0, &mut rng).unwrap();
        assert!(out.audio_dropped && out.reference_dropped);
        assert!(is_zero(&out.audio.unwrap().per_frame));
        assert!(is_zero(&out.id_features.unwrap().levels[0]));
    }
}

#[test]
fn zero_probabilities_leave_bundle_unchanged() {
    let b = sample_bundle();
    let out = drop_conditions(&b, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(!out.audio_dropped && !out.reference_dropped);
    assert_eq!(
        out.audio.unwrap().per_frame.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        b.audio.unwrap().per_frame.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );
    assert!(!is_zero(&out.id_features.unwrap().levels[0]));
}

#[test]
fn empirical_drop_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let (mut audio, mut reference) = (0usize, 0usize);
    for _ in 0..n {
        let d = DropDecision::draw(0.05, 0.15, &mut rng).unwrap();
        audio += d.audio as usize;
        reference += d.reference as usize;
    }
    // independent draws: P(ref dropped) = 1 - (1 - p_audio)(1 - p_ref)
    let expected_ref = 1.0 - (1.0 - 0.05) * (1.0 - 0.15);
    assert!((audio as f64 / n as f64 - 0.05).abs() < 0.005);
    assert!((reference as f64 / n as f64 - expected_ref).abs() < 0.005);
}

#[test]
fn invalid_probability_rejected() {
    assert!(DropDecision::draw(1.5, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

fn clip(f: usize) -> VideoClip {
    VideoClip::new(Tensor::rand(0.1f32, 1.0, (f, 3, 8, 8), &Device::Cpu).unwrap(), 25.0, None).unwrap()
}

#[test]
fn fully_masked_clip_encodes_to_zero_under_identity() {
    let masks = rasterize(&vec![BoundingBox::new(0.0, 0.0, 8.0, 8.0).unwrap(); 2], 8, 8).unwrap();
    let z = encode_masked_video(&clip(2), &masks, &IdentityCodec).unwrap();
    assert!(is_zero(&z.data));
}

#[test]
fn masking_only_changes_mask_support_under_identity() {
    let c = clip(2);
    let masks = rasterize(&vec![BoundingBox::new(2.0, 3.0, 6.0, 7.0).unwrap(); 2], 8, 8).unwrap();
    let z = encode_masked_video(&c, &masks, &IdentityCodec).unwrap();
    let diff = (z.data - c.frames()).unwrap().abs().unwrap().ne(0f32).unwrap().to_dtype(DType::F32).unwrap();
    let support = masks.binary_masks.broadcast_as((2, 3, 8, 8)).unwrap().to_dtype(DType::F32).unwrap();
    let outside = (diff * (1.0 - support).unwrap()).unwrap();
    assert!(is_zero(&outside));
}

#[test]
fn four_channel_codec_gives_eight_channel_unet_input() {
    let codec = AutoencoderCodec::new(AutoencoderConfig { pixel_channels: 3, latent_channels: 4, hidden: 8, scale: 2 }, 0).unwrap();
    let masks = rasterize(&vec![BoundingBox::new(2.0, 3.0, 6.0, 7.0).unwrap(); 2], 8, 8).unwrap();
    let z = encode_masked_video(&clip(2), &masks, &codec).unwrap();
    assert_eq!(z.dims(), &[2, 4, 4, 4]);
    let unet = UNetConfig { latent_channels: 4, ..Default::default() };
    assert_eq!(2 * unet.latent_channels, 8);
}

#[test]
fn toy_guider_levels_match_unet_channels() {
    let unet = UNetConfig { down_channels: vec![8, 16], ..Default::default() };
    let guider = IdGuider::new(IdGuiderConfig::mirroring(&unet, 3, 1), 0).unwrap();
    let reference = Tensor::zeros((3, 16, 16), DType::F32, &Device::Cpu).unwrap();
    let mask = Tensor::zeros((16, 16), DType::F32, &Device::Cpu).unwrap();
    let p = encode_identity(&reference, &mask, &guider).unwrap();
    let channels: Vec<usize> = p.levels.iter().map(|l| l.dims()[1]).collect();
    assert_eq!(channels, vec![8, 16]);
    assert!(p.levels.iter().all(is_zero));
    let again = encode_identity(&reference, &mask, &guider).unwrap();
    for (a, b) in p.levels.iter().zip(&again.levels) {
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
    let bad_mask = Tensor::zeros((8, 8), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(encode_identity(&reference, &bad_mask, &guider), Err(Error::ShapeMismatch(_))));
}

#[test]
fn guider_downsampler_channels_and_strides() {
    let cfg = IdGuiderConfig { scale: 4, level_channels: vec![8], ..Default::default() };
    let guider = IdGuider::new(cfg.clone(), 0).unwrap();
    let vars = guider.params().vars();
    let widths: Vec<usize> = (0..4).map(|i| vars[&format!("downsampler.{i}.weight")].dims()[0]).collect();
    assert_eq!(widths, vec![32, 64, 128, 64]);
    assert_eq!(vars["downsampler.0.weight"].dims()[1], 4);
    let out = guider.forward(&Tensor::zeros((1, 4, 32, 32), DType::F32, &Device::Cpu).unwrap()).unwrap();
    assert_eq!(out[0].dims(), &[1, 8, 8, 8]);
    assert_eq!(guider.params().num_parameters(), cfg.parameter_count());
}

proptest! {
    #[test]
    fn window_contains_slice_and_counts_padding(t in 1usize..12, k in 0usize..5) {
        let x = features(t, 2);
        let w = window_audio(&x, k).unwrap();
        let data: Vec<Vec<Vec<f32>>> = w.per_frame.to_vec3().unwrap();
        let src = rows(&x);
        for (i, win) in data.iter().enumerate() {
            let zero_rows = win.iter().filter(|r| r.iter().all(|v| *v == 0.0)).count();
            let expected = k.saturating_sub(i) + (i + k + 1).saturating_sub(t);
            prop_assert_eq!(zero_rows, expected);
            for (j, row) in win.iter().enumerate() {
                let idx = i as i64 + j as i64 - k as i64;
                if idx >= 0 && (idx as usize) < t {
                    prop_assert_eq!(row, &src[idx as usize]);
                }
            }
        }
    }

    #[test]
    fn dropping_never_touches_masked_latents(seed in any::<u64>(), pa in 0.0f64..=1.0, pr in 0.0f64..=1.0) {
        let b = sample_bundle();
        let out = drop_conditions(&b, pa, pr, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let before: Vec<u32> = b.masked_latents.data.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|x| x.to_bits()).collect();
        let after: Vec<u32> = out.masked_latents.data.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(before, after);
        prop_assert!(!out.audio_dropped || out.reference_dropped);
    }
}
