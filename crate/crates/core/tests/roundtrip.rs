//! Disk round trips through the public API: clips, checkpoints and a short
//! inference run on the reloaded model.

use lipsync_core::inference::{run_inference, InferenceConfig};
use lipsync_core::media::load_video;
use lipsync_core::model::{LipSyncModel, ModelConfig};
use lipsync_core::synth::{synth_clip, write_clip, SynthClipSpec};

fn toy_model(seed: u64) -> LipSyncModel {
    let mut mc = ModelConfig { resolution: 32, guider_downsampler: vec![8, 8, 8, 8], ..ModelConfig::default() };
    mc.unet.down_channels = vec![8, 16];
    mc.unet.self_attention = vec![false, false];
    mc.unet.temporal_window = 16;
    LipSyncModel::new(mc, seed).unwrap()
}

#[test]
fn clip_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthClipSpec { frames: 6, width: 48, height: 40, face_size: 30.0, seed: 2, ..SynthClipSpec::default() };
    let (clip, lm) = synth_clip(&spec).unwrap();
    write_clip(dir.path(), &clip, &lm).unwrap();
    let back = load_video(dir.path()).unwrap();
    assert_eq!(back.digest().unwrap(), clip.digest().unwrap());
    assert_eq!(back.fps(), clip.fps());
    assert!(back.audio().is_some());
}

#[test]
fn reloaded_checkpoint_infers_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.safetensors");
    let model = toy_model(4);
    model.save(&path).unwrap();
    let reloaded = LipSyncModel::load(&path).unwrap();
    assert_eq!(reloaded.config(), model.config());

    let spec = SynthClipSpec { frames: 10, width: 32, height: 32, face_size: 24.0, seed: 9, ..SynthClipSpec::default() };
    let (clip, lm) = synth_clip(&spec).unwrap();
    let audio = clip.audio().unwrap().clone();
    let config = InferenceConfig { steps: 2, seed: 3, ..InferenceConfig::default() };
    let a = run_inference(&model, &clip, &audio, Some(&lm), &config).unwrap();
    let b = run_inference(&reloaded, &clip, &audio, Some(&lm), &config).unwrap();
    assert_eq!(a.video.digest().unwrap(), b.video.digest().unwrap());
    assert_eq!(a.reference_index, b.reference_index);
    assert_eq!(a.video.num_frames(), clip.num_frames());

    // the top-left corner lies far from the lips and is copied from the source
    let src = clip.frame(0).unwrap().narrow(1, 0, 2).unwrap().narrow(2, 0, 2).unwrap();
    let out = a.video.frame(0).unwrap().narrow(1, 0, 2).unwrap().narrow(2, 0, 2).unwrap();
    let (src, out): (Vec<f32>, Vec<f32>) =
        (src.flatten_all().unwrap().to_vec1().unwrap(), out.flatten_all().unwrap().to_vec1().unwrap());
    assert_eq!(src, out);
}
