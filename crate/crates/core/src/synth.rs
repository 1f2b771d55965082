//! Procedural talking-face clips: an elliptical face whose mouth opening
//! follows the loudness envelope of a synthetic voiced signal. Used for toy
//! training runs, tests and the curation fixture corpus.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::media::{save_video, AudioTrack, LandmarkSequence, VideoClip};
use crate::training::dataset::{write_manifest, DatasetRecord};

pub const LANDMARKS_NAME: &str = "landmarks.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthClipSpec {
    pub frames: usize,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub sample_rate: u32,
    /// Face diameter in pixels.
    pub face_size: f64,
    /// Mouth openings per second.
    pub syllable_rate: f64,
    /// Horizontal shake: the face alternates between `+jitter_px` and `-jitter_px`.
    pub jitter_px: f64,
    /// From frame `.0` on, the face sits `.1` pixels further right.
    pub shift: Option<(usize, f64)>,
    /// Box-blur passes applied to every frame.
    pub blur_passes: usize,
    /// Frames whose landmarks are reported missing.
    pub missing_landmarks: Vec<Range<usize>>,
    /// Frames drawn without a face (landmarks missing too).
    pub face_hidden: Vec<Range<usize>>,
    pub silent: bool,
    pub seed: u64,
}

impl Default for SynthClipSpec {
    fn default() -> Self {
        Self {
            frames: 32,
            fps: 25.0,
            width: 64,
            height: 64,
            channels: 3,
            sample_rate: 16_000,
            face_size: 44.0,
            syllable_rate: 3.0,
            jitter_px: 0.0,
            shift: None,
            blur_passes: 0,
            missing_landmarks: Vec::new(),
            face_hidden: Vec::new(),
            silent: false,
            seed: 0,
        }
    }
}

/// Mouth opening in [0, 1] at time `t`.
fn envelope(t: f64, rate: f64, phase: f64) -> f64 {
    0.5 - 0.5 * (2.0 * PI * rate * t + phase).cos()
}

const LIP_POINTS: usize = 12;

pub fn synth_clip(spec: &SynthClipSpec) -> Result<(VideoClip, LandmarkSequence)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase = rng.random_range(0.0..2.0 * PI);
    let pitch = rng.random_range(140.0..220.0);
    let shade = rng.random_range(0.65..0.85);
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let tint: Vec<f64> = (0..c).map(|_| rng.random_range(0.9..1.1)).collect();
    let mut data = Vec::with_capacity(spec.frames * c * h * w);
    let mut landmarks = Vec::with_capacity(spec.frames);
    let radius = spec.face_size / 2.0;
    for f in 0..spec.frames {
        let t = f as f64 / spec.fps;
        let open = envelope(t, spec.syllable_rate, phase);
        let shake = if f % 2 == 0 { spec.jitter_px } else { -spec.jitter_px };
        let shift = spec.shift.filter(|(at, _)| f >= *at).map_or(0.0, |(_, dx)| dx);
        let hidden = spec.face_hidden.iter().any(|r| r.contains(&f));
        let (cx, cy) = (w as f64 / 2.0 + shake + shift, h as f64 / 2.0);
        let (mx, my) = (cx, cy + 0.45 * radius);
        let (mrx, mry) = (0.4 * radius, 0.04 * radius + 0.2 * radius * open);
        let eye = 0.1 * radius;
        let mut plane = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = |ox: f64, oy: f64, rx: f64, ry: f64| ((px - ox) / rx).powi(2) + ((py - oy) / ry).powi(2) <= 1.0;
                plane[y * w + x] = if hidden {
                    0.15 + 0.1 * y as f64 / h as f64
                } else if inside(mx, my, mrx, mry) {
                    0.12
                } else if inside(cx - 0.4 * radius, cy - 0.25 * radius, eye, eye)
                    || inside(cx + 0.4 * radius, cy - 0.25 * radius, eye, eye)
                {
                    0.2
                } else if inside(cx, cy, radius * 0.85, radius) {
                    shade
                } else {
                    0.15 + 0.1 * y as f64 / h as f64
                };
            }
        }
        for _ in 0..spec.blur_passes {
            plane = box_blur(&plane, w, h);
        }
        for k in &tint {
            data.extend(plane.iter().map(|v| (v * k).clamp(0.0, 1.0) as f32));
        }
        let missing = hidden || spec.missing_landmarks.iter().any(|r| r.contains(&f));
        landmarks.push((!missing).then(|| {
            (0..LIP_POINTS)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / LIP_POINTS as f64;
                    [(mx + mrx * a.cos()).clamp(0.0, w as f64), (my + mry * a.sin()).clamp(0.0, h as f64)]
                })
                .collect()
        }));
    }
    let frames = Tensor::from_vec(data, (spec.frames, c, h, w), &Device::Cpu)?;
    let n = (spec.frames as f64 / spec.fps * spec.sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| {
            if spec.silent {
                return 0.0;
            }
            let t = i as f64 / spec.sample_rate as f64;
            let carrier = (2.0 * PI * pitch * t).sin() + 0.5 * (4.0 * PI * pitch * t).sin() + 0.25 * (6.0 * PI * pitch * t).sin();
            (0.4 * envelope(t, spec.syllable_rate, phase) * carrier) as f32
        })
        .collect();
    let audio = AudioTrack::new(samples, spec.sample_rate)?;
    Ok((VideoClip::new(frames, spec.fps, Some(audio))?, LandmarkSequence::new(landmarks)))
}

fn box_blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let (mut sum, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    sum += plane[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = sum / n;
        }
    }
    out
}

/// Writes a clip as a frame directory plus `landmarks.json`.
pub fn write_clip(dir: &Path, clip: &VideoClip, landmarks: &LandmarkSequence) -> Result<()> {
    save_video(clip, dir)?;
    landmarks.save(&dir.join(LANDMARKS_NAME))
}

/// Generates `count` clips under `root` with seeds `seed, seed+1, ...` and a
/// `dataset.jsonl` manifest referencing them.
pub fn write_dataset(root: &Path, count: usize, template: &SynthClipSpec) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SynthClipSpec { seed: template.seed.wrapping_add(i as u64), ..template.clone() };
        let (clip, lm) = synth_clip(&spec)?;
        let name = format!("clip_{i:03}");
        write_clip(&root.join(&name), &clip, &lm)?;
        records.push(DatasetRecord {
            frames_dir: name.clone().into(),
            audio_path: Some(format!("{name}/{}", crate::media::AUDIO_NAME).into()),
            landmarks_path: format!("{name}/{LANDMARKS_NAME}").into(),
            filters_passed: Vec::new(),
        });
    }
    write_manifest(&root.join("dataset.jsonl"), &records)?;
    Ok(records)
}

/// A curation fixture: six 320x320 grayscale sources, each built to fail
/// exactly one filter, returned as `(source name, failing filter)`.
pub fn write_curation_corpus(dir: &Path) -> Result<Vec<(String, &'static str)>> {
    let base = SynthClipSpec {
        frames: 60,
        width: 320,
        height: 320,
        channels: 1,
        face_size: 280.0,
        ..SynthClipSpec::default()
    };
    let cases: [(&str, &'static str, SynthClipSpec); 6] = [
        ("a_gap", "detection", SynthClipSpec { face_hidden: vec![20..30], ..base.clone() }),
        ("b_small_face", "resolution", SynthClipSpec { face_size: 200.0, ..base.clone() }),
        ("c_blurry", "quality", SynthClipSpec { blur_passes: 12, ..base.clone() }),
        ("d_shaky", "jitter", SynthClipSpec { jitter_px: 30.0, ..base.clone() }),
        ("e_cut_short", "length", SynthClipSpec { frames: 75, shift: Some((37, 50.0)), ..base.clone() }),
        ("f_silent", "alignment", SynthClipSpec { silent: true, ..base.clone() }),
    ];
    let mut out = Vec::new();
    for (i, (name, filter, spec)) in cases.into_iter().enumerate() {
        let (clip, lm) = synth_clip(&SynthClipSpec { seed: 100 + i as u64, ..spec })?;
        write_clip(&dir.join(name), &clip, &lm)?;
        out.push((name.to_string(), filter));
    }
    Ok(out)
}

/// A source that passes every curation filter.
pub fn curation_pass_spec() -> SynthClipSpec {
    SynthClipSpec { frames: 60, width: 320, height: 320, channels: 1, face_size: 280.0, seed: 200, ..SynthClipSpec::default() }
}
