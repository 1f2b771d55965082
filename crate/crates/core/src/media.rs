//! Frame, audio, landmark and latent containers plus their on-disk formats.
//!
//! Videos are exchanged as a directory of numbered PNG frames next to a
//! `video.json` sidecar holding `{fps, audio_path}`; audio is 16-bit PCM WAV.
//! Animated GIFs are also accepted on load. Pixels live in `[0, 1]`.

use std::fs;
use std::io::BufReader;
use std::ops::Range;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{AnimationDecoder, DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SIDECAR_NAME: &str = "video.json";
pub const AUDIO_NAME: &str = "audio.wav";

pub(crate) fn ensure_finite(t: &Tensor, what: &'static str) -> Result<()> {
    let total = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidRate(0.0));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(duration_s: f64, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; (duration_s * sample_rate as f64).round() as usize], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples covering `[start_s, end_s)`, zero-padded past the end.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> AudioTrack {
        let rate = self.sample_rate as f64;
        let a = (start_s * rate).round().max(0.0) as usize;
        let b = (end_s * rate).round().max(0.0) as usize;
        let samples = (a..b).map(|i| self.samples.get(i).copied().unwrap_or(0.0)).collect();
        AudioTrack { samples, sample_rate: self.sample_rate }
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let unreadable = |reason: String| Error::UnreadableMedia { path: path.to_path_buf(), reason };
        let mut reader = hound::WavReader::open(path).map_err(|e| unreadable(e.to_string()))?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let peak = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / peak))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| unreadable(e.to_string()))?
            }
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| unreadable(e.to_string()))?,
        };
        // downmix to mono
        let samples = interleaved
            .chunks(channels)
            .map(|c| c.iter().sum::<f32>() / channels as f32)
            .collect();
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let to_io = |e: hound::Error| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::io(path, std::io::Error::other(other.to_string())),
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
            writer.write_sample(v).map_err(to_io)?;
        }
        writer.finalize().map_err(to_io)
    }
}

/// Band-limited resampling with a Lanczos-windowed sinc kernel.
///
/// The output holds `round(len * target / source)` samples, so duration is
/// preserved to within one output sample.
pub fn resample_audio(track: &AudioTrack, target_rate: f64) -> Result<AudioTrack> {
    if !(target_rate > 0.0) || !target_rate.is_finite() || target_rate.fract() != 0.0 {
        return Err(Error::InvalidRate(target_rate));
    }
    let target = target_rate as u32;
    if target == track.sample_rate {
        return Ok(track.clone());
    }
    const LOBES: f64 = 16.0;
    let ratio = target_rate / track.sample_rate as f64;
    let cutoff = ratio.min(1.0);
    let half_width = LOBES / cutoff;
    let input = &track.samples;
    let out_len = (input.len() as f64 * ratio).round() as usize;
    let sinc = |x: f64| if x.abs() < 1e-12 { 1.0 } else { (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x) };
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = i as f64 / ratio;
        let lo = (center - half_width).ceil().max(0.0) as usize;
        let hi = ((center + half_width).floor() as isize).min(input.len() as isize - 1);
        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        if hi >= lo as isize {
            for (j, &x) in input.iter().enumerate().take(hi as usize + 1).skip(lo) {
                let d = (center - j as f64) * cutoff;
                let w = sinc(d) * sinc(d / LOBES);
                acc += w * x as f64;
                norm += w;
            }
        }
        out.push(if norm.abs() > 1e-12 { (acc / norm) as f32 } else { 0.0 });
    }
    AudioTrack::new(out, target)
}

/// Axis-aligned box in pixel coordinates; `(x0, y0)` inclusive, `(x1, y1)` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bounding box"));
        }
        if x1 < x0 || y1 < y0 {
            return Err(Error::InvalidArgument(format!("inverted box {b:?}")));
        }
        Ok(b)
    }

    /// Tight bound of a point set.
    pub fn enclosing(points: &[[f64; 2]]) -> Option<Self> {
        let first = points.first()?;
        let mut b = Self { x0: first[0], y0: first[1], x1: first[0], y1: first[1] };
        for p in &points[1..] {
            b.x0 = b.x0.min(p[0]);
            b.y0 = b.y0.min(p[1]);
            b.x1 = b.x1.max(p[0]);
            b.y1 = b.y1.max(p[1]);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    /// Grows each side by `ratio` of the box's own width/height.
    pub fn expand(&self, ratio: f64) -> Self {
        let dx = self.width() * ratio;
        let dy = self.height() * ratio;
        Self { x0: self.x0 - dx, y0: self.y0 - dy, x1: self.x1 + dx, y1: self.y1 + dy }
    }

    pub fn dilate(&self, px: f64) -> Self {
        Self { x0: self.x0 - px, y0: self.y0 - px, x1: self.x1 + px, y1: self.y1 + px }
    }

    pub fn clamp(&self, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        let x0 = self.x0.clamp(0.0, w);
        let y0 = self.y0.clamp(0.0, h);
        Self { x0, y0, x1: self.x1.clamp(x0, w), y1: self.y1.clamp(y0, h) }
    }

    /// Smallest rectangle containing both boxes.
    pub fn bounding_union(&self, other: &Self) -> Self {
        Self {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Overlap of the two boxes; zero-area at the nearest edge when disjoint.
    pub fn intersect(&self, other: &Self) -> Self {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        Self { x0, y0, x1: self.x1.min(other.x1).max(x0), y1: self.y1.min(other.y1).max(y0) }
    }

    /// Integer pixel extent after rounding: `(col0, row0, col1, row1)`, half-open.
    pub fn pixel_bounds(&self) -> (usize, usize, usize, usize) {
        let r = |v: f64| v.round().max(0.0) as usize;
        let (c0, r0) = (r(self.x0), r(self.y0));
        (c0, r0, r(self.x1).max(c0), r(self.y1).max(r0))
    }

    /// Maps into a frame where `origin` sits at 0 and lengths are multiplied by `(sx, sy)`.
    pub fn to_frame(&self, origin: [f64; 2], sx: f64, sy: f64) -> Self {
        Self {
            x0: (self.x0 - origin[0]) * sx,
            y0: (self.y0 - origin[1]) * sy,
            x1: (self.x1 - origin[0]) * sx,
            y1: (self.y1 - origin[1]) * sy,
        }
    }

    pub(crate) fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub(crate) fn from_coords(c: [f64; 4]) -> Self {
        Self { x0: c[0], y0: c[1], x1: c[2], y1: c[3] }
    }
}

/// Per-frame facial landmark points; `None` marks a frame without detection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSequence {
    pub frames: Vec<Option<Vec<[f64; 2]>>>,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<Option<Vec<[f64; 2]>>>) -> Self {
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for (f, pts) in self.frames.iter().enumerate() {
            for p in pts.iter().flatten() {
                let inside = p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= width as f64 && p[1] <= height as f64;
                if !inside || !p[0].is_finite() || !p[1].is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "landmark {p:?} in frame {f} outside {width}x{height}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        Self { frames: self.frames[range].to_vec() }
    }

    /// Multiplies x by `sx` and y by `sy`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| f.as_ref().map(|pts| pts.iter().map(|p| [p[0] * sx, p[1] * sy]).collect()))
            .collect();
        Self { frames }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Latent tensor `[F, C_lat, H_lat, W_lat]` with its pixel downsampling factor.
#[derive(Debug, Clone)]
pub struct LatentVolume {
    pub data: Tensor,
    pub scale: usize,
}

impl LatentVolume {
    pub fn new(data: Tensor, scale: usize) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::shape(format!("latent volume must be rank 4, got {:?}", data.dims())));
        }
        if scale == 0 {
            return Err(Error::InvalidArgument("latent scale must be positive".into()));
        }
        Ok(Self { data, scale })
    }

    pub fn dims(&self) -> &[usize] {
        self.data.dims()
    }

    pub fn num_frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn with_data(&self, data: Tensor) -> Self {
        Self { data, scale: self.scale }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    fps: f64,
    #[serde(default)]
    audio_path: Option<String>,
}

/// Frames `[F, C, H, W]` (f32, values in `[0, 1]`) at a fixed frame rate.
#[derive(Debug, Clone)]
pub struct VideoClip {
    frames: Tensor,
    fps: f64,
    audio: Option<AudioTrack>,
}

impl VideoClip {
    pub fn new(frames: Tensor, fps: f64, audio: Option<AudioTrack>) -> Result<Self> {
        let dims = frames.dims().to_vec();
        if dims.len() != 4 {
            return Err(Error::shape(format!("frames must be [F, C, H, W], got {dims:?}")));
        }
        if dims[0] == 0 {
            return Err(Error::InvalidArgument("video must have at least one frame".into()));
        }
        if dims[1] != 1 && dims[1] != 3 {
            return Err(Error::shape(format!("expected 1 or 3 channels, got {}", dims[1])));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::InvalidRate(fps));
        }
        let frames = frames.to_dtype(DType::F32)?;
        ensure_finite(&frames, "video frames")?;
        let lo = frames.flatten_all()?.min(0)?.to_scalar::<f32>()?;
        let hi = frames.flatten_all()?.max(0)?.to_scalar::<f32>()?;
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::InvalidArgument(format!("pixel values outside [0,1]: [{lo}, {hi}]")));
        }
        let clip = Self { frames, fps, audio: None };
        clip.with_audio(audio)
    }

    pub fn with_audio(mut self, audio: Option<AudioTrack>) -> Result<Self> {
        if let Some(a) = &audio {
            let video_s = self.num_frames() as f64 / self.fps;
            if (a.duration() - video_s).abs() > 1.0 / self.fps + 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "audio lasts {:.3}s but video lasts {:.3}s",
                    a.duration(),
                    video_s
                )));
            }
        }
        self.audio = audio;
        Ok(self)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn audio(&self) -> Option<&AudioTrack> {
        self.audio.as_ref()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.frames.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.dims()[3]
    }

    pub fn duration(&self) -> f64 {
        self.num_frames() as f64 / self.fps
    }

    /// Single frame `[C, H, W]`.
    pub fn frame(&self, index: usize) -> Result<Tensor> {
        Ok(self.frames.get(index)?)
    }

    pub fn slice(&self, range: Range<usize>) -> Result<VideoClip> {
        if range.start >= range.end || range.end > self.num_frames() {
            return Err(Error::InvalidArgument(format!(
                "frame range {range:?} outside 0..{}",
                self.num_frames()
            )));
        }
        let frames = self.frames.narrow(0, range.start, range.end - range.start)?;
        let audio = self
            .audio
            .as_ref()
            .map(|a| a.slice_seconds(range.start as f64 / self.fps, range.end as f64 / self.fps));
        Ok(Self { frames, fps: self.fps, audio })
    }

    /// Replaces the frame tensor, keeping fps and audio.
    pub fn with_frames(&self, frames: Tensor) -> Result<VideoClip> {
        VideoClip::new(frames, self.fps, None)?.with_audio(self.audio.clone())
    }

    /// SHA-256 of the 8-bit quantized frames, the same bytes written to PNG.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for f in 0..self.num_frames() {
            hasher.update(quantize(&self.frame(f)?)?);
        }
        Ok(format!("{:x}", hasher.finalize()))
    }
}

fn quantize(frame: &Tensor) -> Result<Vec<u8>> {
    // [C, H, W] -> interleaved HWC bytes
    let hwc = frame.permute((1, 2, 0))?.flatten_all()?.to_vec1::<f32>()?;
    Ok(hwc.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect())
}

fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:05}.png"))
}

fn image_to_chw(img: DynamicImage) -> (usize, Vec<f32>, usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            (1, g.pixels().map(|p| p.0[0] as f32 / 255.0).collect(), h, w)
        }
        other => {
            let rgb = other.to_rgb8();
            let mut chw = vec![0.0f32; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    chw[c * h * w + i] = p.0[c] as f32 / 255.0;
                }
            }
            (3, chw, h, w)
        }
    }
}

fn stack_frames(path: &Path, frames: Vec<(usize, Vec<f32>, usize, usize)>) -> Result<Tensor> {
    let Some(&(c, _, h, w)) = frames.first() else {
        return Err(Error::EmptyVideo(path.to_path_buf()));
    };
    let n = frames.len();
    let mut data = Vec::with_capacity(n * c * h * w);
    for (i, (fc, px, fh, fw)) in frames.into_iter().enumerate() {
        if (fc, fh, fw) != (c, h, w) {
            return Err(Error::UnreadableMedia {
                path: path.to_path_buf(),
                reason: format!("frame {i} is {fc}x{fh}x{fw}, expected {c}x{h}x{w}"),
            });
        }
        data.extend(px);
    }
    Ok(Tensor::from_vec(data, (n, c, h, w), &Device::Cpu)?)
}

/// Bilinear (triangle filter) resize of `[F, C, H, W]` frames; a no-op when
/// the size already matches.
pub fn resize_frames(frames: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (f, c, h, w) = frames.dims4()?;
    if (h, w) == (height, width) {
        return Ok(frames.clone());
    }
    if height == 0 || width == 0 {
        return Err(Error::shape(format!("cannot resize to {height}x{width}")));
    }
    let data = frames.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(f * c * height * width);
    for plane in data.chunks_exact(h * w) {
        let img = ImageBuffer::<Luma<f32>, Vec<f32>>::from_raw(w as u32, h as u32, plane.to_vec())
            .ok_or_else(|| Error::shape("frame buffer size"))?;
        let resized = image::imageops::resize(&img, width as u32, height as u32, image::imageops::FilterType::Triangle);
        out.extend(resized.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(Tensor::from_vec(out, (f, c, height, width), &Device::Cpu)?)
}

/// Loads a frame directory (with sidecar) or an animated GIF.
pub fn load_video(path: &Path) -> Result<VideoClip> {
    let unreadable = |reason: String| Error::UnreadableMedia { path: path.to_path_buf(), reason };
    if path.is_dir() {
        let sidecar_path = path.join(SIDECAR_NAME);
        let text = fs::read_to_string(&sidecar_path).map_err(|e| unreadable(format!("sidecar: {e}")))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| unreadable(format!("sidecar: {e}")))?;
        let mut frames = Vec::new();
        loop {
            let p = frame_path(path, frames.len());
            if !p.exists() {
                break;
            }
            let img = image::open(&p).map_err(|e| unreadable(format!("{}: {e}", p.display())))?;
            frames.push(image_to_chw(img));
        }
        let tensor = stack_frames(path, frames)?;
        let audio = match &sidecar.audio_path {
            Some(rel) => Some(AudioTrack::read_wav(&path.join(rel))?),
            None => None,
        };
        VideoClip::new(tensor, sidecar.fps, audio)
    } else {
        let file = fs::File::open(path).map_err(|e| unreadable(e.to_string()))?;
        let decoder = image::codecs::gif::GifDecoder::new(BufReader::new(file))
            .map_err(|e| unreadable(e.to_string()))?;
        let raw = decoder.into_frames().collect_frames().map_err(|e| unreadable(e.to_string()))?;
        let fps = raw
            .first()
            .map(|f| {
                let (num, den) = f.delay().numer_denom_ms();
                if num == 0 { 25.0 } else { 1000.0 * den as f64 / num as f64 }
            })
            .unwrap_or(25.0);
        let frames = raw
            .into_iter()
            .map(|f| image_to_chw(DynamicImage::ImageRgba8(f.into_buffer())))
            .collect();
        VideoClip::new(stack_frames(path, frames)?, fps, None)
    }
}

/// Writes `clip` as numbered PNG frames, sidecar, and (if present) WAV audio.
pub fn save_video(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = (clip.channels(), clip.height() as u32, clip.width() as u32);
    for f in 0..clip.num_frames() {
        let bytes = quantize(&clip.frame(f)?)?;
        let p = frame_path(dir, f);
        let res = if c == 1 {
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("sized buffer").save(&p)
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("sized buffer").save(&p)
        };
        res.map_err(|e| Error::io(&p, std::io::Error::other(e.to_string())))?;
    }
    // drop stale frames from a previous, longer save
    let mut stale = clip.num_frames();
    while frame_path(dir, stale).exists() {
        fs::remove_file(frame_path(dir, stale)).map_err(|e| Error::io(dir, e))?;
        stale += 1;
    }
    let audio_path = match clip.audio() {
        Some(a) => {
            a.write_wav(&dir.join(AUDIO_NAME))?;
            Some(AUDIO_NAME.to_string())
        }
        None => None,
    };
    let sidecar = Sidecar { fps: clip.fps(), audio_path };
    let p = dir.join(SIDECAR_NAME);
    fs::write(&p, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_clip(frames: usize, c: usize, h: usize, w: usize, fps: f64) -> VideoClip {
        let n = frames * c * h * w;
        let data: Vec<f32> = (0..n).map(|i| (i % 251) as f32 / 250.0).collect();
        VideoClip::new(Tensor::from_vec(data, (frames, c, h, w), &Device::Cpu).unwrap(), fps, None).unwrap()
    }

    #[test]
    fn two_seconds_at_25fps_loads_fifty_frames() {
        let dir = tempfile::tempdir().unwrap();
        let clip = ramp_clip(50, 3, 64, 64, 25.0);
        save_video(&clip, dir.path()).unwrap();
        let back = load_video(dir.path()).unwrap();
        assert_eq!(back.num_frames(), 50);
        assert_eq!(back.fps(), 25.0);
        assert_eq!(back.channels(), 3);
    }

    #[test]
    fn grayscale_round_trips_as_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        save_video(&ramp_clip(3, 1, 8, 8, 30.0), dir.path()).unwrap();
        let back = load_video(dir.path()).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back.fps(), 30.0);
    }

    #[test]
    fn corrupt_media_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let gif = dir.path().join("broken.gif");
        fs::write(&gif, b"definitely not a gif").unwrap();
        assert!(matches!(load_video(&gif), Err(Error::UnreadableMedia { .. })));

        fs::write(dir.path().join(SIDECAR_NAME), r#"{"fps": 25.0}"#).unwrap();
        fs::write(frame_path(dir.path(), 0), b"garbage").unwrap();
        assert!(matches!(load_video(dir.path()), Err(Error::UnreadableMedia { .. })));
    }

    #[test]
    fn zero_frames_is_empty_video() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(SIDECAR_NAME), r#"{"fps": 25.0}"#).unwrap();
        assert!(matches!(load_video(dir.path()), Err(Error::EmptyVideo(_))));
    }

    #[test]
    fn audio_round_trips_through_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let audio = AudioTrack::new((0..16000).map(|i| (i as f32 * 0.01).sin() * 0.5).collect(), 16000).unwrap();
        let clip = ramp_clip(25, 3, 8, 8, 25.0).with_audio(Some(audio.clone())).unwrap();
        save_video(&clip, dir.path()).unwrap();
        let back = load_video(dir.path()).unwrap();
        let a = back.audio().unwrap();
        assert_eq!(a.len(), audio.len());
        assert!(a.samples().iter().zip(audio.samples()).all(|(x, y)| (x - y).abs() < 1e-4));
    }

    #[test]
    fn rejects_nan_and_out_of_range_pixels() {
        let t = Tensor::from_vec(vec![0.5f32, f32::NAN, 0.1, 0.2], (1, 1, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(VideoClip::new(t, 25.0, None), Err(Error::NonFinite(_))));
        let t = Tensor::from_vec(vec![0.5f32, 1.5, 0.1, 0.2], (1, 1, 2, 2), &Device::Cpu).unwrap();
        assert!(VideoClip::new(t, 25.0, None).is_err());
    }

    #[test]
    fn mismatched_audio_duration_rejected() {
        let audio = AudioTrack::silence(3.0, 16000).unwrap();
        assert!(ramp_clip(25, 1, 4, 4, 25.0).with_audio(Some(audio)).is_err());
    }

    #[test]
    fn resample_halves_length_exactly() {
        let track = AudioTrack::new((0..32000).map(|i| (i as f32 * 0.001).sin()).collect(), 32000).unwrap();
        let out = resample_audio(&track, 16000.0).unwrap();
        assert_eq!(out.len(), 16000);
        assert_eq!(out.sample_rate(), 16000);
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let track = AudioTrack::new(vec![0.1, -0.2, 0.3], 16000).unwrap();
        assert_eq!(resample_audio(&track, 16000.0).unwrap(), track);
    }

    #[test]
    fn resample_silence_stays_silent() {
        for rate in [8000u32, 22050, 44100, 48000] {
            let track = AudioTrack::silence(0.5, rate).unwrap();
            let out = resample_audio(&track, 16000.0).unwrap();
            assert!(out.samples().iter().all(|&s| s == 0.0));
            assert!((out.duration() - 0.5).abs() <= 1.0 / 16000.0);
        }
    }

    #[test]
    fn resample_preserves_low_frequency_tone() {
        let f = 440.0f32;
        let track =
            AudioTrack::new((0..48000).map(|i| (2.0 * std::f32::consts::PI * f * i as f32 / 48000.0).sin()).collect(), 48000)
                .unwrap();
        let out = resample_audio(&track, 16000.0).unwrap();
        for i in 200..out.len() - 200 {
            let expected = (2.0 * std::f32::consts::PI * f * i as f32 / 16000.0).sin();
            assert!((out.samples()[i] - expected).abs() < 1e-2, "sample {i}");
        }
    }

    #[test]
    fn resample_rejects_nonpositive_rate() {
        let track = AudioTrack::new(vec![0.0; 10], 16000).unwrap();
        assert!(matches!(resample_audio(&track, 0.0), Err(Error::InvalidRate(_))));
        assert!(matches!(resample_audio(&track, -5.0), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn box_helpers() {
        let b = BoundingBox::new(40.0, 70.0, 60.0, 80.0).unwrap();
        assert_eq!(b.expand(0.5), BoundingBox::new(30.0, 65.0, 70.0, 85.0).unwrap());
        assert_eq!(b.clamp(50, 75), BoundingBox::new(40.0, 70.0, 50.0, 75.0).unwrap());
        let far = BoundingBox::new(100.0, 0.0, 110.0, 10.0).unwrap();
        assert_eq!(b.bounding_union(&far), BoundingBox::new(40.0, 0.0, 110.0, 80.0).unwrap());
        assert!(BoundingBox::new(2.0, 0.0, 1.0, 1.0).is_err());
    }
}
