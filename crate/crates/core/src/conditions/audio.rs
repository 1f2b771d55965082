use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::AudioFeatureWindowed;
use crate::error::{Error, Result};
use crate::media::AudioTrack;
use crate::registry::{Options, OptionsExt, Registry};

/// Turns a waveform into one embedding row per video frame.
pub trait SpeechFeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    /// Sample rate the extractor expects its input at.
    fn sample_rate(&self) -> u32;
    fn dim(&self) -> usize;
    /// `[round(duration * fps), dim]`.
    fn extract(&self, samples: &[f32], fps: f64) -> Result<Tensor>;
}

pub fn builtin_speech_extractors() -> Registry<dyn SpeechFeatureExtractor> {
    let mut reg: Registry<dyn SpeechFeatureExtractor> = Registry::new("speech feature extractor");
    reg.register("mel-projection", |opts: &Options| {
        Ok(Box::new(MelProjectionExtractor::new(
            opts.u64_or("sample_rate", 16_000)? as u32,
            opts.usize_or("n_mels", 40)?,
            opts.usize_or("dim", 64)?,
            opts.u64_or("seed", 0)?,
        )?))
    });
    reg.register("precomputed", |opts: &Options| {
        let path = opts
            .str_opt("path")?
            .ok_or_else(|| Error::InvalidArgument("precomputed features need a `path` option".into()))?;
        Ok(Box::new(PrecomputedFeatures::load(Path::new(path), opts.u64_or("sample_rate", 16_000)? as u32)?))
    });
    reg
}

pub fn num_audio_steps(duration: f64, fps: f64) -> usize {
    (duration * fps).round() as usize
}

/// Runs `extractor` on `track`, checking the rate and the row contract.
pub fn extract_audio_features(track: &AudioTrack, fps: f64, extractor: &dyn SpeechFeatureExtractor) -> Result<Tensor> {
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(Error::InvalidRate(fps));
    }
    if track.sample_rate() != extractor.sample_rate() {
        return Err(Error::RateMismatch { expected: extractor.sample_rate(), actual: track.sample_rate() });
    }
    let feats = extractor.extract(track.samples(), fps)?;
    let expected = (num_audio_steps(track.duration(), fps), extractor.dim());
    if feats.dims2()? != expected {
        return Err(Error::shape(format!(
            "extractor `{}` returned {:?}, expected {expected:?}",
            extractor.name(),
            feats.dims()
        )));
    }
    crate::media::ensure_finite(&feats, "audio features")?;
    Ok(feats)
}

/// Row `t` of the output holds `x_{t-k} .. x_{t+k}`, with zero rows where
/// the index falls outside the sequence.
pub fn window_audio(features: &Tensor, k: usize) -> Result<AudioFeatureWindowed> {
    let (t, _) = features.dims2()?;
    let padded = features.pad_with_zeros(0, k, k)?;
    let shifted: Vec<Tensor> = (0..=2 * k).map(|j| padded.narrow(0, j, t)).collect::<candle_core::Result<_>>()?;
    Ok(AudioFeatureWindowed { per_frame: Tensor::stack(&shifted, 1)?, k })
}

/// Log-mel energies around each frame centre, mapped to `dim` by a fixed
/// random projection.
pub struct MelProjectionExtractor {
    sample_rate: u32,
    n_mels: usize,
    projection: Vec<f32>,
    dim: usize,
    fft_cache: std::sync::Mutex<Option<(usize, Arc<dyn Fft<f32>>)>>,
}

impl MelProjectionExtractor {
    pub fn new(sample_rate: u32, n_mels: usize, dim: usize, seed: u64) -> Result<Self> {
        if sample_rate == 0 || n_mels == 0 || dim == 0 {
            return Err(Error::InvalidArgument("sample_rate, n_mels and dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n_mels as f32).sqrt();
        let projection = (0..n_mels * dim).map(|_| StandardNormal.sample(&mut rng)).map(|x: f32| x * scale).collect();
        Ok(Self { sample_rate, n_mels, projection, dim, fft_cache: Default::default() })
    }

    fn n_mels(&self) -> usize {
        self.n_mels
    }

    fn fft_for(&self, n: usize) -> Arc<dyn Fft<f32>> {
        let mut cache = self.fft_cache.lock().unwrap_or_else(|e| e.into_inner());
        match &*cache {
            Some((len, fft)) if *len == n => fft.clone(),
            _ => {
                let fft = FftPlanner::new().plan_fft_forward(n);
                *cache = Some((n, fft.clone()));
                fft
            }
        }
    }

    /// Triangular filters evenly spaced on the mel scale over `[0, rate/2]`.
    fn mel_filters(&self, n_fft: usize) -> Vec<Vec<f32>> {
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let bins = n_fft / 2 + 1;
        let top = mel(self.sample_rate as f64 / 2.0);
        let edges: Vec<f64> = (0..self.n_mels() + 2).map(|i| hz(top * i as f64 / (self.n_mels() + 1) as f64)).collect();
        (0..self.n_mels())
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|b| {
                        let f = b as f64 * self.sample_rate as f64 / n_fft as f64;
                        let w = if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        };
                        w as f32
                    })
                    .collect()
            })
            .collect()
    }
}

impl SpeechFeatureExtractor for MelProjectionExtractor {
    fn name(&self) -> &str {
        "mel-projection"
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, samples: &[f32], fps: f64) -> Result<Tensor> {
        if !(fps > 0.0) {
            return Err(Error::InvalidRate(fps));
        }
        let rate = self.sample_rate as f64;
        let steps = num_audio_steps(samples.len() as f64 / rate, fps);
        let n_fft = ((rate / fps).ceil() as usize).next_power_of_two().max(64);
        let fft = self.fft_for(n_fft);
        let filters = self.mel_filters(n_fft);
        let hann: Vec<f32> =
            (0..n_fft).map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos()) as f32).collect();
        let n_mels = self.n_mels();
        let mut out: Vec<f32> = Vec::with_capacity(steps * self.dim);
        let mut buf = vec![Complex::new(0f32, 0.0); n_fft];
        for t in 0..steps {
            let centre = ((t as f64 + 0.5) / fps * rate).round() as i64;
            let start = centre - (n_fft / 2) as i64;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = start + i as i64;
                let x = if idx >= 0 && (idx as usize) < samples.len() { samples[idx as usize] } else { 0.0 };
                *slot = Complex::new(x * hann[i], 0.0);
            }
            fft.process(&mut buf);
            let power: Vec<f32> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
            let logmel: Vec<f32> = filters
                .iter()
                .map(|f| {
                    let e: f32 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
                    (e.max(1e-10).log10() + 4.0) / 4.0
                })
                .collect();
            for d in 0..self.dim {
                out.push((0..n_mels).map(|m| logmel[m] * self.projection[m * self.dim + d]).sum());
            }
        }
        Ok(Tensor::from_vec(out, (steps, self.dim), &Device::Cpu)?)
    }
}

/// Features computed offline and stored as a `features` tensor `[T, D]`.
pub struct PrecomputedFeatures {
    features: Tensor,
    sample_rate: u32,
}

impl PrecomputedFeatures {
    pub fn new(features: Tensor, sample_rate: u32) -> Result<Self> {
        features.dims2()?;
        Ok(Self { features: features.to_dtype(DType::F32)?, sample_rate })
    }

    pub fn load(path: &Path, sample_rate: u32) -> Result<Self> {
        let (tensors, _) = crate::training::checkpoint::read_safetensors(path)?;
        let features = tensors
            .get("features")
            .ok_or_else(|| Error::UnreadableMedia { path: path.to_path_buf(), reason: "no `features` tensor".into() })?;
        Self::new(features.clone(), sample_rate)
    }
}

impl SpeechFeatureExtractor for PrecomputedFeatures {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn dim(&self) -> usize {
        self.features.dims()[1]
    }

    fn extract(&self, samples: &[f32], fps: f64) -> Result<Tensor> {
        let steps = num_audio_steps(samples.len() as f64 / self.sample_rate as f64, fps);
        let have = self.features.dims()[0];
        if have < steps {
            return Err(Error::shape(format!("{have} precomputed rows for {steps} frames")));
        }
        Ok(self.features.narrow(0, 0, steps)?)
    }
}
