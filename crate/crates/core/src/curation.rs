//! Dataset curation: face detection, resolution gate, quality filter,
//! jitter segmentation, length gate and audio alignment, applied in that
//! order to every source video. Detectors and scorers are pluggable; the
//! bundled ones are deterministic image-statistics stand-ins.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::fill_missing;
use crate::media::{load_video, BoundingBox, LandmarkSequence, VideoClip, AUDIO_NAME, SIDECAR_NAME};
use crate::registry::{Options, OptionsExt, Registry, StrategySpec};
use crate::synth::{write_clip, LANDMARKS_NAME};
use crate::training::dataset::{write_manifest, DatasetRecord};

pub const FILTERS: [&str; 6] = ["detection", "resolution", "quality", "jitter", "length", "alignment"];

/// Luminance `[H, W]` of a `[C, H, W]` frame as a row-major vector.
fn luminance(frame: &Tensor) -> Result<(Vec<f32>, usize, usize)> {
    let (_, h, w) = frame.dims3()?;
    let l = frame.to_dtype(DType::F32)?.mean(0)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((l, h, w))
}

pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;
    /// The largest face in a `[C, H, W]` frame, if any.
    fn detect(&self, frame: &Tensor) -> Result<Option<BoundingBox>>;
}

/// Largest 4-connected region whose luminance differs from the median border
/// luminance by more than `threshold`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastBlobDetector {
    pub threshold: f32,
    pub min_area: usize,
}

impl Default for ContrastBlobDetector {
    fn default() -> Self {
        Self { threshold: 0.2, min_area: 16 }
    }
}

impl FaceDetector for ContrastBlobDetector {
    fn name(&self) -> &str {
        "contrast-blob"
    }

    fn detect(&self, frame: &Tensor) -> Result<Option<BoundingBox>> {
        let (l, h, w) = luminance(frame)?;
        let mut border: Vec<f32> = (0..w).flat_map(|x| [l[x], l[(h - 1) * w + x]]).collect();
        border.extend((0..h).flat_map(|y| [l[y * w], l[y * w + w - 1]]));
        border.sort_by(f32::total_cmp);
        let bg = border[border.len() / 2];
        let fg: Vec<bool> = l.iter().map(|v| (v - bg).abs() > self.threshold).collect();
        let mut seen = vec![false; h * w];
        // (area, -y0, -x0) ordering: largest area, then top-most, then left-most
        let mut best: Option<(usize, [usize; 4])> = None;
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if !fg[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let (mut area, mut b) = (0usize, [usize::MAX, usize::MAX, 0, 0]);
            while let Some(i) = queue.pop_front() {
                let (y, x) = (i / w, i % w);
                area += 1;
                b = [b[0].min(x), b[1].min(y), b[2].max(x + 1), b[3].max(y + 1)];
                let mut visit = |j: usize| {
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            let better = match best {
                None => true,
                Some((a, bb)) => area > a || (area == a && (b[1], b[0]) < (bb[1], bb[0])),
            };
            if area >= self.min_area && better {
                best = Some((area, b));
            }
        }
        Ok(best.map(|(_, b)| BoundingBox { x0: b[0] as f64, y0: b[1] as f64, x1: b[2] as f64, y1: b[3] as f64 }))
    }
}

pub fn builtin_face_detectors() -> Registry<dyn FaceDetector> {
    let mut reg: Registry<dyn FaceDetector> = Registry::new("face detector");
    reg.register("contrast-blob", |opts: &Options| {
        let d = ContrastBlobDetector::default();
        Ok(Box::new(ContrastBlobDetector {
            threshold: opts.f64_or("threshold", d.threshold as f64)? as f32,
            min_area: opts.usize_or("min_area", d.min_area)?,
        }))
    });
    reg
}

pub fn detect_faces(clip: &VideoClip, detector: &dyn FaceDetector) -> Result<Vec<Option<BoundingBox>>> {
    (0..clip.num_frames()).map(|f| detector.detect(&clip.frame(f)?)).collect()
}

pub trait QualityScorer: Send + Sync {
    fn name(&self) -> &str;
    /// Higher is better; the scale is scorer-specific.
    fn score(&self, clip: &VideoClip, faces: &[BoundingBox]) -> Result<f64>;
}

/// Mean over frames of the variance of the 4-neighbour Laplacian inside the
/// face box, a sharpness proxy in `[0, inf)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LaplacianSharpness;

impl QualityScorer for LaplacianSharpness {
    fn name(&self) -> &str {
        "laplacian-variance"
    }

    fn score(&self, clip: &VideoClip, faces: &[BoundingBox]) -> Result<f64> {
        let mut total = 0.0;
        for (f, face) in faces.iter().enumerate() {
            let (l, h, w) = luminance(&clip.frame(f)?)?;
            let (c0, r0, c1, r1) = face.clamp(w, h).pixel_bounds();
            let (c0, r0, c1, r1) = (c0.max(1), r0.max(1), c1.min(w - 1), r1.min(h - 1));
            let mut vals = Vec::new();
            for y in r0..r1 {
                for x in c0..c1 {
                    let i = y * w + x;
                    vals.push((l[i - 1] + l[i + 1] + l[i - w] + l[i + w] - 4.0 * l[i]) as f64);
                }
            }
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            }
        }
        Ok(total / faces.len().max(1) as f64)
    }
}

pub fn builtin_quality_scorers() -> Registry<dyn QualityScorer> {
    let mut reg: Registry<dyn QualityScorer> = Registry::new("quality scorer");
    reg.register("laplacian-variance", |_| Ok(Box::new(LaplacianSharpness)));
    reg
}

pub trait AlignmentChecker: Send + Sync {
    fn name(&self) -> &str;
    /// Whether the audio plausibly belongs to the lip motion of `clip`.
    fn aligned(&self, clip: &VideoClip, faces: &[BoundingBox]) -> Result<bool>;
}

fn frame_rms(clip: &VideoClip) -> Option<Vec<f64>> {
    let audio = clip.audio()?;
    let n = clip.num_frames();
    Some(
        (0..n)
            .map(|f| {
                let seg = audio.slice_seconds(f as f64 / clip.fps(), (f + 1) as f64 / clip.fps());
                let s = seg.samples();
                if s.is_empty() {
                    0.0
                } else {
                    (s.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
                }
            })
            .collect(),
    )
}

/// Fails clips without audio or whose audio is silent throughout.
#[derive(Debug, Clone, Copy)]
pub struct AudioActivity {
    pub min_rms: f64,
}

impl AlignmentChecker for AudioActivity {
    fn name(&self) -> &str {
        "audio-activity"
    }

    fn aligned(&self, clip: &VideoClip, _faces: &[BoundingBox]) -> Result<bool> {
        Ok(frame_rms(clip).is_some_and(|r| r.iter().cloned().fold(0.0, f64::max) >= self.min_rms))
    }
}

/// Correlates the per-frame audio loudness with the darkness of the lower
/// face (a mouth-opening proxy); aligned iff the correlation reaches `min_corr`.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeCorrelation {
    pub min_corr: f64,
}

impl AlignmentChecker for EnvelopeCorrelation {
    fn name(&self) -> &str {
        "envelope-correlation"
    }

    fn aligned(&self, clip: &VideoClip, faces: &[BoundingBox]) -> Result<bool> {
        let Some(rms) = frame_rms(clip) else { return Ok(false) };
        let mut dark = Vec::with_capacity(faces.len());
        for (f, face) in faces.iter().enumerate() {
            let (l, h, w) = luminance(&clip.frame(f)?)?;
            let mouth = BoundingBox {
                x0: face.x0 + 0.25 * face.width(),
                x1: face.x1 - 0.25 * face.width(),
                y0: face.y0 + 0.6 * face.height(),
                y1: face.y0 + 0.9 * face.height(),
            };
            let (c0, r0, c1, r1) = mouth.clamp(w, h).pixel_bounds();
            let n = ((c1 - c0) * (r1 - r0)).max(1) as f64;
            let sum: f64 = (r0..r1).flat_map(|y| (c0..c1).map(move |x| (y, x))).map(|(y, x)| l[y * w + x] as f64).sum();
            dark.push(-sum / n);
        }
        Ok(pearson(&rms, &dark).is_some_and(|c| c >= self.min_corr))
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

pub fn builtin_alignment_checkers() -> Registry<dyn AlignmentChecker> {
    let mut reg: Registry<dyn AlignmentChecker> = Registry::new("alignment checker");
    reg.register("audio-activity", |opts: &Options| Ok(Box::new(AudioActivity { min_rms: opts.f64_or("min_rms", 1e-3)? })));
    reg.register("envelope-correlation", |opts: &Options| {
        Ok(Box::new(EnvelopeCorrelation { min_corr: opts.f64_or("min_corr", 0.3)? }))
    });
    reg
}

/// Lip landmarks placed on the lower-middle of each face box.
pub fn face_prior_landmarks(faces: &[BoundingBox]) -> LandmarkSequence {
    const POINTS: usize = 12;
    LandmarkSequence::new(
        faces
            .iter()
            .map(|b| {
                let (cx, cy) = (b.center()[0], b.y0 + 0.72 * b.height());
                let (rx, ry) = (0.24 * b.width(), 0.1 * b.height());
                Some(
                    (0..POINTS)
                        .map(|i| {
                            let a = 2.0 * std::f64::consts::PI * i as f64 / POINTS as f64;
                            [cx + rx * a.cos(), cy + ry * a.sin()]
                        })
                        .collect(),
                )
            })
            .collect(),
    )
}

/// Pass iff some frame's face exceeds `min_side` in both width and height.
pub fn resolution_gate(faces: &[Option<BoundingBox>], min_side: f64) -> Result<bool> {
    let sizes: Vec<_> = faces.iter().flatten().collect();
    if sizes.is_empty() {
        return Err(Error::NoFace);
    }
    Ok(sizes.iter().any(|b| b.width() > min_side && b.height() > min_side))
}

/// Cuts wherever consecutive box centers move by more than `threshold` pixels
/// and returns the maximal uncut ranges.
pub fn jitter_segment(boxes: &[BoundingBox], threshold: f64) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..boxes.len() {
        let (a, b) = (boxes[i - 1].center(), boxes[i].center());
        if (a[0] - b[0]).hypot(a[1] - b[1]) > threshold {
            out.push(start..i);
            start = i;
        }
    }
    if !boxes.is_empty() {
        out.push(start..boxes.len());
    }
    out
}

pub fn length_gate(frames: usize, fps: f64, min_seconds: f64) -> Result<bool> {
    if !(fps > 0.0) {
        return Err(Error::InvalidRate(fps));
    }
    Ok(frames as f64 / fps >= min_seconds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationThresholds {
    /// Both face sides must exceed this in at least one frame.
    pub min_face_side: f64,
    /// Longest tolerated run of frames without a detection.
    pub max_gap: usize,
    pub min_quality: f64,
    /// Cut threshold for box-center motion between frames, as a fraction of the frame diagonal.
    pub displacement_ratio: f64,
    /// The jitter filter fails a clip when more than this fraction of frame pairs are cuts.
    pub max_jitter_ratio: f64,
    pub min_seconds: f64,
}

impl Default for CurationThresholds {
    fn default() -> Self {
        Self {
            min_face_side: 228.0,
            max_gap: 8,
            min_quality: 2e-3,
            displacement_ratio: 0.1,
            max_jitter_ratio: 0.5,
            min_seconds: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub detector: StrategySpec,
    pub quality: StrategySpec,
    pub alignment: StrategySpec,
    pub thresholds: CurationThresholds,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            detector: StrategySpec::named("contrast-blob"),
            quality: StrategySpec::named("laplacian-variance"),
            alignment: StrategySpec::named("audio-activity"),
            thresholds: CurationThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub source: String,
    /// Seconds, half-open.
    pub time_range: [f64; 2],
    pub frame_range: [usize; 2],
    /// Width and height of the face with the largest smaller side.
    pub max_face_size: Option<[f64; 2]>,
    pub quality_score: Option<f64>,
    pub verdicts: BTreeMap<String, Verdict>,
    pub output_path: Option<PathBuf>,
    pub error: Option<String>,
}

impl CurationRecord {
    pub fn passed(&self) -> bool {
        FILTERS.iter().all(|f| self.verdicts.get(*f) == Some(&Verdict::Pass))
    }

    pub fn failed_filter(&self) -> Option<&'static str> {
        FILTERS.iter().copied().find(|f| self.verdicts.get(*f) == Some(&Verdict::Fail))
    }
}

struct Adapters {
    detector: Box<dyn FaceDetector>,
    quality: Box<dyn QualityScorer>,
    alignment: Box<dyn AlignmentChecker>,
}

/// Source videos under `dir`: frame directories (with sidecar) and GIFs, by name.
pub fn list_sources(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_gif = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("gif"));
        if (p.is_dir() && p.join(SIDECAR_NAME).exists()) || is_gif {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn source_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Verdict map with `pass` for the first `passed` filters, then `fail`, then `skip`.
fn verdicts(passed: usize, failed: bool) -> BTreeMap<String, Verdict> {
    FILTERS
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let v = if i < passed {
                Verdict::Pass
            } else if i == passed && failed {
                Verdict::Fail
            } else {
                Verdict::Skip
            };
            (f.to_string(), v)
        })
        .collect()
}

/// Runs every filter on one source and writes surviving sub-clips under
/// `out_dir/clips`. Errors become failing records.
fn curate_source(path: &Path, out_dir: &Path, adapters: &Adapters, th: &CurationThresholds) -> Vec<CurationRecord> {
    let name = source_name(path);
    let failed = |stage: usize, clip: Option<&VideoClip>, err: Option<String>, size, quality| {
        let n = clip.map_or(0, |c| c.num_frames());
        CurationRecord {
            source: name.clone(),
            time_range: [0.0, clip.map_or(0.0, |c| c.duration())],
            frame_range: [0, n],
            max_face_size: size,
            quality_score: quality,
            verdicts: verdicts(stage, true),
            output_path: None,
            error: err,
        }
    };
    let clip = match load_video(path) {
        Ok(c) => c,
        Err(e) => return vec![failed(0, None, Some(e.to_string()), None, None)],
    };
    let raw = match detect_faces(&clip, adapters.detector.as_ref()) {
        Ok(r) => r,
        Err(e) => return vec![failed(0, Some(&clip), Some(e.to_string()), None, None)],
    };
    let faces = match fill_missing(&raw, th.max_gap) {
        Ok(f) => f,
        Err(e) => return vec![failed(0, Some(&clip), Some(e.to_string()), None, None)],
    };
    let sidecar = path.join(LANDMARKS_NAME);
    let landmarks = if sidecar.exists() {
        match LandmarkSequence::load(&sidecar).and_then(|lm| {
            let boxes: Vec<_> = lm.frames.iter().map(|p| p.as_deref().and_then(BoundingBox::enclosing)).collect();
            if lm.len() != clip.num_frames() {
                return Err(Error::shape(format!("{} landmark frames for {} video frames", lm.len(), clip.num_frames())));
            }
            fill_missing(&boxes, th.max_gap).map(|_| lm)
        }) {
            Ok(lm) => lm,
            Err(e) => return vec![failed(0, Some(&clip), Some(e.to_string()), None, None)],
        }
    } else {
        face_prior_landmarks(&faces)
    };
    let size = raw
        .iter()
        .flatten()
        .max_by(|a, b| a.width().min(a.height()).total_cmp(&b.width().min(b.height())))
        .map(|b| [b.width(), b.height()]);
    match resolution_gate(&raw, th.min_face_side) {
        Ok(true) => {}
        Ok(false) => return vec![failed(1, Some(&clip), None, size, None)],
        Err(e) => return vec![failed(0, Some(&clip), Some(e.to_string()), size, None)],
    }
    let quality = match adapters.quality.score(&clip, &faces) {
        Ok(q) => q,
        Err(e) => return vec![failed(2, Some(&clip), Some(e.to_string()), size, None)],
    };
    if !(quality >= th.min_quality) {
        return vec![failed(2, Some(&clip), None, size, Some(quality))];
    }
    let diag = (clip.width() as f64).hypot(clip.height() as f64);
    let ranges = jitter_segment(&faces, th.displacement_ratio * diag);
    let cut_ratio = (ranges.len() - 1) as f64 / (clip.num_frames().max(2) - 1) as f64;
    if cut_ratio > th.max_jitter_ratio {
        return vec![failed(3, Some(&clip), None, size, Some(quality))];
    }
    let mut records = Vec::new();
    for r in ranges {
        let mut rec = CurationRecord {
            source: name.clone(),
            time_range: [r.start as f64 / clip.fps(), r.end as f64 / clip.fps()],
            frame_range: [r.start, r.end],
            max_face_size: size,
            quality_score: Some(quality),
            verdicts: verdicts(4, false),
            output_path: None,
            error: None,
        };
        let outcome = (|| -> Result<(usize, bool)> {
            if !length_gate(r.len(), clip.fps(), th.min_seconds)? {
                return Ok((4, true));
            }
            let sub = clip.slice(r.clone())?;
            if !adapters.alignment.aligned(&sub, &faces[r.clone()])? {
                return Ok((5, true));
            }
            let rel = PathBuf::from("clips").join(format!("{name}_{:05}_{:05}", r.start, r.end));
            write_clip(&out_dir.join(&rel), &sub, &landmarks.slice(r.clone()))?;
            rec.output_path = Some(rel);
            Ok((6, false))
        })();
        match outcome {
            Ok((stage, failed)) => rec.verdicts = verdicts(stage, failed),
            Err(e) => {
                rec.verdicts = verdicts(4, true);
                rec.error = Some(e.to_string());
            }
        }
        records.push(rec);
    }
    records
}

pub fn read_curation_manifest(path: &Path) -> Result<Vec<CurationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Curates every source under `in_dir` into `out_dir`. Records are appended
/// to `manifest` as each source finishes; sources already present in it are
/// skipped, so an interrupted run resumes where it stopped. Writes
/// `out_dir/dataset.jsonl` for the survivors and returns all records.
pub fn run_pipeline(in_dir: &Path, out_dir: &Path, manifest: &Path, config: &CurationConfig) -> Result<Vec<CurationRecord>> {
    let adapters = Adapters {
        detector: builtin_face_detectors().resolve(&config.detector)?,
        quality: builtin_quality_scorers().resolve(&config.quality)?,
        alignment: builtin_alignment_checkers().resolve(&config.alignment)?,
    };
    let mut records = if manifest.exists() { read_curation_manifest(manifest)? } else { Vec::new() };
    let done: BTreeSet<String> = records.iter().map(|r| r.source.clone()).collect();
    if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(manifest).map_err(|e| Error::io(manifest, e))?;
    for src in list_sources(in_dir)? {
        if done.contains(&source_name(&src)) {
            continue;
        }
        let recs = curate_source(&src, out_dir, &adapters, &config.thresholds);
        for r in &recs {
            tracing::info!(source = %r.source, verdicts = ?r.verdicts, "curated");
            writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(manifest, e))?;
        }
        records.extend(recs);
    }
    let dataset: Vec<DatasetRecord> = records
        .iter()
        .filter(|r| r.passed())
        .filter_map(|r| r.output_path.as_ref())
        .map(|p| DatasetRecord {
            frames_dir: p.clone(),
            audio_path: Some(p.join(AUDIO_NAME)),
            landmarks_path: p.join(LANDMARKS_NAME),
            filters_passed: FILTERS.iter().map(|f| f.to_string()).collect(),
        })
        .collect();
    write_manifest(&out_dir.join("dataset.jsonl"), &dataset)?;
    Ok(records)
}
