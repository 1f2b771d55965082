//! Frame and distribution metrics: PSNR, SSIM, and the Fréchet distance
//! between Gaussian fits of embeddings (FID over frame embeddings, FVD over
//! clip embeddings). Embedders and perceptual or sync scorers are pluggable;
//! external models attach through the command adapters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize, Serializer};

use crate::curation::list_sources;
use crate::error::{Error, Result};
use crate::media::{load_video, VideoClip};
use crate::registry::{Options, OptionsExt, Registry, StrategySpec};

fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`; infinite when the inputs are identical.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let (va, vb) = (values(a)?, values(b)?);
    if va.is_empty() {
        return Err(Error::shape("empty tensors"));
    }
    let mse = va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / va.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

/// Mean local SSIM over every fully contained `window x window` square of
/// every plane (the last two dimensions are spatial). Local statistics are
/// uniform-window means, population variances and covariance.
pub fn ssim(a: &Tensor, b: &Tensor, params: &SsimParams) -> Result<f64> {
    same_shape(a, b)?;
    let dims = a.dims();
    if dims.len() < 2 {
        return Err(Error::shape(format!("ssim needs at least 2 dimensions, got {dims:?}")));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let k = params.window;
    if k == 0 || h < k || w < k {
        return Err(Error::shape(format!("{h}x{w} planes are smaller than the {k}x{k} window")));
    }
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let (va, vb) = (values(a)?, values(b)?);
    let n = (k * k) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for (pa, pb) in va.chunks_exact(h * w).zip(vb.chunks_exact(h * w)) {
        // summed-area tables of x, y, x^2, y^2, xy
        let table = |f: &dyn Fn(usize) -> f64| {
            let mut t = vec![0.0; (h + 1) * (w + 1)];
            for y in 0..h {
                let mut row = 0.0;
                for x in 0..w {
                    row += f(y * w + x);
                    t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
                }
            }
            t
        };
        let sums = [
            table(&|i| pa[i]),
            table(&|i| pb[i]),
            table(&|i| pa[i] * pa[i]),
            table(&|i| pb[i] * pb[i]),
            table(&|i| pa[i] * pb[i]),
        ];
        let window_sum = |t: &[f64], y: usize, x: usize| {
            t[(y + k) * (w + 1) + x + k] - t[y * (w + 1) + x + k] - t[(y + k) * (w + 1) + x] + t[y * (w + 1) + x]
        };
        for y in 0..=h - k {
            for x in 0..=w - k {
                let [sa, sb, saa, sbb, sab] = std::array::from_fn(|i| window_sum(&sums[i], y, x) / n);
                let (var_a, var_b, cov) = (saa - sa * sa, sbb - sb * sb, sab - sa * sb);
                total += ((2.0 * sa * sb + c1) * (2.0 * cov + c2)) / ((sa * sa + sb * sb + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean and covariance of an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance; a single sample has zero covariance.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidArgument("no embeddings".into()));
        };
        let d = first.len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::shape("embeddings of different lengths"));
        }
        let n = samples.len();
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = if n > 1 { centered.transpose() * &centered / (n - 1) as f64 } else { DMatrix::zeros(d, d) };
        Ok(Self { mean, cov })
    }
}

const PSD_TOLERANCE: f64 = 1e-10;

/// Symmetric square root by eigendecomposition, clamping eigenvalues within
/// tolerance of zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::NonPsdCovariance { min_eigenvalue: min });
    }
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * roots * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The cross term uses `tr((S_a S_b)^(1/2)) = tr((A S_b A)^(1/2))` with
/// `A = S_a^(1/2)`, which keeps every square root symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.cov.shape() != b.cov.shape() || a.cov.nrows() != a.mean.len() {
        return Err(Error::shape(format!("stats of dimension {} vs {}", a.mean.len(), b.mean.len())));
    }
    let root_a = psd_sqrt(&a.cov)?;
    psd_sqrt(&b.cov)?;
    if a == b {
        return Ok(0.0);
    }
    let cross = psd_sqrt(&(&root_a * &b.cov * &root_a))?.trace();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Maps each frame of a clip to a vector.
pub trait FrameEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed_frames(&self, clip: &VideoClip, source: &Path) -> Result<Vec<Vec<f64>>>;
}

/// Maps a whole clip to one vector.
pub trait VideoEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed_video(&self, clip: &VideoClip, source: &Path) -> Result<Vec<f64>>;
}

fn channel_moments(frame: &Tensor) -> Result<Vec<(f64, f64)>> {
    let (c, _, _) = frame.dims3()?;
    (0..c)
        .map(|k| {
            let v = values(&frame.get(k)?)?;
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            Ok((m, var.sqrt()))
        })
        .collect()
}

/// Global mean intensity of each frame (one dimension).
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanPixelEmbedder;

impl FrameEmbedder for MeanPixelEmbedder {
    fn name(&self) -> &str {
        "mean-pixel"
    }

    fn embed_frames(&self, clip: &VideoClip, _source: &Path) -> Result<Vec<Vec<f64>>> {
        (0..clip.num_frames())
            .map(|f| {
                let v = values(&clip.frame(f)?)?;
                Ok(vec![v.iter().sum::<f64>() / v.len() as f64])
            })
            .collect()
    }
}

/// Per-channel mean and standard deviation of each frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChannelStatsEmbedder;

impl FrameEmbedder for ChannelStatsEmbedder {
    fn name(&self) -> &str {
        "channel-stats"
    }

    fn embed_frames(&self, clip: &VideoClip, _source: &Path) -> Result<Vec<Vec<f64>>> {
        (0..clip.num_frames())
            .map(|f| Ok(channel_moments(&clip.frame(f)?)?.into_iter().flat_map(|(m, s)| [m, s]).collect()))
            .collect()
    }
}

/// Per-channel mean intensity and mean absolute frame-to-frame change.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemporalStatsEmbedder;

impl VideoEmbedder for TemporalStatsEmbedder {
    fn name(&self) -> &str {
        "temporal-stats"
    }

    fn embed_video(&self, clip: &VideoClip, _source: &Path) -> Result<Vec<f64>> {
        let frames = clip.frames().to_dtype(DType::F64)?;
        let mean = frames.mean((0, 2, 3))?.to_vec1::<f64>()?;
        let motion = if clip.num_frames() > 1 {
            let f = clip.num_frames();
            (frames.narrow(0, 1, f - 1)? - frames.narrow(0, 0, f - 1)?)?.abs()?.mean((0, 2, 3))?.to_vec1::<f64>()?
        } else {
            vec![0.0; mean.len()]
        };
        Ok(mean.into_iter().chain(motion).collect())
    }
}

/// Runs `program args... <path>` and parses its standard output as JSON.
#[derive(Debug, Clone)]
pub struct CommandAdapter {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandAdapter {
    fn from_options(opts: &Options) -> Result<Self> {
        let program = opts
            .str_opt("program")?
            .ok_or_else(|| Error::InvalidArgument("command adapter needs a `program` option".into()))?
            .to_string();
        let args = match opts.get("args") {
            None => Vec::new(),
            Some(v) => serde_json::from_value(v.clone())?,
        };
        Ok(Self { program, args })
    }

    fn run<T: serde::de::DeserializeOwned>(&self, paths: &[&Path]) -> Result<T> {
        let fail = |reason: String| Error::Adapter { adapter: self.program.clone(), reason };
        let out = Command::new(&self.program)
            .args(&self.args)
            .args(paths)
            .output()
            .map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("{}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| fail(format!("unparseable output: {e}")))
    }
}

impl FrameEmbedder for CommandAdapter {
    fn name(&self) -> &str {
        "command"
    }

    fn embed_frames(&self, clip: &VideoClip, source: &Path) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<Vec<f64>> = self.run(&[source])?;
        if rows.len() != clip.num_frames() {
            return Err(Error::Adapter {
                adapter: self.program.clone(),
                reason: format!("{} embeddings for {} frames", rows.len(), clip.num_frames()),
            });
        }
        Ok(rows)
    }
}

impl VideoEmbedder for CommandAdapter {
    fn name(&self) -> &str {
        "command"
    }

    fn embed_video(&self, _clip: &VideoClip, source: &Path) -> Result<Vec<f64>> {
        self.run(&[source])
    }
}

/// A scalar score for a (generated, reference) pair, e.g. LPIPS or a
/// lip-sync confidence.
pub trait PairScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, generated: &Path, reference: &Path) -> Result<f64>;
}

impl PairScorer for CommandAdapter {
    fn name(&self) -> &str {
        "command"
    }

    fn score(&self, generated: &Path, reference: &Path) -> Result<f64> {
        self.run(&[generated, reference])
    }
}

pub fn builtin_frame_embedders() -> Registry<dyn FrameEmbedder> {
    let mut reg: Registry<dyn FrameEmbedder> = Registry::new("frame embedder");
    reg.register("mean-pixel", |_| Ok(Box::new(MeanPixelEmbedder)));
    reg.register("channel-stats", |_| Ok(Box::new(ChannelStatsEmbedder)));
    reg.register("command", |o: &Options| Ok(Box::new(CommandAdapter::from_options(o)?)));
    reg
}

pub fn builtin_video_embedders() -> Registry<dyn VideoEmbedder> {
    let mut reg: Registry<dyn VideoEmbedder> = Registry::new("video embedder");
    reg.register("temporal-stats", |_| Ok(Box::new(TemporalStatsEmbedder)));
    reg.register("command", |o: &Options| Ok(Box::new(CommandAdapter::from_options(o)?)));
    reg
}

pub fn builtin_pair_scorers() -> Registry<dyn PairScorer> {
    let mut reg: Registry<dyn PairScorer> = Registry::new("pair scorer");
    reg.register("command", |o: &Options| Ok(Box::new(CommandAdapter::from_options(o)?)));
    reg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub frame_embedder: StrategySpec,
    pub video_embedder: StrategySpec,
    pub ssim: SsimParams,
    pub lpips: Option<StrategySpec>,
    pub sync: Option<StrategySpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frame_embedder: StrategySpec::named("channel-stats"),
            video_embedder: StrategySpec::named("temporal-stats"),
            ssim: SsimParams::default(),
            lpips: None,
            sync: None,
        }
    }
}

/// Infinite values serialize as the string `"inf"`.
fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

fn opt_finite_or_inf<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => finite_or_inf(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMetrics {
    pub name: String,
    pub ssim: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr: f64,
    pub lpips: Option<f64>,
    #[serde(serialize_with = "opt_finite_or_inf")]
    pub sync_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub ssim: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr: f64,
    pub fid: f64,
    pub fvd: f64,
    pub lpips: Option<f64>,
    pub sync_c: Option<f64>,
    pub config: EvalConfig,
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// One row per pair plus a final `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("name,ssim,psnr,lpips,sync_c\n");
        for p in &self.pairs {
            text += &format!("{},{},{},{},{}\n", p.name, p.ssim, p.psnr, opt(p.lpips), opt(p.sync_c));
        }
        text += &format!("mean,{},{},{},{}\n", self.ssim, self.psnr, opt(self.lpips), opt(self.sync_c));
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn named_sources(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_sources(dir)?
        .into_iter()
        .map(|p| (p.file_name().unwrap_or_default().to_string_lossy().into_owned(), p))
        .collect())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Compares every generated clip with the same-named reference clip.
pub fn evaluate_pairs(generated_dir: &Path, reference_dir: &Path, config: &EvalConfig) -> Result<MetricReport> {
    let frame_embedder = builtin_frame_embedders().resolve(&config.frame_embedder)?;
    let video_embedder = builtin_video_embedders().resolve(&config.video_embedder)?;
    let lpips = config.lpips.as_ref().map(|s| builtin_pair_scorers().resolve(s)).transpose()?;
    let sync = config.sync.as_ref().map(|s| builtin_pair_scorers().resolve(s)).transpose()?;
    let (gen, refs) = (named_sources(generated_dir)?, named_sources(reference_dir)?);
    if let Some(name) = gen.keys().find(|k| !refs.contains_key(*k)).or_else(|| refs.keys().find(|k| !gen.contains_key(*k))) {
        return Err(Error::MissingPair(name.clone()));
    }
    if gen.is_empty() {
        return Err(Error::InvalidArgument(format!("no clips under {}", generated_dir.display())));
    }
    let (mut pairs, mut gen_frames, mut ref_frames, mut gen_videos, mut ref_videos) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (name, gp) in &gen {
        let rp = &refs[name];
        let (g, r) = (load_video(gp)?, load_video(rp)?);
        same_shape(g.frames(), r.frames())?;
        let ssim_mean = mean(
            (0..g.num_frames())
                .map(|f| ssim(&g.frame(f)?, &r.frame(f)?, &config.ssim))
                .collect::<Result<Vec<_>>>()?
                .into_iter(),
        );
        pairs.push(PairMetrics {
            name: name.clone(),
            ssim: ssim_mean,
            psnr: psnr(g.frames(), r.frames(), 1.0)?,
            lpips: lpips.as_ref().map(|s| s.score(gp, rp)).transpose()?,
            sync_c: sync.as_ref().map(|s| s.score(gp, rp)).transpose()?,
        });
        gen_frames.extend(frame_embedder.embed_frames(&g, gp)?);
        ref_frames.extend(frame_embedder.embed_frames(&r, rp)?);
        gen_videos.push(video_embedder.embed_video(&g, gp)?);
        ref_videos.push(video_embedder.embed_video(&r, rp)?);
    }
    let fid = frechet_distance(&GaussianStats::from_samples(&gen_frames)?, &GaussianStats::from_samples(&ref_frames)?)?;
    let fvd = frechet_distance(&GaussianStats::from_samples(&gen_videos)?, &GaussianStats::from_samples(&ref_videos)?)?;
    let optional_mean = |f: fn(&PairMetrics) -> Option<f64>| {
        let v: Vec<f64> = pairs.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| mean(v.into_iter()))
    };
    Ok(MetricReport {
        ssim: mean(pairs.iter().map(|p| p.ssim)),
        psnr: mean(pairs.iter().map(|p| p.psnr)),
        fid,
        fvd,
        lpips: optional_mean(|p| p.lpips),
        sync_c: optional_mean(|p| p.sync_c),
        pairs,
        config: config.clone(),
    })
}
