//! Executes one subcommand and records a manifest that is enough to repeat it.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use lipsync_core::curation::run_pipeline;
use lipsync_core::inference::run_inference;
use lipsync_core::media::{load_video, save_video, AudioTrack, LandmarkSequence};
use lipsync_core::metrics::evaluate_pairs;
use lipsync_core::model::LipSyncModel;
use lipsync_core::synth::{write_curation_corpus, write_dataset, LANDMARKS_NAME};
use lipsync_core::training::Trainer;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{to_canonical_json, RunConfig};

pub const MANIFEST_FORMAT: &str = "lipsync-run/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Infer,
    Curate,
    Evaluate,
    Synth,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Curate => "curate",
            Command::Evaluate => "evaluate",
            Command::Synth => "synth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: Command,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    /// The effective config with every output path resolved.
    pub config: RunConfig,
    pub started_at_unix: f64,
    pub wall_time_s: f64,
    pub artifacts: Vec<Artifact>,
    pub details: Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
}

pub fn version_stamp() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("LIPSYNC_GIT_REV"))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of a directory's sorted (relative path, file hash) list.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return sha256_file(path);
    }
    let mut files = Vec::new();
    walk(path, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update(sha256_file(&f)?.as_bytes());
        hasher.update([b'\n']);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn required<'a>(value: &'a Option<PathBuf>, field: &str) -> Result<&'a PathBuf> {
    value.as_ref().with_context(|| format!("`{field}` is not set; give it in the config file or as a flag"))
}

/// Runs `command` with `config` and writes `<output_root>/<command>.manifest.json`.
pub fn dispatch(command: Command, config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let mut cfg = config.clone();
    cfg.apply_seed();
    resolve_outputs(command, &mut cfg);
    std::fs::create_dir_all(&cfg.output_root).with_context(|| format!("creating {}", cfg.output_root.display()))?;

    let started_at_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let (artifacts, details) = match command {
        Command::Train => train(&cfg)?,
        Command::Infer => infer(&cfg)?,
        Command::Curate => curate(&cfg)?,
        Command::Evaluate => evaluate(&cfg)?,
        Command::Synth => synth(&cfg)?,
    };
    let artifacts = artifacts
        .into_iter()
        .map(|path| Ok(Artifact { sha256: hash_path(&path)?, path }))
        .collect::<Result<Vec<_>>>()?;
    let canonical = to_canonical_json(&cfg);
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        command,
        version: version_stamp(),
        seed: match command {
            Command::Train => Some(cfg.train.training.seed),
            Command::Infer => Some(cfg.infer.inference.seed),
            Command::Synth => Some(cfg.synth.clip.seed),
            Command::Curate | Command::Evaluate => None,
        },
        config_hash: format!("{:x}", Sha256::digest(canonical.as_bytes())),
        config: cfg,
        started_at_unix,
        wall_time_s: clock.elapsed().as_secs_f64(),
        artifacts,
        details,
    };
    let manifest_path = manifest.config.output_root.join(format!("{}.manifest.json", command.name()));
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    tracing::info!(manifest = %manifest_path.display(), "run complete");
    Ok(RunOutcome { manifest_path, manifest })
}

/// Repeats the run recorded in a manifest.
pub fn rerun(manifest: &Path) -> Result<RunOutcome> {
    let m = RunManifest::load(manifest)?;
    if m.format != MANIFEST_FORMAT {
        bail!("unsupported manifest format `{}`", m.format);
    }
    dispatch(m.command, &m.config)
}

fn resolve_outputs(command: Command, cfg: &mut RunConfig) {
    match command {
        Command::Train => cfg.train.checkpoint = Some(cfg.output_path(&cfg.train.checkpoint, "checkpoint.safetensors")),
        Command::Infer => cfg.infer.output = Some(cfg.output_path(&cfg.infer.output, "output")),
        Command::Curate => {
            let out = cfg.output_path(&cfg.curate.output, "curated");
            cfg.curate.manifest.get_or_insert_with(|| out.join("curation.jsonl"));
            cfg.curate.output = Some(out);
        }
        Command::Evaluate => cfg.evaluate.report = Some(cfg.output_path(&cfg.evaluate.report, "report.json")),
        Command::Synth => cfg.synth.output = Some(cfg.output_path(&cfg.synth.output, "synth")),
    }
}

type Produced = (Vec<PathBuf>, Value);

fn train(cfg: &RunConfig) -> Result<Produced> {
    let run = &cfg.train;
    let dataset = required(&run.dataset, "train.dataset")?;
    let checkpoint = required(&run.checkpoint, "train.checkpoint")?;
    let mut trainer = match &run.resume {
        Some(path) => {
            let probe = LipSyncModel::new(run.model.clone(), 0)?;
            let clips = Trainer::prepare_dataset(dataset, &probe, &run.training)?;
            Trainer::resume(path, clips).with_context(|| format!("resuming from {}", path.display()))?
        }
        None => {
            let model = LipSyncModel::new(run.model.clone(), run.training.seed)?;
            let clips = Trainer::prepare_dataset(dataset, &model, &run.training)?;
            Trainer::new(model, run.training.clone(), clips)?
        }
    };
    let first_step = trainer.steps_done();
    let mut losses = Vec::new();
    while trainer.steps_done() < run.training.steps as u64 {
        let s = trainer.step()?;
        tracing::info!(step = s.step, loss = s.loss, grad_norm = s.grad_norm, "train");
        losses.push(s.loss);
        let every = run.training.checkpoint_every as u64;
        if every > 0 && s.step % every == 0 {
            trainer.save(checkpoint)?;
        }
    }
    trainer.save(checkpoint)?;
    let details = json!({
        "first_step": first_step,
        "steps_done": trainer.steps_done(),
        "parameters": trainer.model().num_parameters(),
        "losses": losses,
    });
    Ok((vec![checkpoint.clone()], details))
}

fn infer(cfg: &RunConfig) -> Result<Produced> {
    let run = &cfg.infer;
    let checkpoint = required(&run.checkpoint, "infer.checkpoint")?;
    if !checkpoint.is_file() {
        bail!("checkpoint not found: {}", checkpoint.display());
    }
    let model = LipSyncModel::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let video_path = required(&run.video, "infer.video")?;
    let video = load_video(video_path)?;
    let audio = match &run.audio {
        Some(p) => AudioTrack::read_wav(p)?,
        None => video
            .audio()
            .cloned()
            .with_context(|| format!("{} has no audio track; set `infer.audio`", video_path.display()))?,
    };
    let landmarks = match &run.landmarks {
        Some(p) => Some(LandmarkSequence::load(p)?),
        None if video_path.join(LANDMARKS_NAME).is_file() => Some(LandmarkSequence::load(&video_path.join(LANDMARKS_NAME))?),
        None => None,
    };
    let out = run_inference(&model, &video, &audio, landmarks.as_ref(), &run.inference)?;
    let output = required(&run.output, "infer.output")?;
    if output.exists() {
        std::fs::remove_dir_all(output).with_context(|| format!("clearing {}", output.display()))?;
    }
    save_video(&out.video, output)?;
    let mut frames: Vec<PathBuf> = std::fs::read_dir(output)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    frames.sort();
    let frame_hashes = frames.iter().map(|p| sha256_file(p)).collect::<Result<Vec<_>>>()?;
    let details = json!({
        "frames": out.video.num_frames(),
        "reference_index": out.reference_index,
        "segments": out.segments.iter().map(|r| [r.start, r.end]).collect::<Vec<_>>(),
        "landmarks": if landmarks.is_some() { "provided" } else { "detected" },
        "video_digest": out.video.digest()?,
        "frame_hashes": frame_hashes,
    });
    Ok((vec![output.clone()], details))
}

fn curate(cfg: &RunConfig) -> Result<Produced> {
    let run = &cfg.curate;
    let input = required(&run.input, "curate.input")?;
    let output = required(&run.output, "curate.output")?;
    let manifest = required(&run.manifest, "curate.manifest")?;
    let records = run_pipeline(input, output, manifest, &run.curation)?;
    let mut rejected = serde_json::Map::new();
    for r in &records {
        let key = match (&r.error, r.failed_filter()) {
            (Some(_), _) => "error".to_string(),
            (None, Some(f)) => f.to_string(),
            (None, None) => continue,
        };
        let n = rejected.get(&key).and_then(Value::as_u64).unwrap_or(0);
        rejected.insert(key, json!(n + 1));
    }
    let details = json!({
        "records": records.len(),
        "passed": records.iter().filter(|r| r.passed()).count(),
        "rejected": rejected,
    });
    Ok((vec![output.clone()], details))
}

fn evaluate(cfg: &RunConfig) -> Result<Produced> {
    let run = &cfg.evaluate;
    let generated = required(&run.generated, "evaluate.generated")?;
    let reference = required(&run.reference, "evaluate.reference")?;
    let report_path = required(&run.report, "evaluate.report")?;
    let report = evaluate_pairs(generated, reference, &run.metrics)?;
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let csv = report_path.with_extension("csv");
    report.write_json(report_path)?;
    report.write_csv(&csv)?;
    let details = json!({ "pairs": report.pairs.len(), "fid": report.fid, "fvd": report.fvd, "ssim": report.ssim });
    Ok((vec![report_path.clone(), csv], details))
}

fn synth(cfg: &RunConfig) -> Result<Produced> {
    let run = &cfg.synth;
    let output = required(&run.output, "synth.output")?;
    let details = if run.curation_corpus {
        let expected: serde_json::Map<String, Value> =
            write_curation_corpus(output)?.into_iter().map(|(name, filter)| (name, json!(filter))).collect();
        json!({ "curation_corpus": expected })
    } else {
        let records = write_dataset(output, run.count, &run.clip)?;
        json!({ "clips": records.len(), "dataset": output.join("dataset.jsonl") })
    };
    Ok((vec![output.clone()], details))
}
