//! Run configuration: one JSON document with a block per subcommand.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! `LIPSYNC_OUTPUT_ROOT` (output root only), command-line flags.

use std::path::{Path, PathBuf};

use lipsync_core::curation::CurationConfig;
use lipsync_core::inference::InferenceConfig;
use lipsync_core::metrics::EvalConfig;
use lipsync_core::model::ModelConfig;
use lipsync_core::synth::SynthClipSpec;
use lipsync_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "LIPSYNC_OUTPUT_ROOT";

/// A config that failed to parse or validate, located by its field path.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("SCHEMA_ERROR at `{path}`: {message}")]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl SchemaError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of every block.
    pub seed: Option<u64>,
    pub output_root: PathBuf,
    /// Version of the tool that wrote the config.
    pub version: String,
    pub train: TrainRun,
    pub infer: InferRun,
    pub curate: CurateRun,
    pub evaluate: EvaluateRun,
    pub synth: SynthRun,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_root: PathBuf::from("runs"),
            version: env!("CARGO_PKG_VERSION").to_string(),
            train: TrainRun::default(),
            infer: InferRun::default(),
            curate: CurateRun::default(),
            evaluate: EvaluateRun::default(),
            synth: SynthRun::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    /// JSONL dataset manifest, as written by `curate` or `synth`.
    pub dataset: Option<PathBuf>,
    /// Default: `<output_root>/checkpoint.safetensors`.
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub model: ModelConfig,
    pub training: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferRun {
    pub checkpoint: Option<PathBuf>,
    pub video: Option<PathBuf>,
    /// WAV file; default: the audio track stored with the video.
    pub audio: Option<PathBuf>,
    /// Default: `landmarks.json` next to the video frames, if present.
    pub landmarks: Option<PathBuf>,
    /// Default: `<output_root>/output`.
    pub output: Option<PathBuf>,
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateRun {
    pub input: Option<PathBuf>,
    /// Default: `<output_root>/curated`.
    pub output: Option<PathBuf>,
    /// Default: `<output>/curation.jsonl`.
    pub manifest: Option<PathBuf>,
    pub curation: CurationConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateRun {
    pub generated: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    /// JSON report; a CSV with the same stem is written beside it.
    /// Default: `<output_root>/report.json`.
    pub report: Option<PathBuf>,
    pub metrics: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    /// Default: `<output_root>/synth`.
    pub output: Option<PathBuf>,
    pub count: usize,
    /// Write the six-clip curation corpus instead of a training dataset.
    pub curation_corpus: bool,
    pub clip: SynthClipSpec,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self { output: None, count: 4, curation_corpus: false, clip: SynthClipSpec::default() }
    }
}

fn core_error(path: &str, e: lipsync_core::Error) -> SchemaError {
    SchemaError::new(path, e.to_string())
}

impl RunConfig {
    /// Semantic checks that the type system does not catch.
    pub fn validate(&self) -> Result<(), SchemaError> {
        self.train.training.validate().map_err(|e| core_error("train.training", e))?;
        self.infer.inference.validate().map_err(|e| core_error("infer.inference", e))?;
        if self.infer.inference.overlap >= self.infer.inference.segment_len {
            return Err(SchemaError::new("infer.inference.overlap", "must be smaller than segment_len"));
        }
        if self.synth.count == 0 && !self.synth.curation_corpus {
            return Err(SchemaError::new("synth.count", "must be positive"));
        }
        if self.output_root.as_os_str().is_empty() {
            return Err(SchemaError::new("output_root", "must not be empty"));
        }
        Ok(())
    }

    /// Pushes the global seed into every block.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.training.seed = s;
            self.infer.inference.seed = s;
            self.synth.clip.seed = s;
        }
    }

    /// Resolves `rel` under the output root unless an explicit path was given.
    pub fn output_path(&self, explicit: &Option<PathBuf>, rel: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.output_root.join(rel))
    }
}

/// Parses a config document. Unknown keys and type errors are reported with
/// the path of the offending field.
pub fn parse_config_str(text: &str) -> Result<RunConfig, SchemaError> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        SchemaError::new(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

/// Loads the config file (or the defaults when `path` is `None`) and applies
/// the output-root environment override.
pub fn parse_config(path: Option<&Path>) -> Result<RunConfig, SchemaError> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| SchemaError::new("", format!("{}: {e}", p.display())))?;
            parse_config_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
        config.output_root = PathBuf::from(root);
    }
    Ok(config)
}

/// Canonical serialized form, used for hashing and for manifests.
pub fn to_canonical_json(config: &RunConfig) -> String {
    serde_json::to_string(config).expect("run config serializes")
}
