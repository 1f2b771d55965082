//! Flag definitions. Every flag overrides the matching config-file field.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lipsync_core::registry::StrategySpec;

use crate::config::{parse_config, to_canonical_json, RunConfig};
use crate::run::{dispatch, rerun, Command, RunOutcome};

#[derive(Debug, Parser)]
#[command(name = "lipsync", version, about = "Audio-driven lip synchronization with video diffusion")]
pub struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic component of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for run artifacts and manifests (also `LIPSYNC_OUTPUT_ROOT`).
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Train the denoiser on a dataset manifest.
    Train(TrainArgs),
    /// Lip-sync a video to an audio track.
    Infer(InferArgs),
    /// Filter raw videos into a training dataset.
    Curate(CurateArgs),
    /// Compare generated clips with references.
    Evaluate(EvaluateArgs),
    /// Write a synthetic talking-face dataset.
    Synth(SynthArgs),
    /// Repeat the run recorded in a manifest.
    Rerun { manifest: PathBuf },
    /// Print the effective configuration and exit.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[arg(long)]
    pub audio: Option<PathBuf>,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "gen")]
    pub generated: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// External frame embedder: run as `CMD <clip>`, prints a JSON array per frame.
    #[arg(long)]
    pub embedder: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub curation_corpus: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl Cli {
    /// Loads the config file and layers the flags on top.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut c = parse_config(self.config.as_deref())?;
        set_opt(&mut c.seed, self.seed);
        set(&mut c.output_root, self.output_root.clone());
        match &self.command {
            Sub::Train(a) => {
                set_opt(&mut c.train.dataset, a.dataset.clone());
                set_opt(&mut c.train.checkpoint, a.checkpoint.clone());
                set_opt(&mut c.train.resume, a.resume.clone());
                set(&mut c.train.training.steps, a.steps);
                if let Some(lr) = a.lr {
                    c.train.training.lr = lr;
                }
            }
            Sub::Infer(a) => {
                set_opt(&mut c.infer.checkpoint, a.checkpoint.clone());
                set_opt(&mut c.infer.video, a.video.clone());
                set_opt(&mut c.infer.audio, a.audio.clone());
                set_opt(&mut c.infer.landmarks, a.landmarks.clone());
                set_opt(&mut c.infer.output, a.output.clone());
                set(&mut c.infer.inference.steps, a.steps);
                set(&mut c.infer.inference.guidance_scale, a.guidance_scale);
            }
            Sub::Curate(a) => {
                set_opt(&mut c.curate.input, a.input.clone());
                set_opt(&mut c.curate.output, a.output.clone());
                set_opt(&mut c.curate.manifest, a.manifest.clone());
            }
            Sub::Evaluate(a) => {
                set_opt(&mut c.evaluate.generated, a.generated.clone());
                set_opt(&mut c.evaluate.reference, a.reference.clone());
                set_opt(&mut c.evaluate.report, a.report.clone());
                if let Some(cmd) = &a.embedder {
                    c.evaluate.metrics.frame_embedder = StrategySpec::named("command").with_option("program", cmd.as_str());
                }
            }
            Sub::Synth(a) => {
                set_opt(&mut c.synth.output, a.output.clone());
                set(&mut c.synth.count, a.count);
                c.synth.curation_corpus |= a.curation_corpus;
            }
            Sub::Rerun { .. } | Sub::ShowConfig => {}
        }
        c.validate()?;
        Ok(c)
    }

    fn command(&self) -> Option<Command> {
        Some(match self.command {
            Sub::Train(_) => Command::Train,
            Sub::Infer(_) => Command::Infer,
            Sub::Curate(_) => Command::Curate,
            Sub::Evaluate(_) => Command::Evaluate,
            Sub::Synth(_) => Command::Synth,
            Sub::Rerun { .. } | Sub::ShowConfig => return None,
        })
    }

    /// Runs the parsed command. `ShowConfig` prints and returns `None`.
    pub fn execute(&self) -> Result<Option<RunOutcome>> {
        if let Sub::Rerun { manifest } = &self.command {
            return rerun(manifest).map(Some);
        }
        let config = self.effective_config()?;
        match self.command() {
            Some(cmd) => dispatch(cmd, &config).map(Some),
            None => {
                let value: serde_json::Value = serde_json::from_str(&to_canonical_json(&config))?;
                println!("{}", serde_json::to_string_pretty(&value)?);
                Ok(None)
            }
        }
    }
}
