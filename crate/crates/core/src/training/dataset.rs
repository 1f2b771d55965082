//! Training manifests: JSON lines of `{frames_dir, audio_path, landmarks_path, filters_passed}`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{load_video, AudioTrack, LandmarkSequence, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub frames_dir: PathBuf,
    #[serde(default)]
    pub audio_path: Option<PathBuf>,
    pub landmarks_path: PathBuf,
    #[serde(default)]
    pub filters_passed: Vec<String>,
}

impl DatasetRecord {
    /// A short identifier derived from the frame directory name.
    pub fn id(&self) -> String {
        self.frames_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "clip".into())
    }

    /// Loads the clip (with audio) and its landmarks; relative paths are
    /// resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<(VideoClip, LandmarkSequence)> {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let mut clip = load_video(&abs(&self.frames_dir))?;
        if let Some(audio) = &self.audio_path {
            clip = clip.with_audio(Some(AudioTrack::read_wav(&abs(audio))?))?;
        }
        let landmarks = LandmarkSequence::load(&abs(&self.landmarks_path))?;
        if landmarks.len() != clip.num_frames() {
            return Err(Error::shape(format!(
                "{} landmark frames for {} video frames in {}",
                landmarks.len(),
                clip.num_frames(),
                self.frames_dir.display()
            )));
        }
        Ok((clip, landmarks))
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads every record of a manifest; paths are relative to the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Vec<(String, VideoClip, LandmarkSequence)>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|r| {
            let (clip, lm) = r.load(base)?;
            Ok((r.id(), clip, lm))
        })
        .collect()
}
