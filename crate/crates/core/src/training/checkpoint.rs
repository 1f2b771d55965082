//! Single-file tensor archives with a string metadata header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

pub type Metadata = BTreeMap<String, String>;

/// The whole metadata map is stored as one JSON string under this header key:
/// the header's own map is unordered, which would make file bytes vary
/// between identical saves.
const METADATA_KEY: &str = "lipsync";

pub fn write_safetensors(path: &Path, tensors: &BTreeMap<String, Tensor>, metadata: Option<&Metadata>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    let info: Option<HashMap<String, String>> = match metadata {
        Some(m) => Some(HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(m)?)])),
        None => None,
    };
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(contiguous.iter().map(|(k, t)| (k.as_str(), t)), info, &tmp)
        .map_err(|e| Error::io(&tmp, std::io::Error::other(e.to_string())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_safetensors(path: &Path) -> Result<(BTreeMap<String, Tensor>, Metadata)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |e: &dyn std::fmt::Display| Error::UnreadableMedia { path: path.to_path_buf(), reason: e.to_string() };
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(&e))?;
    let raw = header.metadata().clone().unwrap_or_default();
    let metadata = match raw.get(METADATA_KEY) {
        Some(packed) => serde_json::from_str(packed).map_err(|e| corrupt(&e))?,
        None => raw.into_iter().collect(),
    };
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| corrupt(&e))?;
    Ok((tensors.into_iter().collect(), metadata))
}

/// Tensors under `prefix.` with the prefix stripped.
pub fn take_prefixed(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(&p).map(|rest| (rest.to_string(), t.clone())))
        .collect()
}

pub fn with_prefix(tensors: BTreeMap<String, Tensor>, prefix: &str) -> impl Iterator<Item = (String, Tensor)> + '_ {
    tensors.into_iter().map(move |(k, t)| (format!("{prefix}.{k}"), t))
}
