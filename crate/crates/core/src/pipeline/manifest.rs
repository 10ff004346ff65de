//! Run manifest: config snapshot, digests, timings and per-image status.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::records::{DatasetRecord, Stage};
use super::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageState {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageStatus {
    pub image_id: String,
    pub status: ImageState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl From<&DatasetRecord> for ImageStatus {
    fn from(r: &DatasetRecord) -> Self {
        match r {
            DatasetRecord::Ok(rec) => Self {
                image_id: rec.image_id.clone(),
                status: ImageState::Ok,
                stage: None,
                message: None,
            },
            DatasetRecord::Error(f) => Self {
                image_id: f.image_id.clone(),
                status: ImageState::Error,
                stage: Some(f.stage),
                message: Some(f.message.clone()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Milliseconds since the Unix epoch when this manifest was written.
    pub written_at_ms: u64,
    pub config: BTreeMap<String, String>,
    pub config_digest: String,
    pub inputs: BTreeMap<String, FileDigest>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub stage_timings_ms: BTreeMap<String, f64>,
    pub images: Vec<ImageStatus>,
    /// Images recomputed by the most recent resume.
    #[serde(default)]
    pub resumed_images: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PipelineError::Resume(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Resume(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        super::records::write_atomic(&dir.join(MANIFEST_FILE), &bytes)
    }

    pub fn failed_images(&self) -> impl Iterator<Item = &str> {
        self.images
            .iter()
            .filter(|s| s.status == ImageState::Error)
            .map(|s| s.image_id.as_str())
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes =
        std::fs::read(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
