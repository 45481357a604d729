//! The run manifest: inputs, seeds and hashes of everything a command wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::Serialize;
use walkdir::WalkDir;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub precision: String,
    pub threads: Option<usize>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn hash_file(path: &Path) -> Option<FileHash> {
    let bytes = fs::read(path).ok()?;
    Some(FileHash {
        path: path.display().to_string(),
        sha256: ror_core::sha256_hex(&bytes),
    })
}

/// Files under `out` written at or after `since`, relative to `out`, sorted.
pub fn artifacts(out: &Path, since: SystemTime) -> Vec<FileHash> {
    let mut files: Vec<PathBuf> = WalkDir::new(out)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter(|e| e.file_name() != RUN_MANIFEST)
        .filter(|e| e.metadata().ok().and_then(|m| m.modified().ok()).is_some_and(|t| t >= since))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
        .iter()
        .filter_map(|p| {
            let mut h = hash_file(p)?;
            h.path = p.strip_prefix(out).unwrap_or(p).display().to_string();
            Some(h)
        })
        .collect()
}
