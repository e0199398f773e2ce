use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MuirError, Result};

use super::{ExperimentConfig, ExperimentKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedRun {
    pub setup: Option<String>,
    pub seed: Option<u64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<FileEntry>,
    pub failed: Vec<FailedRun>,
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes artifacts into a run directory and records their checksums.
pub(crate) struct ArtifactWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
    started: u64,
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)
            .map_err(|e| MuirError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: unix_now(),
        })
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.retain(|f| f.path != rel);
        self.files.push(FileEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes)
    }

    pub fn write_csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| MuirError::Io(e.into_error()))?;
        self.write_bytes(rel, &bytes)
    }

    pub fn write_snapshot(&mut self, config: &ExperimentConfig) -> Result<()> {
        self.write_bytes("config.snapshot.toml", config.snapshot()?.as_bytes())
    }

    /// Writes `manifest.json`, which is not listed in itself.
    pub fn finish(
        self,
        config: &ExperimentConfig,
        workers: usize,
        failed: Vec<FailedRun>,
    ) -> Result<(PathBuf, RunManifest)> {
        let manifest = RunManifest {
            kind: config.kind,
            config_hash: config.hash()?,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: config.seeds.clone(),
            workers,
            started_unix: self.started,
            finished_unix: unix_now(),
            files: self.files,
            failed,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.dir.join("manifest.json"), bytes)?;
        Ok((self.dir, manifest))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> MuirError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MuirError::Io(io),
        other => MuirError::Integrity(format!("csv: {other:?}")),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
