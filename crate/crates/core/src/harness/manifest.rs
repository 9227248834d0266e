use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::training::LossTrace;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    /// Loaded from an existing checkpoint instead of retraining.
    Resumed,
    /// Nothing to train (identity metric, frozen interpolant).
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub wall_clock_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<LossTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub metrics: Vec<EvalReport>,
    pub files: Vec<FileRecord>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            config_hash: config_hash.into(),
            seed,
            stages: Vec::new(),
            metrics: Vec::new(),
            files: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    /// Existing manifest of a run directory, or a fresh one when there is none.
    pub fn open(dir: &Path, config_hash: &str, seed: u64) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config_hash, seed));
        }
        let m = Self::load(&path)?;
        if m.config_hash != config_hash {
            return Err(Error::Config(format!(
                "{} belongs to config {}, not {config_hash}",
                path.display(),
                m.config_hash
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Replaces any earlier record of the same stage.
    pub fn set_stage(&mut self, record: StageRecord) {
        self.wall_clock_secs += record.wall_clock_secs;
        match self.stages.iter_mut().find(|s| s.name == record.name) {
            Some(s) => *s = record,
            None => self.stages.push(record),
        }
    }

    /// Replaces reports with the same metric name.
    pub fn set_metrics(&mut self, reports: &[EvalReport]) {
        for r in reports {
            self.wall_clock_secs += r.runtime_secs;
            match self.metrics.iter_mut().find(|m| m.metric == r.metric) {
                Some(m) => *m = r.clone(),
                None => self.metrics.push(r.clone()),
            }
        }
    }

    /// Hashes every regular file under `dir` except the manifest itself and writes
    /// the manifest there.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        collect_files(dir, dir, &mut files)?;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        self.files = files;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileRecord>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        if rel == MANIFEST_FILE {
            continue;
        }
        let (sha256, bytes) = sha256_file(&path)?;
        out.push(FileRecord { path: rel, sha256, bytes });
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), total))
}
