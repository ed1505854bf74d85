use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cutpaste::config::ExperimentConfig;
use cutpaste::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one invocation, written before any work starts and updated
/// when the command finishes.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub code_version: String,
    /// Input path to SHA-256; directories hash their sorted file tree.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub status: String,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            argv,
            seed: config.seed,
            config,
            code_version: env!("CARGO_PKG_VERSION").into(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: None,
            status: "running".into(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let digest = hash_path(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
        let path = out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| io(&path, e))
    }

    /// Marks the run finished; a successful run must have produced every
    /// listed output.
    pub fn finish(&mut self, out_dir: &Path, status: &str) -> Result<()> {
        self.finished_at = Some(now());
        self.status = status.into();
        if status == "ok" {
            if let Some(missing) = self.outputs.iter().find(|p| !p.exists()) {
                self.status = format!("missing output {}", missing.display());
                self.write(out_dir)?;
                return Err(Error::Integrity(self.status.clone()));
            }
        }
        self.write(out_dir)
    }
}

pub fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn hash_file(path: &Path, hasher: &mut Sha256) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    hasher.update(&bytes);
    Ok(())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let path = entry.map_err(|e| io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of every relative path and file content under a
/// directory in sorted order.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0u8]);
            hash_file(&f, &mut hasher)?;
        }
    } else {
        hash_file(path, &mut hasher)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_tracks_content_and_names() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.txt"), "one").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        assert_eq!(h1, hash_path(dir.path()).unwrap());
        fs::write(dir.path().join("a/x.txt"), "two").unwrap();
        let h2 = hash_path(dir.path()).unwrap();
        assert_ne!(h1, h2);
        fs::rename(dir.path().join("a/x.txt"), dir.path().join("a/y.txt")).unwrap();
        assert_ne!(h2, hash_path(dir.path()).unwrap());
    }

    #[test]
    fn finish_rejects_missing_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", vec![], ExperimentConfig::desk());
        m.outputs.push(dir.path().join("never-written"));
        m.write(dir.path()).unwrap();
        assert!(m.finish(dir.path(), "ok").is_err());
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("missing output"));
    }
}
