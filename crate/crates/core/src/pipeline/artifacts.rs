//! Output-directory layout, the run lock, the manifest and CSV writing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";
pub const BASE_CKPT: &str = "base.ckpt";
pub const CRITIC_CKPT: &str = "critic.ckpt";
pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";
pub const DIAGNOSTICS_HEADER: &str = "iteration,estimator,n_traj,grad_norm,grad_variance,clip_count,mean_reward";

pub fn unlearned_ckpt(method: &str) -> String {
    format!("unlearned_{method}.ckpt")
}

pub fn metrics_csv(method: &str) -> String {
    format!("metrics_{method}.csv")
}

pub fn diagnostics_csv(method: &str) -> String {
    format!("diagnostics_{method}.csv")
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A CSV table built in memory and written in one go.
#[derive(Clone, Debug, Default)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &str) -> Self {
        Csv {
            text: format!("{header}\n"),
        }
    }

    pub fn row(&mut self, fields: &[&dyn std::fmt::Display]) {
        for (i, f) in fields.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            let _ = write!(self.text, "{f}");
        }
        self.text.push('\n');
    }

    pub fn line(&mut self, line: &str) {
        self.text.push_str(line);
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    pub status: PhaseStatus,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub phases: Vec<PhaseRecord>,
    /// Keyed by file name relative to the output directory.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        RunManifest {
            config_hash,
            seed,
            ..Default::default()
        }
    }

    /// Hashes and records `name` under `dir`; the file must exist.
    pub fn record_artifact(&mut self, dir: &Path, name: &str) -> Result<()> {
        let path = dir.join(name);
        let sha256 = sha256_file(&path)?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactRecord {
                path: name.to_string(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("manifest is not valid JSON: {e}"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest always serialises");
        write_atomic(path, text.as_bytes())
    }

    /// Names of recorded artifacts whose file is absent or whose contents changed.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|(_, a)| sha256_file(&dir.join(&a.path)).map(|h| h != a.sha256).unwrap_or(true))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(lock);
        assert!(!dir.path().join(LOCK).exists());
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn csv_layout() {
        let mut c = Csv::new("a,b");
        c.row(&[&1, &0.1]);
        c.row(&[&"x", &1e-20]);
        assert_eq!(c.as_str(), "a,b\n1,0.1\nx,0.00000000000000000001\n");
    }

    #[test]
    fn manifest_round_trip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "x\n").unwrap();
        let mut m = RunManifest::new("abc".into(), 3);
        m.record_artifact(dir.path(), "a.csv").unwrap();
        assert!(m.record_artifact(dir.path(), "missing.csv").is_err());
        m.save(&dir.path().join(MANIFEST)).unwrap();
        let back = RunManifest::load(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(back, m);
        assert!(back.verify(dir.path()).is_empty());
        fs::write(dir.path().join("a.csv"), "y\n").unwrap();
        assert_eq!(back.verify(dir.path()), vec!["a.csv".to_string()]);
    }
}
