//! Run manifests, artifact digests and output-directory locking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Every run records its resolved arguments and the SHA-256 of each artifact
/// it wrote; re-running from the manifest must reproduce the digests.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: serde_json::Value,
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Digest the named artifacts in `dir` and write manifest.json.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    args: serde_json::Value,
    artifacts: &[&str],
) -> Result<Manifest> {
    let mut digests = BTreeMap::new();
    for name in artifacts {
        digests.insert((*name).to_string(), sha256_file(&dir.join(name))?);
    }
    let manifest = Manifest {
        command: command.to_string(),
        args,
        artifacts: digests,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Exclusive ownership of an output directory for the duration of a run.
/// Creating the lock fails if another run holds it; the lock is removed on
/// drop (including error paths).
pub struct OutputDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    pub fn claim(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path)
            .with_context(|| format!("creating output directory {}", path.display()))?;
        let lock = path.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(_) => Ok(Self {
                path: path.to_path_buf(),
                lock,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    path.display(),
                    lock.display()
                )
            }
            Err(e) => Err(e).context("creating lock file"),
        }
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = std::env::temp_dir().join(format!("dpn-lock-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        {
            let owned = OutputDir::claim(&dir).unwrap();
            assert!(OutputDir::claim(&dir).is_err());
            drop(owned);
        }
        assert!(OutputDir::claim(&dir).is_ok());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join(format!("dpn-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("a.txt"), "hello").unwrap();
        let m = write_manifest(
            &dir,
            "demo",
            serde_json::json!({"seed": 7}),
            &["a.txt"],
        )
        .unwrap();
        let back = read_manifest(&dir.join("manifest.json")).unwrap();
        assert_eq!(back.command, "demo");
        assert_eq!(back.artifacts["a.txt"], m.artifacts["a.txt"]);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
