//! Run manifest: which stages ran, how long they took, and the digest of
//! every artifact they wrote.  Lives beside the artifacts as
//! `manifest.json` and is merged stage by stage, so re-running one stage
//! updates only its own record.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub seconds: f64,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    /// Digest of the effective config; stage records from a different
    /// config are dropped rather than mixed in.
    pub config_hash: String,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(format!("{}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    /// Open the run directory's manifest, or start one.  A manifest written
    /// under a different config describes artifacts this run will replace,
    /// so its stage records are discarded.
    pub fn open(run_dir: &Path, config_hash: &str) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let fresh = RunManifest {
            config_hash: config_hash.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        };
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let old: RunManifest = serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
                if old.config_hash == config_hash {
                    Ok(RunManifest { tool_version: fresh.tool_version, ..old })
                } else {
                    Ok(fresh)
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(fresh),
            Err(e) => Err(Error::Io(e)),
        }
    }

    /// Record a finished stage: hash each artifact (paths relative to
    /// `run_dir`) and persist the merged manifest.
    pub fn record(
        &mut self,
        run_dir: &Path,
        stage: &str,
        started: Instant,
        artifacts: &[String],
    ) -> Result<()> {
        let mut records = Vec::with_capacity(artifacts.len());
        for rel in artifacts {
            records.push(ArtifactRecord {
                path: rel.clone(),
                sha256: sha256_file(&run_dir.join(rel))?,
            });
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord { seconds: started.elapsed().as_secs_f64(), artifacts: records },
        );
        self.save(run_dir)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(run_dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_merge_and_persist() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"alpha").unwrap();
        std::fs::write(dir.path().join("b.txt"), b"beta").unwrap();

        let mut m = RunManifest::open(dir.path(), "hash1").unwrap();
        m.record(dir.path(), "gen-data", Instant::now(), &["a.txt".into()]).unwrap();

        // a second process re-opens and adds its stage
        let mut m2 = RunManifest::open(dir.path(), "hash1").unwrap();
        assert!(m2.stages.contains_key("gen-data"));
        m2.record(dir.path(), "pretrain", Instant::now(), &["b.txt".into()]).unwrap();

        let m3 = RunManifest::open(dir.path(), "hash1").unwrap();
        assert_eq!(m3.stages.len(), 2);
        assert_eq!(m3.stages["gen-data"].artifacts[0].sha256, sha256_hex(b"alpha"));
        assert_eq!(m3.stages["pretrain"].artifacts[0].sha256, sha256_hex(b"beta"));
    }

    #[test]
    fn config_change_drops_stale_stages() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"alpha").unwrap();
        let mut m = RunManifest::open(dir.path(), "hash1").unwrap();
        m.record(dir.path(), "gen-data", Instant::now(), &["a.txt".into()]).unwrap();

        let m2 = RunManifest::open(dir.path(), "hash2").unwrap();
        assert!(m2.stages.is_empty());
        assert_eq!(m2.config_hash, "hash2");
    }

    #[test]
    fn hashing_a_missing_artifact_reports_it() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::open(dir.path(), "h").unwrap();
        let err = m
            .record(dir.path(), "s", Instant::now(), &["ghost.bin".into()])
            .unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        assert_eq!(err.exit_code(), 3);
    }
}
