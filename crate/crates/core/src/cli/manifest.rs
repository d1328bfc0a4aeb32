use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::hash_value;
use crate::error::{Error, Result};

/// Bookkeeping for one completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the config fields and upstream stages this stage depends on.
    pub key: String,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub wall_ms: f64,
}

/// `manifest.json` at the root of a run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
    /// Path of the per-image results table, once written.
    pub results: Option<String>,
    pub records: Vec<crate::evalgame::EvalRecord>,
}

impl RunManifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load_or_new(out: &Path, config_hash: &str) -> Result<Self> {
        let p = Self::path(out);
        let mut m = if p.exists() {
            serde_json::from_str(&std::fs::read_to_string(&p)?)?
        } else {
            RunManifest::default()
        };
        m.config_hash = config_hash.to_string();
        Ok(m)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        std::fs::write(Self::path(out), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// True when `stage` last ran with `key` and all its artifacts still exist.
    pub fn is_fresh(&self, out: &Path, stage: &str, key: &str) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|r| r.key == key && r.artifacts.iter().all(|a| out.join(a).exists()))
    }

    /// Checks that every artifact listed by any stage exists on disk.
    pub fn verify(&self, out: &Path) -> Result<()> {
        for r in self.stages.values() {
            for a in &r.artifacts {
                if !out.join(a).exists() {
                    return Err(Error::MissingArtifact(out.join(a)));
                }
            }
        }
        Ok(())
    }
}

/// Key of a stage: hash of its config slice together with upstream keys.
pub fn stage_key(slice: &serde_json::Value, upstream: &[&str]) -> String {
    hash_value(&serde_json::json!({ "config": slice, "upstream": upstream }))
}

/// Deterministic per-purpose seed derived from the global seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub struct Timer(Instant);

impl Timer {
    pub fn start() -> Self {
        Timer(Instant::now())
    }

    pub fn ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// Path of `p` relative to `out`, with forward slashes.
pub fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freshness_tracks_key_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        std::fs::write(out.join("a.bin"), b"x").unwrap();
        let mut m = RunManifest::load_or_new(out, "h").unwrap();
        m.stages.insert(
            "codec".into(),
            StageRecord {
                key: "k".into(),
                artifacts: vec!["a.bin".into()],
                wall_ms: 1.0,
            },
        );
        m.save(out).unwrap();
        let m = RunManifest::load_or_new(out, "h").unwrap();
        assert!(m.is_fresh(out, "codec", "k"));
        assert!(!m.is_fresh(out, "codec", "other"));
        m.verify(out).unwrap();
        std::fs::remove_file(out.join("a.bin")).unwrap();
        assert!(!m.is_fresh(out, "codec", "k"));
        assert!(matches!(m.verify(out), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn sub_seeds_differ_by_tag() {
        assert_eq!(sub_seed(1, "a"), sub_seed(1, "a"));
        assert_ne!(sub_seed(1, "a"), sub_seed(1, "b"));
        assert_ne!(sub_seed(1, "a"), sub_seed(2, "a"));
    }
}
