//! Flat little-endian parameter files with a JSON sidecar.
//!
//! Layout: 8-byte magic `RIWPARAM`, `u64` value count, then `f64` values.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RIWPARAM";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

pub fn write_params(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let buf = std::fs::read(path)?;
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a parameter file", path.display())));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    if buf.len() != 16 + 8 * n {
        return Err(Error::Checkpoint(format!(
            "{}: header says {n} values, file holds {}",
            path.display(),
            (buf.len() - 16) / 8
        )));
    }
    Ok(buf[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes parameters and a pretty-printed metadata sidecar next to them.
pub fn save<M: Serialize>(path: &Path, values: &[f64], meta: &M) -> Result<()> {
    write_params(path, values)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(Vec<f64>, M)> {
    let values = read_params(path)?;
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::MissingArtifact(side));
    }
    let meta = serde_json::from_str(&std::fs::read_to_string(side)?)?;
    Ok((values, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let vals = vec![1.5, -2.0, f64::MIN_POSITIVE, 0.0];
        save(&p, &vals, &serde_json::json!({"seed": 3})).unwrap();
        let (back, meta): (Vec<f64>, serde_json::Value) = load(&p).unwrap();
        assert_eq!(back, vals);
        assert_eq!(meta["seed"], 3);
        std::fs::write(&p, b"RIWPARAM\x05\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_params(&p), Err(Error::Checkpoint(_))));
        assert!(matches!(
            read_params(&dir.path().join("none.bin")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
