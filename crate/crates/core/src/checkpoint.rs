//! Self-describing weight archives: safetensors with a JSON header entry, plus
//! content fingerprints for files and manifests.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Params;

const META_KEY: &str = "artlab";

/// Writes `params` with `meta` serialized as JSON into the archive header.
pub fn save<M: Serialize>(path: &Path, params: &Params, meta: &M) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut header = HashMap::new();
    header.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let tensors: Vec<(String, candle_core::Tensor)> =
        params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    // Write to a sibling temp file first so a crash never leaves a torn archive.
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors, Some(header), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(Params, M)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, metadata) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing header", path.display())))?;
    let meta: M = serde_json::from_str(raw)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut params = Params::new();
    for (k, v) in tensors {
        params.insert(k, v);
    }
    Ok((params, meta))
}

/// Reads only the JSON header of an archive.
pub fn read_meta<M: DeserializeOwned>(path: &Path) -> Result<M> {
    load::<M>(path).map(|(_, m)| m)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Order-sensitive fingerprint over a sequence of string parts.
pub fn fingerprint_parts<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Tensor};
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Meta {
        kind: String,
        steps: usize,
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let mut p = Params::new();
        p.insert(
            "a.weight",
            Tensor::arange(0f32, 6., &Device::Cpu).unwrap().reshape((2, 3)).unwrap(),
        );
        let meta = Meta {
            kind: "test".into(),
            steps: 3,
        };
        save(&path, &p, &meta).unwrap();
        let (q, m): (Params, Meta) = load(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(p.fingerprint().unwrap(), q.fingerprint().unwrap());
        assert_eq!(q.get("a.weight").unwrap().dtype(), DType::F32);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load::<Meta>(Path::new("/nonexistent/x.safetensors")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
