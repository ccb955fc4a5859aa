//! Config hashing and safetensors checkpoints with a metadata header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Metadata key holding the config hash.
pub const HASH_KEY: &str = "config_hash";

/// SHA-256 (hex) of the JSON serialisation of `value`.
pub fn stable_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialise to JSON");
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    let parse_err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
        .map_err(|e| parse_err(e.to_string()))?;
    let bytes = canonical_header(&bytes).map_err(parse_err)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Re-emits the JSON header with sorted keys so identical checkpoints are
/// byte-identical (the metadata map otherwise serialises in hash order).
fn canonical_header(bytes: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| e.to_string())?;
    let mut json = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    json.resize(json.len().div_ceil(8) * 8, b' ');
    let mut out = Vec::with_capacity(8 + json.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

pub struct LoadedCheckpoint {
    pub tensors: HashMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let metadata = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(LoadedCheckpoint { tensors, metadata })
}

impl LoadedCheckpoint {
    /// Fails unless the stored config hash equals `expected`.
    pub fn verify_hash(&self, path: &Path, expected: &str) -> Result<()> {
        let found = self.metadata.get(HASH_KEY).cloned().unwrap_or_default();
        if found != expected {
            return Err(Error::HashMismatch {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        #[derive(Serialize)]
        struct C {
            a: u32,
            b: f64,
        }
        let h1 = stable_hash(&C { a: 1, b: 0.5 });
        assert_eq!(h1, stable_hash(&C { a: 1, b: 0.5 }));
        assert_ne!(h1, stable_hash(&C { a: 2, b: 0.5 }));
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let t = Tensor::new(&[[1f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        let tensors = BTreeMap::from([("w".to_string(), t.clone())]);
        let meta = BTreeMap::from([(HASH_KEY.to_string(), "abc".to_string())]);
        save_checkpoint(&path, &tensors, &meta).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.tensors["w"].to_vec2::<f32>().unwrap(), t.to_vec2::<f32>().unwrap());
        loaded.verify_hash(&path, "abc").unwrap();
        assert!(matches!(
            loaded.verify_hash(&path, "abd"),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn saving_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = BTreeMap::from([
            ("b".to_string(), Tensor::new(&[1f32, 2.0, 3.0], &Device::Cpu).unwrap()),
            ("a".to_string(), Tensor::new(&[4f32], &Device::Cpu).unwrap()),
        ]);
        let meta: BTreeMap<String, String> = (0..8).map(|i| (format!("k{i}"), format!("v{i}"))).collect();
        let bytes: Vec<Vec<u8>> = (0..3)
            .map(|i| {
                let path = dir.path().join(format!("{i}.safetensors"));
                save_checkpoint(&path, &tensors, &meta).unwrap();
                std::fs::read(&path).unwrap()
            })
            .collect();
        assert!(bytes.windows(2).all(|w| w[0] == w[1]));
        let loaded = load_checkpoint(&dir.path().join("0.safetensors")).unwrap();
        assert_eq!(loaded.metadata, meta);
        assert_eq!(loaded.tensors["b"].to_vec1::<f32>().unwrap(), vec![1.0, 2.0, 3.0]);
    }
}
