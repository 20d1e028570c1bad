//! `<stem>.json` (names, shapes, byte offsets, step, free-form config) plus
//! `<stem>.bin` (concatenated little-endian f32 payloads).

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the `.bin` payload.
    pub offset: usize,
    /// Number of f32 values.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: u64,
    pub params: Vec<ParamRecord>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn checkpoint_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    store: &ParamStore<f32>,
    step: u64,
    config: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (json_path, bin_path) = checkpoint_paths(dir, stem);
    let mut bytes = Vec::with_capacity(store.numel() * 4);
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let t = store.tensor(id);
        params.push(ParamRecord {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
            len: t.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        step,
        params,
        config,
    };
    fs::write(&bin_path, &bytes).map_err(|e| Error::io(&bin_path, e))?;
    let text = serde_json::to_string_pretty(&header).map_err(|source| Error::Json {
        path: json_path.clone(),
        source,
    })?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(ParamStore<f32>, CheckpointHeader)> {
    let (json_path, bin_path) = checkpoint_paths(dir, stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: json_path.clone(),
        source,
    })?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: json_path,
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut store = ParamStore::new();
    for rec in &header.params {
        let end = rec.offset + rec.len * 4;
        if end > bytes.len() || rec.shape.iter().product::<usize>() != rec.len {
            return Err(Error::Integrity {
                path: bin_path,
                detail: format!("parameter {} spans bytes {}..{end} of {}", rec.name, rec.offset, bytes.len()),
            });
        }
        let data = bytes[rec.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.add(rec.name.clone(), Tensor::new(rec.shape.clone(), data)?);
    }
    let expected: usize = header.params.iter().map(|r| r.len * 4).sum();
    if expected != bytes.len() {
        return Err(Error::Integrity {
            path: bin_path,
            detail: format!("payload has {} bytes, header describes {expected}", bytes.len()),
        });
    }
    Ok((store, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        s.add("b", Tensor::new(vec![1], vec![std::f32::consts::PI]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample_store();
        save_checkpoint(dir.path(), "checkpoint", &s, 42, serde_json::json!({"k": 1})).unwrap();
        let (back, header) = load_checkpoint(dir.path(), "checkpoint").unwrap();
        assert!(back.bit_eq(&s));
        assert_eq!(header.step, 42);
        assert_eq!(header.params[1].offset, 24);
        assert_eq!(header.config["k"], 1);
    }

    #[test]
    fn truncated_payload_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), "c", &sample_store(), 0, serde_json::Value::Null).unwrap();
        let (_, bin) = checkpoint_paths(dir.path(), "c");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_checkpoint(dir.path(), "c").unwrap_err();
        assert!(matches!(err, Error::Integrity { ref path, .. } if path == &bin), "{err}");
    }

    #[test]
    fn missing_checkpoint_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(dir.path(), "nope").unwrap_err();
        assert!(err.to_string().contains("nope.json"));
    }
}
