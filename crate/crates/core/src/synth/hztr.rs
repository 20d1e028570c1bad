//! HZTR raster files: `"HZTR"`, u32 version, u32 ndim, ndim x u32 dims, then
//! a little-endian f32 row-major payload. All integers are little-endian.

use crate::{Error, Result};
use std::fs;
use std::path::Path;

pub const HZTR_MAGIC: &[u8; 4] = b"HZTR";
pub const HZTR_VERSION: u32 = 1;

pub fn encode_hztr(dims: &[usize], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + dims.len() * 4 + data.len() * 4);
    out.extend_from_slice(HZTR_MAGIC);
    out.extend_from_slice(&HZTR_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_hztr(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let integrity = |detail: String| Error::Integrity {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 12 {
        return Err(if bytes.len() >= 4 && &bytes[..4] == HZTR_MAGIC {
            integrity(format!("header truncated at {} bytes", bytes.len()))
        } else {
            format(format!("file too short ({} bytes) for an HZTR header", bytes.len()))
        });
    }
    if &bytes[..4] != HZTR_MAGIC {
        return Err(format(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = word(4);
    if version != HZTR_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: HZTR_VERSION,
        });
    }
    let ndim = word(8) as usize;
    if ndim == 0 || ndim > 4 {
        return Err(format(format!("ndim {ndim} outside 1..=4")));
    }
    let header = 12 + 4 * ndim;
    if bytes.len() < header {
        return Err(integrity(format!("dims truncated at {} bytes", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim).map(|i| word(12 + 4 * i) as usize).collect();
    let count: usize = dims.iter().product();
    let expected = header + count * 4;
    if bytes.len() != expected {
        return Err(integrity(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            bytes.len() - header,
            count * 4
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

pub fn write_hztr(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    fs::write(path, encode_hztr(dims, data)).map_err(|e| Error::io(path, e))
}

pub fn read_hztr(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Integrity {
            path: path.to_path_buf(),
            detail: "file listed in manifest is missing".into(),
        },
        _ => Error::io(path, e),
    })?;
    decode_hztr(path, &bytes)
}
