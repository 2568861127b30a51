//! Shared binary container used by checkpoints, adversarial datasets and
//! detectors:
//!
//! ```text
//! magic      4 bytes
//! version    u32 little-endian
//! meta_len   u64 little-endian
//! meta       meta_len bytes of UTF-8 JSON
//! blob       remainder, layout owned by the payload type
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    pub meta: serde_json::Value,
    pub blob: Vec<u8>,
}

pub fn encode(magic: [u8; 4], meta: &serde_json::Value, blob: &[u8]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + blob.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(blob);
    Ok(out)
}

/// Parse the header and metadata; the blob is returned unvalidated.
pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Container> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let meta_end = (HEADER_LEN as u64).saturating_add(meta_len);
    if meta_end > bytes.len() as u64 {
        return Err(Error::Truncated {
            expected: meta_end as usize,
            found: bytes.len(),
        });
    }
    let meta_end = meta_end as usize;
    let meta = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])?;
    Ok(Container {
        magic,
        version,
        meta,
        blob: bytes[meta_end..].to_vec(),
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Check that a blob has exactly `expected` bytes.
pub(crate) fn expect_len(blob: &[u8], expected: usize) -> Result<()> {
    match blob.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(Error::Truncated {
            expected,
            found: blob.len(),
        }),
        std::cmp::Ordering::Greater => Err(Error::Format(format!(
            "{} trailing bytes after blob",
            blob.len() - expected
        ))),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn take_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn take_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
