//! On-disk tensor container for cached embedding features.
//!
//! Layout: the 4-byte magic `LSEG`, a little-endian `u32` format version,
//! a little-endian `u32` header length, a UTF-8 JSON header
//! `{"dtype":"f32le","shape":[...],"meta":{...}}`, then the payload as
//! row-major little-endian `f32` words (4 bytes times the shape product).
//! Readers reject anything else outright rather than guessing: wrong magic,
//! unknown version or dtype, oversized headers, payloads whose byte length
//! disagrees with the shape, and non-finite values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LSEG";
pub const VERSION: u32 = 1;
pub const MAX_HEADER_BYTES: usize = 64 * 1024;

/// An in-memory tensor read from (or destined for) a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub meta: serde_json::Value,
}

// Field order here fixes the header byte layout, which keeps re-serialized
// files byte-identical and therefore cache-friendly.
#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    meta: serde_json::Value,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::ShapeMismatch(format!("shape {shape:?} overflows usize")))
}

/// Write `values` with `shape` and free-form `meta` to `path`.
///
/// The write goes through a temporary sibling file and a rename, so readers
/// never observe a half-written tensor. Non-finite values are rejected
/// before anything touches the disk.
pub fn write(path: &Path, shape: &[usize], values: &[f32], meta: &serde_json::Value) -> Result<()> {
    let count = element_count(shape)?;
    if count != values.len() {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} implies {count} values, got {}",
            values.len()
        )));
    }
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(idx));
    }

    let header = Header {
        dtype: "f32le".to_owned(),
        shape: shape.to_vec(),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if header_bytes.len() > MAX_HEADER_BYTES {
        return Err(Error::HeaderTooLarge(header_bytes.len()));
    }

    let mut buf = Vec::with_capacity(12 + header_bytes.len() + 4 * values.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read and fully validate a tensor file.
pub fn read(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path)?;

    let mut prelude = [0u8; 12];
    f.read_exact(&mut prelude).map_err(|_| Error::BadMagic)?;
    if prelude[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(prelude[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(prelude[8..12].try_into().unwrap()) as usize;
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::HeaderTooLarge(header_len));
    }

    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::MalformedResponse("tensor header truncated".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.dtype != "f32le" {
        return Err(Error::UnsupportedDtype(header.dtype));
    }

    let count = element_count(&header.shape)?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::ShapeMismatch(format!("shape {:?} overflows", header.shape)))?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::PayloadLengthMismatch {
            expected,
            found: payload.len(),
        });
    }

    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(idx));
    }

    Ok(Tensor {
        shape: header.shape,
        values,
        meta: header.meta,
    })
}
