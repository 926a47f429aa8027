//! Binary container shared by the dataset, sample and ensemble files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      ASCII tag, e.g. "CGBG-DS1" (length fixed per file kind)
//! hdr_len    u64
//! header     hdr_len bytes of UTF-8 JSON (must contain the record count)
//! records    count * width * f64
//! crc32      u32 over every preceding byte
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("bad header: {0}")]
    Header(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode<H: Serialize>(magic: &[u8], header: &H, records: &[f64]) -> Result<Vec<u8>, FormatError> {
    let hdr = serde_json::to_vec(header).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(magic.len() + 8 + hdr.len() + records.len() * 8 + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(hdr.len() as u64).to_le_bytes());
    out.extend_from_slice(&hdr);
    for v in records {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes a container; `record_floats` maps the parsed header to the number
/// of `f64` values that must follow it.
pub fn decode<H: DeserializeOwned>(
    magic: &[u8],
    bytes: &[u8],
    record_floats: impl Fn(&H) -> usize,
) -> Result<(H, Vec<f64>), FormatError> {
    let m = magic.len();
    if bytes.len() < m + 8 + 4 {
        return Err(FormatError::Truncated(format!("{} bytes", bytes.len())));
    }
    if &bytes[..m] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..m]).into_owned(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let hdr_len = u64::from_le_bytes(bytes[m..m + 8].try_into().unwrap()) as usize;
    if m + 8 + hdr_len > body.len() {
        return Err(FormatError::Truncated("header extends past end of file".into()));
    }
    let header: H = serde_json::from_slice(&bytes[m + 8..m + 8 + hdr_len])
        .map_err(|e| FormatError::Header(e.to_string()))?;
    let n = record_floats(&header);
    let payload = &body[m + 8 + hdr_len..];
    if payload.len() != n * 8 {
        return Err(FormatError::Truncated(format!(
            "expected {} payload bytes, found {}",
            n * 8,
            payload.len()
        )));
    }
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(FormatError::Checksum { stored, computed });
    }
    let records = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, records))
}

pub fn write_file<H: Serialize>(
    path: &Path,
    magic: &[u8],
    header: &H,
    records: &[f64],
) -> Result<(), FormatError> {
    std::fs::write(path, encode(magic, header, records)?)?;
    Ok(())
}

pub fn read_file<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8],
    record_floats: impl Fn(&H) -> usize,
) -> Result<(H, Vec<f64>), FormatError> {
    decode(magic, &std::fs::read(path)?, record_floats)
}
