//! Two-part file layout shared by checkpoints and embedding stores: a UTF-8
//! JSON header terminated by `\n`, followed by raw little-endian payload bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum BlobError {
    #[error("missing header terminator")]
    NoHeader,
    #[error("malformed header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode<H: Serialize>(header: &H, payload: &[u8]) -> Result<Vec<u8>, BlobError> {
    let mut out = serde_json::to_vec(header).map_err(|e| BlobError::Header(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits a file into its raw header bytes and payload.
pub fn split(bytes: &[u8]) -> Result<(&[u8], &[u8]), BlobError> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(BlobError::NoHeader)?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

pub fn parse_header<H: DeserializeOwned>(raw: &[u8]) -> Result<H, BlobError> {
    serde_json::from_slice(raw).map_err(|e| BlobError::Header(e.to_string()))
}

pub fn write(path: &Path, header: &impl Serialize, payload: &[u8]) -> Result<(), BlobError> {
    let bytes = encode(header, payload)?;
    crate::io::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>, BlobError> {
    Ok(fs::read(path)?)
}

pub fn f64s_to_le(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn f32s_to_le(values: impl IntoIterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn le_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
}

pub fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect()
}
