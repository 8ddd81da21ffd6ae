//! Single-file containers: one line of compact JSON header, a newline, then a
//! raw little-endian payload. `head -1 file` shows the metadata.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn write<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    Ok((header, bytes[split + 1..].to_vec()))
}

pub(crate) fn f32_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

pub(crate) fn f32_values(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn check_tag(path: &Path, field: &str, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::format(
            path,
            format!("{field} is {found:?}, only {expected:?} is supported"),
        ));
    }
    Ok(())
}
