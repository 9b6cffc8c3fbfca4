//! Length-prefixed container: `u64` little-endian header length, a JSON
//! header, then a raw little-endian `f32` payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let head = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + head.len() + payload.len() * 4);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Splits a container into its header and payload.
///
/// Fails when the payload length is not a whole number of `f32`s; callers
/// check the element count against what the header declares.
pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    if bytes.len() < 8 {
        return Err(Error::Format("container shorter than its length prefix".into()));
    }
    let head_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < head_len {
        return Err(Error::Format(format!(
            "header declares {head_len} bytes, only {} present",
            body.len()
        )));
    }
    let header = serde_json::from_slice(&body[..head_len])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let raw = &body[head_len..];
    if raw.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "payload length {} is not a multiple of 4",
            raw.len()
        )));
    }
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write<H: Serialize>(path: &Path, header: &H, payload: &[f32]) -> Result<()> {
    let bytes = encode(header, payload)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode(&serde_json::json!({"shape": [2]}), &[1.0, 2.0]).unwrap();
        let (h, p): (serde_json::Value, _) = decode(&bytes).unwrap();
        assert_eq!(h["shape"][0], 2);
        assert_eq!(p, vec![1.0, 2.0]);
        assert!(decode::<serde_json::Value>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode::<serde_json::Value>(&bytes[..4]).is_err());
    }
}
