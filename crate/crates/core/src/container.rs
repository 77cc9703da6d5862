//! The `.mvol` container: a one-line JSON header, a sentinel line, then a raw
//! little-endian payload.
//!
//! ```text
//! {"magic":"advnorm-mvol","version":1,"kind":"intensity",...}\n
//! %%payload%%\n
//! <payload bytes>
//! ```
//!
//! The same layout carries intensity volumes (`f32le`), label maps (`u8`) and
//! training checkpoints (`f64le` tensors listed in the header).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "advnorm-mvol";
pub const VERSION: u32 = 1;
pub const SENTINEL: &[u8] = b"%%payload%%\n";
pub const EXTENSION: &str = "mvol";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Intensity,
    Labels,
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32le,
    U8,
    F64le,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32le => 4,
            Dtype::U8 => 1,
            Dtype::F64le => 8,
        }
    }
}

/// Named tensor stored in a checkpoint payload, `len` values starting at
/// value offset `offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub magic: String,
    pub version: u32,
    pub kind: Kind,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensors: Option<Vec<TensorEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Header {
    pub fn new(kind: Kind, dtype: Dtype) -> Self {
        Header {
            magic: MAGIC.to_string(),
            version: VERSION,
            kind,
            dtype,
            shape: None,
            spacing: None,
            classes: None,
            tensors: None,
            meta: None,
        }
    }

    /// Number of payload values implied by the header.
    pub fn expected_values(&self) -> Result<usize> {
        if let Some(shape) = self.shape {
            return Ok(shape.iter().product());
        }
        if let Some(tensors) = &self.tensors {
            return Ok(tensors.iter().map(|t| t.len).sum());
        }
        Err(Error::Format("header declares neither shape nor tensors".into()))
    }
}

pub fn encode(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.extend_from_slice(SENTINEL);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits a container into its header and payload, checking magic, version,
/// sentinel and payload length.
pub fn decode(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let prefix = format!("{{\"magic\":\"{MAGIC}\"");
    if !bytes.starts_with(prefix.as_bytes()) {
        return Err(Error::Format("missing container magic".into()));
    }
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} (expected {VERSION})",
            header.version
        )));
    }
    let rest = &bytes[newline + 1..];
    if !rest.starts_with(SENTINEL) {
        return Err(Error::Format("missing payload sentinel".into()));
    }
    let payload = &rest[SENTINEL.len()..];
    let expected = header.expected_values()? * header.dtype.size();
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "payload holds {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    Ok((header, payload))
}

pub fn read(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let (header, payload) = decode(&bytes)?;
    Ok((header, payload.to_vec()))
}

pub fn write(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    std::fs::write(path, encode(header, payload)?)?;
    Ok(())
}

pub fn f32_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn bytes_to_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_missing_magic() {
        let err = decode(b"{\"version\":1}\n%%payload%%\n").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn rejects_missing_sentinel() {
        let mut header = Header::new(Kind::Labels, Dtype::U8);
        header.shape = Some([1, 1, 1]);
        let mut bytes = serde_json::to_vec(&header).unwrap();
        bytes.extend_from_slice(b"\n\x00");
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn header_is_single_line_with_magic_first() {
        let mut header = Header::new(Kind::Intensity, Dtype::F32le);
        header.shape = Some([2, 3, 4]);
        header.spacing = Some([1.0, 0.5, 3.0]);
        let bytes = encode(&header, &[0u8; 96]).unwrap();
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]);
        assert!(text.starts_with("{\"magic\":\"advnorm-mvol\""));
        let (decoded, payload) = decode(&bytes).unwrap();
        assert_eq!(decoded, header);
        assert_eq!(payload.len(), 96);
    }
}
