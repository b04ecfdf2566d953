//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `BNASCKPT` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `L` in bytes (`u64`) |
//! | L     | header: compact JSON with sorted keys, UTF-8 |
//! | ...   | tensor payloads as `f32`, concatenated in manifest order |
//!
//! The header object always has a `tensors` array of `{name, shape}`
//! entries describing the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BNASCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Encodes a header object and named tensors.
pub fn encode(header: &Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let Value::Object(map) = header else {
        return Err(Error::Format("checkpoint header must be a JSON object".into()));
    };
    if map.contains_key("tensors") {
        return Err(Error::Format("checkpoint header key `tensors` is reserved".into()));
    }
    let manifest: Vec<ManifestEntry> = tensors
        .iter()
        .map(|(n, t)| ManifestEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let mut full = map.clone();
    full.insert("tensors".into(), serde_json::to_value(manifest)?);
    let text = serde_json::to_string(&Value::Object(full))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(20 + text.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a container into its header (without `tensors`) and tensors.
pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor)>)> {
    let fail = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(fail("truncated header"));
    }
    let mut header: Value = serde_json::from_slice(&body[..len])?;
    let manifest: Vec<ManifestEntry> = match header.as_object_mut().and_then(|m| m.remove("tensors")) {
        Some(v) => serde_json::from_value(v)?,
        None => return Err(fail("missing tensor manifest")),
    };
    let mut payload = &body[len..];
    let mut tensors = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let n: usize = entry.shape.iter().product();
        if payload.len() < n * 4 {
            return Err(fail(&format!("truncated payload at `{}`", entry.name)));
        }
        let data = payload[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        payload = &payload[n * 4..];
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    if !payload.is_empty() {
        return Err(fail("trailing bytes after payload"));
    }
    Ok((header, tensors))
}

/// Hex SHA-256 of a byte string, used to identify checkpoint files.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file so a crash never leaves a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
