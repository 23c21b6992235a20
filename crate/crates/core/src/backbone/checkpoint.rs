//! Checkpoint container: `b"VPL1"`, a little-endian `u64` header length, a
//! JSON header, then the tensors as little-endian `f32`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"VPL1";
const VERSION: u32 = 1;

/// Location of one tensor in the payload; `offset` counts `f32` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<M> {
    version: u32,
    meta: M,
    tensors: Vec<TensorEntry>,
}

pub fn encode_container<M: Serialize>(meta: &M, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header { version: VERSION, meta, tensors: entries })?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<(String, Tensor)>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing VPL1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(12..).ok_or_else(|| bad("truncated header"))?;
    if hlen > body.len() {
        return Err(bad("truncated header"));
    }
    let header: Header<M> = serde_json::from_slice(&body[..hlen])?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let payload = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || (e.offset + n) * 4 > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {} lies outside the payload", e.name)));
        }
        let data = payload[e.offset * 4..(e.offset + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        expected_offset += n;
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    if expected_offset * 4 != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((header.meta, tensors))
}

/// Hex SHA-256 of checkpoint bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_file_hashed(path: &Path) -> Result<(Vec<u8>, String)> {
    let bytes = std::fs::read(path)?;
    let hash = content_hash(&bytes);
    Ok((bytes, hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let bytes = encode_container(&"m", &[("a", &t)]).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_container::<String>(&wrong).is_err());
        assert!(decode_container::<String>(&bytes[..bytes.len() - 1]).is_err());
        let (m, ts) = decode_container::<String>(&bytes).unwrap();
        assert_eq!(m, "m");
        assert_eq!(ts[0].1.data(), &[1.0, 2.0]);
    }
}
