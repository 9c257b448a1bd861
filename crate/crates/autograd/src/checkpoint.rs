//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0      4 bytes   magic "RMCK"
//! 4      u32       format version (1)
//! 8      u64       header length H
//! 16     H bytes   UTF-8 JSON header
//! 16+H   ...       payload: raw f32 values, one tensor after another
//! ```
//!
//! The header lists every tensor as `(name, shape, offset, bytes)` with
//! offsets relative to the payload start, a metadata block, and the SHA-256
//! of the payload. Loading verifies the hash, so a truncated or edited file
//! is rejected instead of silently producing different weights.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CheckpointError;
use crate::tensor::{Tensor, TensorMap};

const MAGIC: &[u8; 4] = b"RMCK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub metadata: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

impl CheckpointHeader {
    /// Parameter count implied by the header's shapes.
    pub fn num_params(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

/// SHA-256 of the JSON encoding of any serializable config.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(tensors: &TensorMap, meta: &CheckpointMeta) -> Vec<u8> {
    let mut payload = Vec::with_capacity(tensors.num_params() * 4);
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors.iter() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: payload.len() as u64 - offset,
        });
    }
    let header = CheckpointHeader {
        metadata: meta.clone(),
        tensors: entries,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), CheckpointError> {
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[PREAMBLE..];
    if body.len() < hlen {
        return Err(CheckpointError::Corrupt("header runs past end of file".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
    Ok((header, &body[hlen..]))
}

pub fn decode(bytes: &[u8]) -> Result<(TensorMap, CheckpointMeta), CheckpointError> {
    let (header, payload) = split_header(bytes)?;
    if payload.len() as u64 != header.payload_bytes {
        return Err(CheckpointError::Corrupt(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let actual = hex::encode(Sha256::digest(payload));
    if actual != header.payload_sha256 {
        return Err(CheckpointError::HashMismatch {
            expected: header.payload_sha256,
            actual,
        });
    }
    let mut tensors = TensorMap::new();
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.bytes as usize);
        if len != numel * 4 || start.checked_add(len).map_or(true, |end| end > payload.len()) {
            return Err(CheckpointError::Corrupt(format!("bad extent for `{}`", e.name)));
        }
        let data = payload[start..start + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok((tensors, header.metadata))
}

/// Writes a checkpoint and returns the payload hash recorded in its header.
pub fn save(path: &Path, tensors: &TensorMap, meta: &CheckpointMeta) -> Result<String, CheckpointError> {
    let bytes = encode(tensors, meta);
    let (header, _) = split_header(&bytes)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(header.payload_sha256)
}

pub fn load(path: &Path) -> Result<(TensorMap, CheckpointMeta), CheckpointError> {
    decode(&fs::read(path)?)
}

/// Reads and parses only the header (payload is not hashed).
pub fn read_header(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let bytes = fs::read(path)?;
    Ok(split_header(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (TensorMap, CheckpointMeta) {
        let mut t = TensorMap::new();
        t.insert("b", Tensor::row(&[1.5, -0.0, f32::MIN_POSITIVE]))
            .unwrap();
        t.insert("a", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let meta = CheckpointMeta {
            method: "baseline".into(),
            seed: 9,
            config_hash: "abc".into(),
            extra: BTreeMap::from([("kind".into(), "encoder".into())]),
        };
        (t, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (t, meta) = sample();
        let bytes = encode(&t, &meta);
        let (back, meta2) = decode(&bytes).unwrap();
        assert_eq!(meta, meta2);
        for (name, tensor) in t.iter() {
            let other = back.get(name).unwrap();
            assert_eq!(tensor.shape(), other.shape());
            let a: Vec<u32> = tensor.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = other.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(encode(&back, &meta2), bytes);
    }

    #[test]
    fn file_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (t, meta) = sample();
        let hash = save(&path, &t, &meta).unwrap();
        let header = read_header(&path).unwrap();
        assert_eq!(header.payload_sha256, hash);
        assert_eq!(header.num_params(), 7);
        assert_eq!(header.tensors[0].name, "a");
        assert_eq!(header.tensors[1].offset, 16);
        let (back, _) = load(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corruption_detected() {
        let (t, meta) = sample();
        let mut bytes = encode(&t, &meta);
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(CheckpointError::HashMismatch { .. })));
        bytes.truncate(last);
        assert!(matches!(decode(&bytes), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(decode(b"nope"), Err(CheckpointError::BadMagic)));
    }
}
