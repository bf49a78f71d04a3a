//! Versioned, checksummed model checkpoints.
//!
//! ```text
//! "MGCKPT" | u32 version | u64 meta_len | meta (JSON) | f64 values... | sha256
//! ```
//! The trailing SHA-256 covers every preceding byte and is verified
//! before anything is parsed, so a damaged file never yields a model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 6 + 4 + 8;
const DIGEST_LEN: usize = 32;

/// Model-agnostic checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `"textcnn"`.
    pub kind: String,
    /// Configuration, vocabularies and any other metadata.
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        kind: ckpt.kind.clone(),
        meta: ckpt.meta.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(n, t)| TensorMeta {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let n_values: usize = ckpt.tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + n_values * 8 + DIGEST_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::Corruption {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        if bytes.len() < CHECKPOINT_MAGIC.len() && CHECKPOINT_MAGIC.starts_with(bytes) {
            return Err(corrupt(bytes.len(), "truncated magic"));
        }
        return Err(Error::Format("not a checkpoint (magic mismatch)".into()));
    }
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(corrupt(bytes.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, supported {CHECKPOINT_VERSION}"
        )));
    }
    let body_end = bytes.len() - DIGEST_LEN;
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(corrupt(body_end, "checksum mismatch"));
    }
    let meta_len = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
    if meta_len > body_end - HEADER_LEN {
        return Err(corrupt(HEADER_LEN, "metadata length exceeds file"));
    }
    let header: Header = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + meta_len])
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let mut pos = HEADER_LEN + meta_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for tm in header.tensors {
        let n: usize = tm.shape.iter().product();
        if (body_end - pos) / 8 < n {
            return Err(corrupt(pos, format!("tensor '{}' runs past the end", tm.name)));
        }
        let data = bytes[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += n * 8;
        let t = Tensor::new(tm.shape, data).map_err(|e| Error::Format(e.to_string()))?;
        tensors.push((tm.name, t));
    }
    if pos != body_end {
        return Err(corrupt(pos, "unexpected bytes after tensor data"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    super::write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
