//! Binary image-embedding file.
//!
//! ```text
//! "IMEMB1" | u32 version=1 | u32 count | u32 dim
//! per record: u16 id_len | id (UTF-8) | dim × f32
//! ```
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 6] = b"IMEMB1";
pub const EMBEDDING_VERSION: u32 = 1;
const STANDARD_DIMS: [usize; 2] = [2048, 4096];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingFile {
    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

pub fn encode_embeddings(file: &EmbeddingFile) -> Result<Vec<u8>> {
    let dim = u32::try_from(file.dim).map_err(|_| Error::Contract("embedding dim too large".into()))?;
    let count = u32::try_from(file.records.len()).map_err(|_| Error::Contract("too many embedding records".into()))?;
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(18 + file.records.len() * (file.dim * 4 + 16));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for r in &file.records {
        if r.values.len() != file.dim {
            return Err(Error::dim("write_embeddings", &[file.dim], &[r.values.len()]));
        }
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Contract(format!("duplicate embedding id '{}'", r.id)));
        }
        let len = u16::try_from(r.id.len())
            .map_err(|_| Error::Contract(format!("embedding id too long: {} bytes", r.id.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption {
                offset: self.pos as u64,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(EMBEDDING_MAGIC.len(), "magic")?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::Format("not an embedding file (magic mismatch)".into()));
    }
    let version = cur.u32("version")?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!(
            "embedding file version {version}, supported {EMBEDDING_VERSION}"
        )));
    }
    let count = cur.u32("record count")? as usize;
    let dim = cur.u32("dimension")? as usize;
    if dim == 0 {
        return Err(Error::Format("embedding dimension is zero".into()));
    }
    if !STANDARD_DIMS.contains(&dim) {
        log::warn!("embedding dim {dim} is neither 2048 nor 4096");
    }
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut ids = HashSet::new();
    for _ in 0..count {
        let start = cur.pos as u64;
        let len = cur.u16("id length")? as usize;
        let id = std::str::from_utf8(cur.take(len, "id")?)
            .map_err(|_| Error::Corruption {
                offset: start,
                reason: "record id is not UTF-8".into(),
            })?
            .to_string();
        let raw = cur.take(dim * 4, "vector")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !ids.insert(id.clone()) {
            return Err(Error::Format(format!("duplicate embedding id '{id}'")));
        }
        records.push(EmbeddingRecord { id, values });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corruption {
            offset: cur.pos as u64,
            reason: format!("{} trailing bytes after last record", bytes.len() - cur.pos),
        });
    }
    Ok(EmbeddingFile { dim, records })
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    super::write_atomic(path, &encode_embeddings(file)?)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}
