//! Dataset and artifact persistence.

mod checkpoint;
mod corpus;
mod embeddings;
mod sampler;
mod split;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use corpus::{load_corpus, parse_corpus, write_corpus, CorpusLoad, CorpusRecord, LineError, CORPUS_HEADER};
pub use embeddings::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, EmbeddingFile, EmbeddingRecord,
    EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use sampler::{BalancedSampler, Draw};
pub use split::{split_dataset, SplitSpec};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
