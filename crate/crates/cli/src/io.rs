//! Plain-text run outputs: caption, label, id and key/value files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use meshgen::data::{parse_corpus, write_atomic, CorpusRecord, CORPUS_HEADER};

use crate::error::{CliError, CliResult};

pub const CAPTIONS_HEADER: &str = "meshgen-captions v1";
pub const LABELS_HEADER: &str = "meshgen-labels v1";

/// Any file `evaluate` accepts.
#[derive(Debug, Clone)]
pub enum Annotated {
    /// `(id, caption)` rows.
    Captions(Vec<(String, String)>),
    /// `(id, terms)` rows.
    Labels(Vec<(String, Vec<String>)>),
    Corpus(Vec<CorpusRecord>),
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))
}

fn rows<'a>(path: &Path, body: impl Iterator<Item = (usize, &'a str)>) -> CliResult<Vec<(String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in body {
        if line.trim().is_empty() {
            continue;
        }
        let (id, value) = line
            .split_once('\t')
            .ok_or_else(|| CliError::data(format!("{}:{}: expected id TAB value", path.display(), n + 1)))?;
        if id.is_empty() {
            return Err(CliError::data(format!("{}:{}: empty id", path.display(), n + 1)));
        }
        if !seen.insert(id.to_string()) {
            return Err(CliError::data(format!("{}: duplicate id '{id}'", path.display())));
        }
        out.push((id.to_string(), value.to_string()));
    }
    Ok(out)
}

pub fn read_annotated(path: &Path) -> CliResult<Annotated> {
    let text = read_text(path)?;
    let header = text.lines().next().unwrap_or("");
    let body = text.lines().enumerate().skip(1);
    match header {
        CAPTIONS_HEADER => Ok(Annotated::Captions(rows(path, body)?)),
        LABELS_HEADER => Ok(Annotated::Labels(
            rows(path, body)?
                .into_iter()
                .map(|(id, v)| {
                    let terms = v
                        .split(',')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(String::from)
                        .collect();
                    (id, terms)
                })
                .collect(),
        )),
        CORPUS_HEADER => {
            let load = parse_corpus(&text)?;
            if let Some(bad) = load.skipped.first() {
                return Err(CliError::data(format!(
                    "{}:{}: {}",
                    path.display(),
                    bad.line,
                    bad.reason
                )));
            }
            Ok(Annotated::Corpus(load.records))
        }
        "" => Err(CliError::data(format!("{} is empty", path.display()))),
        other => Err(CliError::data(format!(
            "{}: unrecognised header '{other}'",
            path.display()
        ))),
    }
}

pub fn write_captions(path: &Path, rows: &[(String, String)]) -> CliResult<()> {
    let mut s = format!("{CAPTIONS_HEADER}\n");
    for (id, caption) in rows {
        let _ = writeln!(s, "{id}\t{caption}");
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

pub fn write_labels(path: &Path, rows: &[(String, Vec<String>)]) -> CliResult<()> {
    let mut s = format!("{LABELS_HEADER}\n");
    for (id, terms) in rows {
        let _ = writeln!(s, "{id}\t{}", terms.join(","));
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

pub fn write_key_values(path: &Path, rows: &[(String, String)]) -> CliResult<()> {
    let mut s = String::new();
    for (k, v) in rows {
        let _ = writeln!(s, "{k}\t{v}");
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// Tab-separated table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut s = header.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

pub fn write_ids(path: &Path, ids: &[String]) -> CliResult<()> {
    let mut s = String::new();
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// One id per line; anything after a TAB is ignored.
pub fn read_ids(path: &Path) -> CliResult<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .filter_map(|l| l.split('\t').next())
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Normalised term list, one per line.
pub fn read_term_list(path: &Path) -> CliResult<Vec<String>> {
    Ok(read_ids(path)?
        .iter()
        .map(|t| meshgen::preprocess::normalize_text(t))
        .filter(|t| !t.is_empty())
        .collect())
}
