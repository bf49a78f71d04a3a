use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CORPUS_HEADER: &str = "meshgen-corpus v1";

/// One exam: report text, raw MeSH annotation and image identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub exam_id: String,
    pub report_text: String,
    pub mesh_raw: String,
    pub image_refs: Vec<String>,
}

/// A skipped line and the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusLoad {
    pub records: Vec<CorpusRecord>,
    pub skipped: Vec<LineError>,
}

pub fn load_corpus(path: &Path) -> Result<CorpusLoad> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

/// Parses the tab-separated corpus format. Malformed lines are skipped
/// and reported; a bad header or a duplicate exam id fails the whole file.
pub fn parse_corpus(text: &str) -> Result<CorpusLoad> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CORPUS_HEADER => {}
        Some(h) => return Err(Error::Format(format!("expected header '{CORPUS_HEADER}', found '{h}'"))),
        None => return Err(Error::Format("empty corpus file".into())),
    }
    let mut out = CorpusLoad::default();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            out.skipped.push(LineError {
                line: line_no,
                reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
            continue;
        }
        let exam_id = fields[0].trim();
        if exam_id.is_empty() {
            out.skipped.push(LineError {
                line: line_no,
                reason: "empty exam id".into(),
            });
            continue;
        }
        if !seen.insert(exam_id.to_string()) {
            return Err(Error::Format(format!(
                "duplicate exam id '{exam_id}' on line {line_no}"
            )));
        }
        out.records.push(CorpusRecord {
            exam_id: exam_id.to_string(),
            report_text: fields[1].to_string(),
            mesh_raw: fields[2].to_string(),
            image_refs: fields[3]
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
        });
    }
    for e in &out.skipped {
        log::warn!("corpus line {}: {}", e.line, e.reason);
    }
    Ok(out)
}

fn clean(field: &str) -> String {
    field.replace(['\t', '\n', '\r'], " ")
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut out = String::from(CORPUS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            clean(&r.exam_id),
            clean(&r.report_text),
            clean(&r.mesh_raw),
            r.image_refs.iter().map(|s| clean(s)).collect::<Vec<_>>().join(",")
        ));
    }
    super::write_atomic(path, out.as_bytes())
}
