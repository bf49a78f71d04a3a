//! Report and MeSH annotation normalisation.
//!
//! Raw report text is segmented on `.`, `;` and `:` before any punctuation
//! is stripped, so negation scope stays at the clause level. Segments that
//! contain a negation cue are dropped whole; the remainder is normalised,
//! tokenised and cropped or padded to a fixed length.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Default report length in tokens.
pub const REPORT_LEN: usize = 32;
/// Default MeSH caption length in terms.
pub const CAPTION_LEN: usize = 5;

pub const DEFAULT_NEGATION_CUES: [&str; 9] = [
    "no",
    "not",
    "without",
    "negative for",
    "free of",
    "clear of",
    "absence of",
    "within normal limits",
    "unremarkable",
];

/// Lower-cases, maps everything outside `[a-z0-9 ]` to a space and
/// collapses whitespace.
pub fn normalize_text(raw: &str) -> String {
    let mapped: String = raw
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() {
                c
            } else {
                ' '
            }
        })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits raw text on `.`, `;`, `:` and normalises each piece; empty
/// pieces are dropped.
pub fn segment(raw: &str) -> Vec<String> {
    raw.split(['.', ';', ':'])
        .map(normalize_text)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Clause-level negation removal driven by a configurable cue list.
#[derive(Debug, Clone)]
pub struct NegationFilter {
    cues: Vec<String>,
    pattern: Regex,
}

impl Default for NegationFilter {
    fn default() -> Self {
        Self::new(DEFAULT_NEGATION_CUES.iter().map(|s| s.to_string())).expect("default cues are valid")
    }
}

impl NegationFilter {
    /// Cues are normalised first; multi-word cues match across any run of spaces.
    pub fn new(cues: impl IntoIterator<Item = String>) -> Result<Self> {
        let cues: Vec<String> = cues
            .into_iter()
            .map(|c| normalize_text(&c))
            .filter(|c| !c.is_empty())
            .collect();
        if cues.is_empty() {
            return Err(Error::Contract("negation cue list is empty".into()));
        }
        let alternatives: Vec<String> = cues
            .iter()
            .map(|c| c.split(' ').map(regex::escape).collect::<Vec<_>>().join(r"\s+"))
            .collect();
        let pattern = Regex::new(&format!(r"\b(?:{})\b", alternatives.join("|")))
            .map_err(|e| Error::Contract(format!("bad negation cue: {e}")))?;
        Ok(Self { cues, pattern })
    }

    pub fn cues(&self) -> &[String] {
        &self.cues
    }

    /// Whether a normalised segment carries a negation cue.
    pub fn is_negated(&self, segment: &str) -> bool {
        self.pattern.is_match(segment)
    }

    /// Normalised segments of `raw` that carry no negation cue.
    pub fn kept_segments(&self, raw: &str) -> Vec<String> {
        segment(raw).into_iter().filter(|s| !self.is_negated(s)).collect()
    }

    pub fn remove(&self, raw: &str) -> String {
        self.kept_segments(raw).join(" ")
    }
}

/// [`NegationFilter::remove`] with the default cue list.
pub fn remove_negations(raw: &str) -> String {
    NegationFilter::default().remove(raw)
}

/// Token ↔ id mapping with ids 0..4 reserved for PAD, START, END and UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("reserved tokens are distinct")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(all: Vec<String>) -> Result<Self> {
        if all.len() < RESERVED.len() || all[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary lacks reserved tokens".into()));
        }
        Self::from_tokens(all.into_iter().skip(RESERVED.len()))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in the given order.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
        {
            if vocab.index.contains_key(&t) {
                return Err(Error::Format(format!("duplicate vocabulary token '{t}'")));
            }
            vocab.index.insert(t.clone(), vocab.tokens.len());
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    /// Counts tokens and keeps those seen at least `min_count` times,
    /// ordered by descending count then lexicographically.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t)).expect("counted tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Fixed-length token-id sequence for one report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedReport {
    pub ids: Vec<usize>,
    pub original_length: usize,
}

pub fn tokenize_and_pad(text: &str, vocab: &Vocabulary, length: usize) -> TokenizedReport {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    pad_ids(tokens.iter().map(|t| vocab.id(t)), tokens.len(), length)
}

/// Crops or right-pads an id stream to `length`.
pub fn pad_ids(ids: impl IntoIterator<Item = usize>, original_length: usize, length: usize) -> TokenizedReport {
    let mut ids: Vec<usize> = ids.into_iter().take(length).collect();
    ids.resize(length, PAD);
    TokenizedReport { ids, original_length }
}

/// One structured concept caption: a pathology followed by descriptors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeshAnnotation {
    pub pathology: String,
    pub descriptors: Vec<String>,
}

impl MeshAnnotation {
    pub fn new(pathology: impl Into<String>, descriptors: Vec<String>) -> Self {
        Self {
            pathology: pathology.into(),
            descriptors,
        }
    }

    /// Pathology then descriptors.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.pathology.as_str()).chain(self.descriptors.iter().map(String::as_str))
    }

    /// `[pathology, descriptors..., PAD...]` cropped or padded to `length`.
    pub fn flatten(&self, vocab: &Vocabulary, length: usize) -> Vec<usize> {
        let n = self.descriptors.len() + 1;
        pad_ids(self.terms().map(|t| vocab.id(t)), n, length).ids
    }

    /// Parses a single `pathology/descriptor/...` caption.
    pub fn parse(raw: &str) -> Option<Self> {
        let mut fields = raw.split('/').map(normalize_text).filter(|f| !f.is_empty());
        let pathology = fields.next()?;
        Some(Self {
            pathology,
            descriptors: fields.collect(),
        })
    }
}

impl fmt::Display for MeshAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pathology)?;
        for d in &self.descriptors {
            write!(f, "/{d}")?;
        }
        Ok(())
    }
}

/// Parses `Pathology/desc/desc, Pathology/desc` into captions.
pub fn parse_mesh(raw: &str) -> Vec<MeshAnnotation> {
    raw.split(',').filter_map(MeshAnnotation::parse).collect()
}

/// Inverse of [`parse_mesh`] on normalised captions.
pub fn format_mesh(captions: &[MeshAnnotation]) -> String {
    captions.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Corpus frequency of each pathology term.
pub type PathologyCounts = BTreeMap<String, usize>;

pub fn pathology_counts<'a>(captions: impl IntoIterator<Item = &'a MeshAnnotation>) -> PathologyCounts {
    let mut counts = PathologyCounts::new();
    for c in captions {
        *counts.entry(c.pathology.clone()).or_default() += 1;
    }
    counts
}

/// The caption whose pathology is most frequent in the corpus. Ties go to
/// the lexicographically smaller pathology, then to the earlier caption.
pub fn select_primary_annotation<'a>(
    captions: &'a [MeshAnnotation],
    counts: &PathologyCounts,
) -> Result<&'a MeshAnnotation> {
    let freq = |c: &MeshAnnotation| counts.get(&c.pathology).copied().unwrap_or(0);
    let mut best = captions
        .first()
        .ok_or_else(|| Error::Contract("no captions to select from".into()))?;
    for c in &captions[1..] {
        let better = freq(c) > freq(best) || (freq(c) == freq(best) && c.pathology < best.pathology);
        if better {
            best = c;
        }
    }
    Ok(best)
}

/// Class index space over MeSH terms (no reserved slots).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TermIndex {
    terms: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TermIndex {
    fn from(terms: Vec<String>) -> Self {
        let mut out = Self {
            terms: Vec::new(),
            index: HashMap::new(),
        };
        for t in terms {
            if !out.index.contains_key(&t) {
                out.index.insert(t.clone(), out.terms.len());
                out.terms.push(t);
            }
        }
        out
    }
}

impl From<TermIndex> for Vec<String> {
    fn from(t: TermIndex) -> Self {
        t.terms
    }
}

impl TermIndex {
    /// Keeps at most `max_classes` terms, most frequent first, ties
    /// lexicographic.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a MeshAnnotation>, max_classes: Option<usize>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for c in captions {
            for t in c.terms() {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if let Some(k) = max_classes {
            ranked.truncate(k);
        }
        ranked
            .into_iter()
            .map(|(t, _)| t.to_string())
            .collect::<Vec<_>>()
            .into()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn get(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn term(&self, class: usize) -> Option<&str> {
        self.terms.get(class).map(String::as_str)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }
}

/// Binary multi-label target over a [`TermIndex`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector(Vec<bool>);

impl LabelVector {
    pub fn zeros(k: usize) -> Self {
        Self(vec![false; k])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn set(&mut self, j: usize) {
        self.0[j] = true;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Marks every term of every caption. Returns the vector and the number
/// of terms missing from the index.
pub fn to_label_vector(captions: &[MeshAnnotation], terms: &TermIndex) -> (LabelVector, usize) {
    let mut labels = LabelVector::zeros(terms.len());
    let mut unknown = 0;
    for t in captions.iter().flat_map(MeshAnnotation::terms) {
        match terms.get(t) {
            Some(j) => labels.set(j),
            None => unknown += 1,
        }
    }
    if unknown > 0 {
        log::debug!("{unknown} MeSH term(s) outside the class index were ignored");
    }
    (labels, unknown)
}
