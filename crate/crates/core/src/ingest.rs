//! Clause-aligned chunking of pre-extracted contract text.
//!
//! A document is split at lines that look like section headings. Each chunk
//! holds one clause (heading line plus body); text before the first heading
//! is kept with the first clause so nothing is lost. Optionally each chunk is
//! framed with the headings of its neighbouring clauses.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;

/// Clause label used when no heading is found.
pub const FULL_DOCUMENT: &str = "FULL_DOCUMENT";

/// Default heading patterns, tried in order against each line.
pub const DEFAULT_HEADING_PATTERNS: &[&str] = &[r"^\s*(\d+(\.\d+)*)[.)-]\s+[A-Z]", r"(?i)^\s*CLAUSE\s+\w+"];

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("invalid document `{source_id}`: {reason}")]
    InvalidDocument { source_id: String, reason: String },
    #[error("chunk `{chunk_id}` does not belong to source `{source_id}`")]
    MetadataMismatch { chunk_id: String, source_id: String },
    #[error("invalid heading pattern `{pattern}`: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("duplicate source_id `{0}` in corpus")]
    DuplicateSource(String),
    #[error("reading {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSource {
    pub source_id: String,
    pub contract_number: String,
    pub raw_text: String,
}

fn contract_number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d+/\d{4}$").unwrap())
}

/// `true` when `s` has the `NNN/YYYY` shape.
pub fn is_contract_number(s: &str) -> bool {
    contract_number_re().is_match(s)
}

impl DocumentSource {
    pub fn new(
        source_id: impl Into<String>,
        contract_number: impl Into<String>,
        raw_text: impl Into<String>,
    ) -> Result<Self, IngestError> {
        let doc = Self {
            source_id: source_id.into(),
            contract_number: contract_number.into(),
            raw_text: raw_text.into(),
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let fail = |reason: &str| IngestError::InvalidDocument {
            source_id: self.source_id.clone(),
            reason: reason.to_string(),
        };
        if self.source_id.trim().is_empty() {
            return Err(fail("source_id is empty"));
        }
        if !is_contract_number(&self.contract_number) {
            return Err(fail("contract_number must look like NNN/YYYY"));
        }
        if self.raw_text.trim().is_empty() {
            return Err(fail("raw_text is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMetadata {
    pub source: String,
    pub contract: String,
    pub clause: String,
}

/// Byte lengths of the neighbour-heading context framing a chunk's body.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub prefix_len: usize,
    pub suffix_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub text: String,
    pub metadata: ChunkMetadata,
    #[serde(default)]
    pub overlap: Overlap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

impl Chunk {
    /// The clause text without the neighbour-heading framing.
    pub fn body(&self) -> &str {
        &self.text[self.overlap.prefix_len..self.text.len() - self.overlap.suffix_len]
    }
}

/// Deterministic id for the `ordinal`-th (1-based) clause of a source.
pub fn chunk_id(source_id: &str, ordinal: usize) -> String {
    format!("{source_id}#{ordinal:04}")
}

#[derive(Debug, Clone)]
pub struct SegmentationConfig {
    heading_patterns: Vec<Regex>,
    pub neighbor_overlap: bool,
}

impl SegmentationConfig {
    pub fn new<S: AsRef<str>>(patterns: &[S], neighbor_overlap: bool) -> Result<Self, IngestError> {
        let heading_patterns = patterns
            .iter()
            .map(|p| {
                RegexBuilder::new(p.as_ref())
                    .build()
                    .map_err(|e| IngestError::InvalidPattern {
                        pattern: p.as_ref().to_string(),
                        reason: e.to_string(),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            heading_patterns,
            neighbor_overlap,
        })
    }

    pub fn with_overlap(mut self, neighbor_overlap: bool) -> Self {
        self.neighbor_overlap = neighbor_overlap;
        self
    }

    fn is_heading(&self, line: &str) -> bool {
        self.heading_patterns.iter().any(|re| re.is_match(line))
    }
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self::new(DEFAULT_HEADING_PATTERNS, true).expect("default patterns compile")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub chunks: Vec<Chunk>,
    pub warnings: Vec<String>,
}

/// Splits `doc` into one chunk per detected clause, in document order.
///
/// Chunks carry only the clause label; [`attach_metadata`] fills in source and
/// contract. A document without headings yields a single `FULL_DOCUMENT`
/// chunk and a warning.
pub fn segment_clauses(doc: &DocumentSource, cfg: &SegmentationConfig) -> Segmentation {
    // (heading, start byte of the heading line)
    let mut boundaries: Vec<(String, usize)> = Vec::new();
    let mut offset = 0;
    for line in doc.raw_text.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if cfg.is_heading(content) {
            boundaries.push((content.trim().to_string(), offset));
        }
        offset += line.len();
    }

    let mut warnings = Vec::new();
    if boundaries.is_empty() {
        warnings.push(format!(
            "no clause boundaries found in `{}`; indexed as a single chunk",
            doc.source_id
        ));
        let chunk = Chunk {
            chunk_id: chunk_id(&doc.source_id, 1),
            text: doc.raw_text.trim().to_string(),
            metadata: ChunkMetadata {
                clause: FULL_DOCUMENT.to_string(),
                ..Default::default()
            },
            overlap: Overlap::default(),
            embedding: None,
        };
        return Segmentation {
            chunks: vec![chunk],
            warnings,
        };
    }

    // Text ahead of the first heading stays with the first clause.
    boundaries[0].1 = 0;
    let ends = boundaries
        .iter()
        .skip(1)
        .map(|(_, start)| *start)
        .chain(std::iter::once(doc.raw_text.len()));

    let chunks = boundaries
        .iter()
        .zip(ends)
        .enumerate()
        .map(|(i, ((heading, start), end))| {
            let body = doc.raw_text[*start..end].trim();
            let (text, overlap) = if cfg.neighbor_overlap {
                frame_with_neighbors(body, i, &boundaries)
            } else {
                (body.to_string(), Overlap::default())
            };
            Chunk {
                chunk_id: chunk_id(&doc.source_id, i + 1),
                text,
                metadata: ChunkMetadata {
                    clause: heading.clone(),
                    ..Default::default()
                },
                overlap,
                embedding: None,
            }
        })
        .collect();

    Segmentation { chunks, warnings }
}

fn frame_with_neighbors(body: &str, index: usize, boundaries: &[(String, usize)]) -> (String, Overlap) {
    let prefix = index
        .checked_sub(1)
        .map(|p| format!("[previous clause: {}]\n", boundaries[p].0))
        .unwrap_or_default();
    let suffix = boundaries
        .get(index + 1)
        .map(|(h, _)| format!("\n[next clause: {h}]"))
        .unwrap_or_default();
    let overlap = Overlap {
        prefix_len: prefix.len(),
        suffix_len: suffix.len(),
    };
    (format!("{prefix}{body}{suffix}"), overlap)
}

/// Stamps every chunk with the document's source and contract number.
pub fn attach_metadata(chunks: Vec<Chunk>, doc: &DocumentSource) -> Result<Vec<Chunk>, IngestError> {
    let prefix = format!("{}#", doc.source_id);
    chunks
        .into_iter()
        .map(|mut chunk| {
            let foreign_source = !chunk.metadata.source.is_empty() && chunk.metadata.source != doc.source_id;
            if !chunk.chunk_id.starts_with(&prefix) || foreign_source {
                return Err(IngestError::MetadataMismatch {
                    chunk_id: chunk.chunk_id,
                    source_id: doc.source_id.clone(),
                });
            }
            chunk.metadata.source = doc.source_id.clone();
            chunk.metadata.contract = doc.contract_number.clone();
            Ok(chunk)
        })
        .collect()
}

/// Segment and stamp in one step.
pub fn chunk_document(doc: &DocumentSource, cfg: &SegmentationConfig) -> Result<Segmentation, IngestError> {
    let Segmentation { chunks, warnings } = segment_clauses(doc, cfg);
    Ok(Segmentation {
        chunks: attach_metadata(chunks, doc)?,
        warnings,
    })
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One manifest record: which file holds which contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub source_id: String,
    pub contract_number: String,
    pub path: String,
}

/// Parses a JSON-lines manifest. Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, IngestError> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(trimmed).map_err(|e| IngestError::Manifest {
            line: line_no,
            reason: e.to_string(),
        })?;
        let bad = |reason: &str| IngestError::Manifest {
            line: line_no,
            reason: reason.to_string(),
        };
        if entry.source_id.trim().is_empty() {
            return Err(bad("source_id is empty"));
        }
        if !is_contract_number(&entry.contract_number) {
            return Err(bad("contract_number must look like NNN/YYYY"));
        }
        if entry.path.trim().is_empty() {
            return Err(bad("path is empty"));
        }
        if !seen.insert(entry.source_id.clone()) {
            return Err(bad(&format!("duplicate source_id `{}`", entry.source_id)));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Reads every document named by the manifest, resolving paths against `docs_dir`.
pub fn load_corpus(docs_dir: &Path, manifest: &[ManifestEntry]) -> Result<Vec<DocumentSource>, IngestError> {
    manifest
        .iter()
        .map(|entry| {
            let path = docs_dir.join(&entry.path);
            let raw_text = fs::read_to_string(&path).map_err(|e| IngestError::Io {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            DocumentSource::new(&entry.source_id, &entry.contract_number, raw_text)
        })
        .collect()
}
