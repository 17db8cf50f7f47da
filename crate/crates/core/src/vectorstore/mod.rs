//! Exact vector search over embedded chunks with metadata pre-filtering.
//!
//! Vectors live in one contiguous buffer, `dims` values per record. Queries
//! narrow the candidates by metadata first and only then rank the survivors,
//! so a chunk from the wrong contract can never crowd out the right one no
//! matter how similar its wording is.

mod persist;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::ingest::{Chunk, ChunkMetadata, Overlap};

pub use persist::{FORMAT_VERSION, MAGIC};

pub const DEFAULT_K: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum VectorStoreError {
    #[error("expected {expected} dimensions, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("chunk `{0}` has no embedding")]
    MissingEmbedding(String),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("corrupt index file: {0}")]
    CorruptIndexFile(String),
    #[error("index i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
    Manhattan,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cosine, Metric::Euclidean, Metric::Manhattan];

    /// Cosine is a similarity (higher is better); the others are distances.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Cosine)
    }

    fn to_byte(self) -> u8 {
        match self {
            Metric::Cosine => 0,
            Metric::Euclidean => 1,
            Metric::Manhattan => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.to_byte() == b)
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            "manhattan" => Ok(Metric::Manhattan),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

fn score_slices(a: &[f64], b: &[f64], metric: Metric) -> Result<f64, VectorStoreError> {
    if a.len() != b.len() {
        return Err(VectorStoreError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(match metric {
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(VectorStoreError::ZeroVector);
            }
            dot / (na.sqrt() * nb.sqrt())
        }
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
    })
}

/// Similarity (cosine) or distance (euclidean, manhattan) between two vectors.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector, metric: Metric) -> Result<f64, VectorStoreError> {
    score_slices(a.values(), b.values(), metric)
}

/// Orders two scored candidates best-first with ties broken by ascending id.
pub fn rank_order(metric: Metric, a: (f64, &str), b: (f64, &str)) -> Ordering {
    let by_score = if metric.higher_is_better() {
        b.0.total_cmp(&a.0)
    } else {
        a.0.total_cmp(&b.0)
    };
    by_score.then_with(|| a.1.cmp(b.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetadataField {
    Source,
    Contract,
    Clause,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClauseMatch {
    #[default]
    Exact,
    /// Case-insensitive substring.
    Contains,
}

/// Equality constraints over chunk metadata. Empty matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contract: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clause: Option<String>,
    #[serde(default)]
    pub clause_match: ClauseMatch,
}

impl MetadataFilter {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn contract(contract: impl Into<String>) -> Self {
        Self {
            contract: Some(contract.into()),
            ..Self::default()
        }
    }

    pub fn source(source: impl Into<String>) -> Self {
        Self {
            source: Some(source.into()),
            ..Self::default()
        }
    }

    pub fn set(&mut self, field: MetadataField, value: impl Into<String>) {
        let value = Some(value.into());
        match field {
            MetadataField::Source => self.source = value,
            MetadataField::Contract => self.contract = value,
            MetadataField::Clause => self.clause = value,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_none() && self.contract.is_none() && self.clause.is_none()
    }

    pub fn matches(&self, meta: &ChunkMetadata) -> bool {
        let eq = |want: &Option<String>, have: &str| want.as_deref().is_none_or(|w| w == have);
        let clause_ok = match (&self.clause, self.clause_match) {
            (None, _) => true,
            (Some(want), ClauseMatch::Exact) => want == &meta.clause,
            (Some(want), ClauseMatch::Contains) => meta.clause.to_lowercase().contains(&want.to_lowercase()),
        };
        eq(&self.source, &meta.source) && eq(&self.contract, &meta.contract) && clause_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub chunk_id: String,
    pub score: f64,
    pub metric: Metric,
    pub chunk: Chunk,
}

#[derive(Debug, Clone, PartialEq)]
struct Record {
    chunk_id: String,
    text: String,
    metadata: ChunkMetadata,
    overlap: Overlap,
}

/// In-memory exact index. Wrap in a `RwLock` for shared use; every mutating
/// method takes `&mut self` so a batch is applied atomically under one lock.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dims: usize,
    default_metric: Metric,
    records: Vec<Record>,
    vectors: Vec<f64>,
    by_id: HashMap<String, usize>,
}

impl VectorStore {
    pub fn new(dims: usize) -> Self {
        Self::with_metric(dims, Metric::default())
    }

    pub fn with_metric(dims: usize, default_metric: Metric) -> Self {
        Self {
            dims,
            default_metric,
            records: Vec::new(),
            vectors: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn default_metric(&self) -> Metric {
        self.default_metric
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn vector(&self, idx: usize) -> &[f64] {
        &self.vectors[idx * self.dims..(idx + 1) * self.dims]
    }

    fn to_chunk(&self, idx: usize) -> Chunk {
        let r = &self.records[idx];
        Chunk {
            chunk_id: r.chunk_id.clone(),
            text: r.text.clone(),
            metadata: r.metadata.clone(),
            overlap: r.overlap,
            embedding: Some(EmbeddingVector::new(self.vector(idx).to_vec()).expect("stored vectors are finite")),
        }
    }

    pub fn get(&self, chunk_id: &str) -> Option<Chunk> {
        self.by_id.get(chunk_id).map(|&i| self.to_chunk(i))
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.by_id.contains_key(chunk_id)
    }

    /// Inserts or replaces chunks by id. The whole batch is checked before
    /// anything is written.
    pub fn upsert(&mut self, chunks: &[Chunk]) -> Result<usize, VectorStoreError> {
        for chunk in chunks {
            let emb = chunk
                .embedding
                .as_ref()
                .ok_or_else(|| VectorStoreError::MissingEmbedding(chunk.chunk_id.clone()))?;
            if emb.dims() != self.dims {
                return Err(VectorStoreError::DimensionMismatch {
                    expected: self.dims,
                    got: emb.dims(),
                });
            }
        }
        for chunk in chunks {
            let values = chunk.embedding.as_ref().expect("checked above").values();
            let record = Record {
                chunk_id: chunk.chunk_id.clone(),
                text: chunk.text.clone(),
                metadata: chunk.metadata.clone(),
                overlap: chunk.overlap,
            };
            match self.by_id.get(&chunk.chunk_id) {
                Some(&idx) => {
                    self.records[idx] = record;
                    self.vectors[idx * self.dims..(idx + 1) * self.dims].copy_from_slice(values);
                }
                None => {
                    self.by_id.insert(chunk.chunk_id.clone(), self.records.len());
                    self.records.push(record);
                    self.vectors.extend_from_slice(values);
                }
            }
        }
        Ok(chunks.len())
    }

    /// Removes every chunk of `source_id`; returns how many were removed.
    pub fn delete_by_source(&mut self, source_id: &str) -> usize {
        let before = self.records.len();
        let dims = self.dims;
        let mut kept_records = Vec::with_capacity(before);
        let mut kept_vectors = Vec::with_capacity(self.vectors.len());
        for (i, record) in std::mem::take(&mut self.records).into_iter().enumerate() {
            if record.metadata.source != source_id {
                kept_vectors.extend_from_slice(&self.vectors[i * dims..(i + 1) * dims]);
                kept_records.push(record);
            }
        }
        self.records = kept_records;
        self.vectors = kept_vectors;
        self.by_id = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.chunk_id.clone(), i))
            .collect();
        before - self.records.len()
    }

    /// Top-`k` chunks satisfying `filter`, best first.
    pub fn query(
        &self,
        vector: &EmbeddingVector,
        k: usize,
        filter: &MetadataFilter,
        metric: Metric,
    ) -> Result<Vec<SearchHit>, VectorStoreError> {
        if k == 0 {
            return Err(VectorStoreError::InvalidK);
        }
        if vector.dims() != self.dims {
            return Err(VectorStoreError::DimensionMismatch {
                expected: self.dims,
                got: vector.dims(),
            });
        }
        let mut scored = Vec::new();
        for (idx, record) in self.records.iter().enumerate() {
            if filter.matches(&record.metadata) {
                scored.push((score_slices(vector.values(), self.vector(idx), metric)?, idx));
            }
        }
        scored.sort_by(|a, b| {
            rank_order(
                metric,
                (a.0, &self.records[a.1].chunk_id),
                (b.0, &self.records[b.1].chunk_id),
            )
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(score, idx)| SearchHit {
                chunk_id: self.records[idx].chunk_id.clone(),
                score,
                metric,
                chunk: self.to_chunk(idx),
            })
            .collect())
    }

    /// Distinct source ids, sorted.
    pub fn sources(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.metadata.source.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn chunk(id: &str, source: &str, contract: &str, clause: &str, values: &[f64]) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            text: format!("text of {id}"),
            metadata: ChunkMetadata {
                source: source.into(),
                contract: contract.into(),
                clause: clause.into(),
            },
            overlap: Overlap::default(),
            embedding: Some(v(values)),
        }
    }

    #[test]
    fn similarity_examples() {
        let a = v(&[0.3, -1.2, 4.0]);
        assert!((similarity(&a, &a, Metric::Cosine).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), Metric::Cosine).unwrap(), 0.0);
        assert_eq!(similarity(&v(&[1.0, 2.0]), &v(&[4.0, 0.0]), Metric::Manhattan).unwrap(), 5.0);
        assert_eq!(similarity(&v(&[0.0, 0.0]), &v(&[3.0, 4.0]), Metric::Euclidean).unwrap(), 5.0);
    }

    #[test]
    fn similarity_errors() {
        assert_eq!(
            similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]), Metric::Cosine),
            Err(VectorStoreError::ZeroVector)
        );
        assert!(similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]), Metric::Euclidean).is_ok());
        assert!(matches!(
            similarity(&v(&[1.0]), &v(&[1.0, 0.0]), Metric::Manhattan),
            Err(VectorStoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn upsert_is_idempotent() {
        let mut store = VectorStore::new(2);
        let c = chunk("a#0001", "a", "1/2020", "1. X", &[1.0, 0.0]);
        store.upsert(std::slice::from_ref(&c)).unwrap();
        store.upsert(&[c]).unwrap();
        assert_eq!(store.len(), 1);

        let mut replaced = chunk("a#0001", "a", "1/2020", "1. Y", &[0.0, 1.0]);
        replaced.text = "new".into();
        store.upsert(&[replaced.clone()]).unwrap();
        assert_eq!(store.get("a#0001").unwrap(), replaced);
    }

    #[test]
    fn upsert_rejects_wrong_dims_atomically() {
        let mut store = VectorStore::new(16);
        let good = chunk("a#0001", "a", "1/2020", "x", &[1.0; 16]);
        let bad = chunk("a#0002", "a", "1/2020", "x", &[1.0; 8]);
        assert_eq!(
            store.upsert(&[good, bad]),
            Err(VectorStoreError::DimensionMismatch { expected: 16, got: 8 })
        );
        assert!(store.is_empty());
    }

    #[test]
    fn filter_applies_before_ranking() {
        let mut store = VectorStore::new(2);
        store
            .upsert(&[
                chunk("wrong#0001", "wrong", "456/2023", "2. MANAGER", &[1.0, 0.0]),
                chunk("right#0001", "right", "123/2024", "2. MANAGER", &[0.6, 0.8]),
            ])
            .unwrap();
        let probe = v(&[1.0, 0.0]);
        // Rank-then-filter with k=1 would keep only the wrong chunk and then drop it.
        let hits = store
            .query(&probe, 1, &MetadataFilter::contract("123/2024"), Metric::Cosine)
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].chunk_id, "right#0001");
    }

    #[test]
    fn k_larger_than_population_and_ties() {
        let mut store = VectorStore::new(2);
        store
            .upsert(&[
                chunk("b", "s", "1/2020", "x", &[1.0, 0.0]),
                chunk("a", "s", "1/2020", "x", &[1.0, 0.0]),
                chunk("c", "s", "1/2020", "x", &[0.0, 1.0]),
            ])
            .unwrap();
        let hits = store.query(&v(&[1.0, 0.0]), 10, &MetadataFilter::any(), Metric::Euclidean).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.chunk_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(matches!(
            store.query(&v(&[1.0, 0.0]), 0, &MetadataFilter::any(), Metric::Cosine),
            Err(VectorStoreError::InvalidK)
        ));
    }

    #[test]
    fn clause_substring_filter() {
        let meta = ChunkMetadata {
            source: "s".into(),
            contract: "1/2020".into(),
            clause: "2. CONTRACT MANAGER".into(),
        };
        let mut f = MetadataFilter::any();
        f.set(MetadataField::Clause, "manager");
        assert!(!f.matches(&meta));
        f.clause_match = ClauseMatch::Contains;
        assert!(f.matches(&meta));
        assert!(MetadataFilter::any().matches(&meta));
    }

    #[test]
    fn delete_by_source() {
        let mut store = VectorStore::new(2);
        store
            .upsert(&[
                chunk("a#1", "a", "1/2020", "x", &[1.0, 0.0]),
                chunk("b#1", "b", "2/2020", "x", &[0.0, 1.0]),
                chunk("a#2", "a", "1/2020", "y", &[1.0, 1.0]),
            ])
            .unwrap();
        assert_eq!(store.delete_by_source("missing"), 0);
        assert_eq!(store.delete_by_source("a"), 2);
        assert_eq!(store.len(), 1);
        let hits = store.query(&v(&[1.0, 0.0]), 4, &MetadataFilter::source("a"), Metric::Cosine).unwrap();
        assert!(hits.is_empty());
        assert_eq!(store.get("b#1").unwrap().embedding.unwrap().values(), &[0.0, 1.0]);
    }
}
