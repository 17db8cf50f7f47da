//! Text embedding providers.
//!
//! [`LocalEmbedder`] is a deterministic hashed character-trigram embedder that
//! needs no network; [`RemoteEmbedder`] talks to an HTTP embedding endpoint
//! that accepts `{"model", "input": [..]}` and answers
//! `{"data": [{"index", "embedding": [..]}]}`.

use std::fmt;
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::remote::{retriable_status, scrub, Attempt, InFlightLimit, RetryPolicy};

pub const DEFAULT_DIMS: usize = 1536;
pub const MIN_DIMS: usize = 8;
const REMOTE_BATCH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider unavailable after {attempts} attempt(s): {reason}")]
    ProviderUnavailable { attempts: u32, reason: String },
    #[error("embedding provider returned an invalid response: {0}")]
    InvalidResponse(String),
    #[error("expected {expected}-dimensional embedding, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("input {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<EmbeddingError>,
    },
    #[error("invalid embedder configuration: {0}")]
    InvalidConfig(String),
}

/// Fixed-dimension vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::DimensionMismatch { expected: 1, got: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbeddingError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

pub trait Embedder: Send + Sync {
    fn dims(&self) -> usize;

    /// Short label for health reporting.
    fn mode(&self) -> &'static str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    /// Order-preserving; element `i` equals `embed(texts[i])`.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.embed(t).map_err(|e| EmbeddingError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hashed character-trigram embedder. A pure function of `(text, dims)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalEmbedder {
    dims: usize,
}

impl LocalEmbedder {
    pub fn new(dims: usize) -> Result<Self, EmbeddingError> {
        if dims < MIN_DIMS {
            return Err(EmbeddingError::InvalidConfig(format!("dims must be >= {MIN_DIMS}")));
        }
        Ok(Self { dims })
    }
}

impl Embedder for LocalEmbedder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn mode(&self) -> &'static str {
        "deterministic-local"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let lowered = text.to_lowercase();
        let padded: Vec<char> = format!(" {} ", lowered.split_whitespace().collect::<Vec<_>>().join(" "))
            .chars()
            .collect();
        let mut buckets = vec![0.0f64; self.dims];
        let mut gram = String::with_capacity(12);
        for window in padded.windows(3) {
            gram.clear();
            gram.extend(window);
            let bucket = (fnv1a64(gram.as_bytes()) % self.dims as u64) as usize;
            buckets[bucket] += 1.0;
        }
        let norm = buckets.iter().map(|v| v * v).sum::<f64>().sqrt();
        buckets.iter_mut().for_each(|v| *v /= norm);
        EmbeddingVector::new(buckets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingProvider {
    Remote,
    DeterministicLocal,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub provider: EmbeddingProvider,
    pub dims: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(skip)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl fmt::Debug for EmbedderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbedderConfig")
            .field("provider", &self.provider)
            .field("dims", &self.dims)
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "[redacted]"))
            .finish()
    }
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self::local(DEFAULT_DIMS)
    }
}

impl EmbedderConfig {
    pub fn local(dims: usize) -> Self {
        Self {
            provider: EmbeddingProvider::DeterministicLocal,
            dims,
            endpoint: None,
            model: None,
            api_key: None,
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            request_timeout_ms: default_timeout_ms(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model: impl Into<String>, dims: usize) -> Self {
        Self {
            provider: EmbeddingProvider::Remote,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            ..Self::local(dims)
        }
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dims < MIN_DIMS {
            return Err(EmbeddingError::InvalidConfig(format!("dims must be >= {MIN_DIMS}")));
        }
        if self.provider == EmbeddingProvider::Remote {
            if self.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(EmbeddingError::InvalidConfig("remote provider needs an endpoint".into()));
            }
            if self.model.as_deref().is_none_or(str::is_empty) {
                return Err(EmbeddingError::InvalidConfig("remote provider needs a model name".into()));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbeddingError> {
        self.validate()?;
        Ok(match self.provider {
            EmbeddingProvider::DeterministicLocal => Box::new(LocalEmbedder::new(self.dims)?),
            EmbeddingProvider::Remote => Box::new(RemoteEmbedder::new(self.clone())?),
        })
    }
}

pub fn embed_text(text: &str, cfg: &EmbedderConfig) -> Result<EmbeddingVector, EmbeddingError> {
    cfg.build()?.embed(text)
}

pub fn embed_batch(texts: &[&str], cfg: &EmbedderConfig) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    cfg.build()?.embed_batch(texts)
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

pub struct RemoteEmbedder {
    cfg: EmbedderConfig,
    limit: InFlightLimit,
    // Built lazily: a blocking client must not be created on an async runtime thread.
    client: OnceLock<reqwest::blocking::Client>,
}

impl fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteEmbedder").field("cfg", &self.cfg).finish()
    }
}

impl RemoteEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self, EmbeddingError> {
        cfg.validate()?;
        Ok(Self {
            limit: InFlightLimit::new(cfg.max_in_flight),
            cfg,
            client: OnceLock::new(),
        })
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_millis(self.cfg.request_timeout_ms))
                .build()
                .expect("http client")
        })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let endpoint = self.cfg.endpoint.as_deref().unwrap_or_default();
        let model = self.cfg.model.as_deref().unwrap_or_default();
        let secret = self.cfg.api_key.as_deref();
        let body = EmbeddingRequest { model, input: texts };
        let _permit = self.limit.acquire();

        let unavailable = |reason: String| EmbeddingError::ProviderUnavailable { attempts: 0, reason };
        let parsed = self
            .cfg
            .retry
            .run(|_| {
                let mut req = self.client().post(endpoint).json(&body);
                if let Some(key) = secret {
                    req = req.bearer_auth(key);
                }
                match req.send() {
                    Err(e) => Attempt::Retry(unavailable(scrub(&e.to_string(), secret))),
                    Ok(resp) if retriable_status(resp.status().as_u16()) => {
                        Attempt::Retry(unavailable(format!("HTTP {}", resp.status())))
                    }
                    Ok(resp) if !resp.status().is_success() => {
                        Attempt::Fail(EmbeddingError::InvalidResponse(format!("HTTP {}", resp.status())))
                    }
                    Ok(resp) => match resp.json::<EmbeddingResponse>() {
                        Ok(parsed) => Attempt::Done(parsed),
                        Err(e) => Attempt::Fail(EmbeddingError::InvalidResponse(scrub(&e.to_string(), secret))),
                    },
                }
            })
            .map_err(|(err, attempts)| match err {
                EmbeddingError::ProviderUnavailable { reason, .. } => {
                    EmbeddingError::ProviderUnavailable { attempts, reason }
                }
                other => other,
            })?;
        self.decode(parsed, texts.len())
    }

    fn decode(&self, mut parsed: EmbeddingResponse, expected: usize) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if parsed.data.len() != expected {
            return Err(EmbeddingError::InvalidResponse(format!(
                "expected {expected} vectors, got {}",
                parsed.data.len()
            )));
        }
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.cfg.dims {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: self.cfg.dims,
                        got: d.embedding.len(),
                    });
                }
                EmbeddingVector::new(d.embedding)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dims(&self) -> usize {
        self.cfg.dims
    }

    fn mode(&self) -> &'static str {
        "remote"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        Ok(self.request(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::Batch {
                index,
                source: Box::new(EmbeddingError::EmptyText),
            });
        }
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(REMOTE_BATCH) {
            out.extend(self.request(batch)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let e = LocalEmbedder::new(16).unwrap();
        assert_eq!(e.embed("alpha").unwrap(), e.embed("alpha").unwrap());
        for text in ["alpha", "x", "Contract 123/2024 · gestor", "a b c d e f g"] {
            let v = e.embed(text).unwrap();
            assert_eq!(v.dims(), 16);
            assert!((v.l2_norm() - 1.0).abs() < 1e-9, "{text}");
        }
    }

    // Values computed by tests/oracles/ngram_embedding.py.
    #[test]
    fn matches_reference_oracle() {
        let e = LocalEmbedder::new(16).unwrap();
        let v = e.embed("alpha").unwrap();
        let nonzero: Vec<usize> = (0..16).filter(|&i| v.values()[i] != 0.0).collect();
        assert_eq!(nonzero, [0, 2, 6, 11, 12]);
        for i in nonzero {
            assert!((v.values()[i] - 0.4472135954999579).abs() < 1e-15);
        }

        let e = LocalEmbedder::new(1536).unwrap();
        let m = e.embed("contract manager").unwrap();
        let close = cosine(&m, &e.embed("contract manager duties").unwrap());
        let far = cosine(&m, &e.embed("payment schedule").unwrap());
        assert!((close - 0.8340576562282993).abs() < 1e-12);
        assert!((far - 0.0).abs() < 1e-12);
        assert!(close > far);

        let e = LocalEmbedder::new(64).unwrap();
        let m = e.embed("contract manager").unwrap();
        let close = cosine(&m, &e.embed("contract manager duties").unwrap());
        let far = cosine(&m, &e.embed("payment schedule").unwrap());
        assert!((close - 0.8719775384642695).abs() < 1e-12);
        assert!((far - 0.052704627669472995).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_an_error() {
        let e = LocalEmbedder::new(16).unwrap();
        assert_eq!(e.embed("   \n"), Err(EmbeddingError::EmptyText));
        let err = e.embed_batch(&["ok", ""]).unwrap_err();
        assert!(matches!(err, EmbeddingError::Batch { index: 1, .. }));
    }

    #[test]
    fn batch_edge_cases() {
        let cfg = EmbedderConfig::local(16);
        assert!(embed_batch(&[], &cfg).unwrap().is_empty());
        let batch = embed_batch(&["a", "b"], &cfg).unwrap();
        assert_eq!(batch, vec![embed_text("a", &cfg).unwrap(), embed_text("b", &cfg).unwrap()]);
    }

    #[test]
    fn config_validation() {
        assert!(LocalEmbedder::new(4).is_err());
        let mut remote = EmbedderConfig::remote("", "m", 16);
        assert!(remote.validate().is_err());
        remote.endpoint = Some("http://x".into());
        remote.model = None;
        assert!(remote.validate().is_err());
    }

    #[test]
    fn debug_never_prints_api_key() {
        let mut cfg = EmbedderConfig::remote("http://x", "m", 16);
        cfg.api_key = Some("sk-very-secret".into());
        assert!(!format!("{cfg:?}").contains("sk-very-secret"));
        assert!(!serde_json::to_string(&cfg).unwrap().contains("sk-very-secret"));
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert_eq!(EmbeddingVector::new(vec![1.0, f64::NAN]), Err(EmbeddingError::NonFinite));
        assert!(serde_json::from_str::<EmbeddingVector>("[]").is_err());
    }
}
