//! Routing, the RAG/SQL/graph agents, sessions and the orchestrator.

mod engine;
pub mod router;
pub mod session;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structured::ResultTable;
use crate::vectorstore::SearchHit;

pub use engine::{extract_sql, Engine, EngineConfig, IngestSummary, PipelineError, MAX_QUESTION_CHARS, NOT_FOUND_TEXT};
pub use router::{QueryRoute, RoutingRule, RuleTable, Target};
pub use session::{SessionStore, MAX_HISTORY_TURNS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub chunk_id: String,
    pub source: String,
    pub contract: String,
    pub clause: String,
}

impl From<&SearchHit> for Citation {
    fn from(hit: &SearchHit) -> Self {
        let m = &hit.chunk.metadata;
        Self {
            chunk_id: hit.chunk_id.clone(),
            source: m.source.clone(),
            contract: m.contract.clone(),
            clause: m.clause.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartKind {
    Bar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub kind: ChartKind,
    pub title: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    pub value_axis_label: String,
}

impl ChartSpec {
    pub fn is_valid(&self) -> bool {
        self.labels.len() == self.values.len() && self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SqlOutcome {
    Accepted,
    Rejected { error: String },
}

/// One generated statement and what the validator made of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlAttempt {
    pub sql: String,
    #[serde(flatten)]
    pub outcome: SqlOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    InvalidQuestion,
    ProviderUnavailable,
    ProviderError,
    SqlGenerationFailed,
    ExecutionError,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

/// Everything the caller needs to render one answer.
///
/// `chart` is only ever set together with `table`. SQL answers record every
/// generated statement in `sql_attempts` and the statement actually run in
/// `executed_sql`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerEnvelope {
    pub answer_text: String,
    pub citations: Vec<Citation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<ResultTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chart: Option<ChartSpec>,
    pub route: QueryRoute,
    /// Stage name to wall-clock milliseconds.
    pub timings: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_sql: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sql_attempts: Vec<SqlAttempt>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

impl AnswerEnvelope {
    pub fn new(route: QueryRoute, answer_text: impl Into<String>) -> Self {
        Self {
            answer_text: answer_text.into(),
            citations: Vec::new(),
            table: None,
            chart: None,
            route,
            timings: BTreeMap::new(),
            executed_sql: None,
            sql_attempts: Vec::new(),
            warnings: Vec::new(),
            failure: None,
        }
    }

    pub fn failed(route: QueryRoute, kind: FailureKind, message: impl Into<String>) -> Self {
        let message = message.into();
        Self {
            failure: Some(Failure {
                kind,
                message: message.clone(),
            }),
            ..Self::new(route, message)
        }
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no valid SQL statement after {} attempt(s)", attempts.len())]
    SqlGenerationFailed { attempts: Vec<SqlAttempt> },
    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error("retrieval failed: {0}")]
    Retrieval(String),
    #[error("query could not be executed: {message}")]
    Execution { sql: String, message: String },
    #[error("{0}")]
    InvalidQuestion(String),
}
