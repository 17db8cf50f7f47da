use std::fmt;
use std::sync::{Arc, OnceLock, PoisonError, RwLock, RwLockReadGuard};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    AgentError, AnswerEnvelope, ChartKind, ChartSpec, Citation, FailureKind, QueryRoute, RuleTable, SessionStore,
    SqlAttempt, SqlOutcome, Target,
};
use crate::embedding::{Embedder, EmbeddingError};
use crate::ingest::{chunk_document, DocumentSource, IngestError, SegmentationConfig};
use crate::llm::{ChatModel, CompletionRequest, LlmError, RAG_TEMPERATURE, SQL_TEMPERATURE};
use crate::prompts::{chart_columns, HistoryTurn, PromptBuilder, PromptError, DEFAULT_BUDGET};
use crate::structured::{
    record_chunk, validate_sql, Cell, ContractRecord, ContractStore, ResultTable, StructuredError, DEFAULT_TIMEOUT_MS,
};
use crate::vectorstore::{Metric, VectorStore, VectorStoreError};

pub const NOT_FOUND_TEXT: &str = "The answer was not found in the available documents.";
pub const MAX_QUESTION_CHARS: usize = 4_000;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub k: usize,
    pub metric: Metric,
    pub prompt_budget: usize,
    pub sql_timeout_ms: u64,
    pub segmentation: SegmentationConfig,
    /// Also index every contract row as a text chunk.
    pub flatten_records: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: 4,
            metric: Metric::Cosine,
            prompt_budget: DEFAULT_BUDGET,
            sql_timeout_ms: DEFAULT_TIMEOUT_MS,
            segmentation: SegmentationConfig::default(),
            flatten_records: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    VectorStore(#[from] VectorStoreError),
    #[error(transparent)]
    Structured(#[from] StructuredError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub documents: usize,
    pub chunks: usize,
    pub contract_rows: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} documents, {} chunks, {} contract rows",
            self.documents, self.chunks, self.contract_rows
        )
    }
}

/// Milliseconds with microsecond resolution.
fn ms(d: Duration) -> f64 {
    d.as_micros() as f64 / 1_000.0
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[ \t]*[A-Za-z0-9_-]*[ \t]*\r?\n(.*?)```").unwrap())
}

/// The SQL inside a model reply: the first fenced block, else the text from
/// the first line opening with SELECT or WITH, else the whole reply.
pub fn extract_sql(reply: &str) -> String {
    if let Some(c) = fence_re().captures(reply) {
        return c[1].trim().to_string();
    }
    let lines: Vec<&str> = reply.lines().collect();
    let start = lines.iter().position(|l| {
        let l = l.trim_start().to_ascii_uppercase();
        let l = l.strip_prefix("SQL:").map(str::trim_start).unwrap_or(&l).to_string();
        l.starts_with("SELECT") || l.starts_with("WITH")
    });
    let text = match start {
        Some(i) => lines[i..].join("\n"),
        None => reply.to_string(),
    };
    let text = text.trim();
    text.strip_prefix("SQL:")
        .or_else(|| text.strip_prefix("sql:"))
        .unwrap_or(text)
        .trim()
        .to_string()
}

#[derive(Deserialize)]
struct GraphChoice {
    label_column: String,
    value_column: String,
    #[serde(default)]
    value_axis_label: Option<String>,
}

fn json_object_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\{.*\}").unwrap())
}

pub struct Engine {
    embedder: Box<dyn Embedder>,
    llm: Arc<dyn ChatModel>,
    vectors: RwLock<VectorStore>,
    contracts: ContractStore,
    rules: RuleTable,
    prompts: PromptBuilder,
    sessions: SessionStore,
    config: EngineConfig,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("embedder", &self.embedder.mode())
            .field("llm", &self.llm.mode())
            .field("config", &self.config)
            .finish()
    }
}

impl Engine {
    /// Engine with an empty vector store, the shipped rule table and the bundled prompts.
    pub fn new(embedder: Box<dyn Embedder>, llm: Arc<dyn ChatModel>, contracts: ContractStore) -> Self {
        let dims = embedder.dims();
        Self {
            embedder,
            llm,
            vectors: RwLock::new(VectorStore::new(dims)),
            contracts,
            rules: RuleTable::shipped(),
            prompts: PromptBuilder::default(),
            sessions: SessionStore::default(),
            config: EngineConfig::default(),
        }
    }

    pub fn with_vectors(self, store: VectorStore) -> Result<Self, VectorStoreError> {
        if store.dims() != self.embedder.dims() {
            return Err(VectorStoreError::DimensionMismatch {
                expected: self.embedder.dims(),
                got: store.dims(),
            });
        }
        Ok(Self {
            vectors: RwLock::new(store),
            ..self
        })
    }

    pub fn with_rules(self, rules: RuleTable) -> Self {
        Self { rules, ..self }
    }

    pub fn with_prompts(self, prompts: PromptBuilder) -> Self {
        Self { prompts, ..self }
    }

    pub fn with_config(self, config: EngineConfig) -> Self {
        Self { config, ..self }
    }

    pub fn with_sessions(self, sessions: SessionStore) -> Self {
        Self { sessions, ..self }
    }

    pub fn vectors(&self) -> RwLockReadGuard<'_, VectorStore> {
        self.vectors.read().unwrap_or_else(PoisonError::into_inner)
    }

    pub fn contracts(&self) -> &ContractStore {
        &self.contracts
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    pub fn rules(&self) -> &RuleTable {
        &self.rules
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn llm_mode(&self) -> &'static str {
        self.llm.mode()
    }

    pub fn embedder_mode(&self) -> &'static str {
        self.embedder.mode()
    }

    /// Segments, embeds and indexes `docs`. Re-ingesting a source replaces
    /// its previous chunks, so repeated runs leave the same index.
    pub fn ingest_documents(&self, docs: &[DocumentSource]) -> Result<IngestSummary, PipelineError> {
        let mut summary = IngestSummary {
            documents: docs.len(),
            ..IngestSummary::default()
        };
        let mut prepared = Vec::with_capacity(docs.len());
        for doc in docs {
            let seg = chunk_document(doc, &self.config.segmentation)?;
            summary.warnings.extend(seg.warnings.into_iter().map(|w| format!("{}: {w}", doc.source_id)));
            let mut chunks = seg.chunks;
            let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
            let vectors = self.embedder.embed_batch(&texts)?;
            for (c, v) in chunks.iter_mut().zip(vectors) {
                c.embedding = Some(v);
            }
            summary.chunks += chunks.len();
            prepared.push((doc.source_id.clone(), chunks));
        }
        let mut store = self.vectors.write().unwrap_or_else(PoisonError::into_inner);
        let all: Vec<_> = prepared.iter().flat_map(|(_, c)| c.iter().cloned()).collect();
        // Validate the whole batch before touching existing records.
        let mut staging = VectorStore::with_metric(store.dims(), store.default_metric());
        staging.upsert(&all)?;
        for (source, _) in &prepared {
            store.delete_by_source(source);
        }
        store.upsert(&all)?;
        Ok(summary)
    }

    /// Loads contract rows; with `flatten_records` also indexes them as text.
    pub fn ingest_contracts(&self, records: &[ContractRecord]) -> Result<IngestSummary, PipelineError> {
        let rows = self.contracts.load_contracts(records)?;
        let mut summary = IngestSummary {
            contract_rows: rows,
            ..IngestSummary::default()
        };
        if self.config.flatten_records && !records.is_empty() {
            let mut chunks: Vec<_> = records.iter().map(record_chunk).collect();
            let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
            let vectors = self.embedder.embed_batch(&texts)?;
            for (c, v) in chunks.iter_mut().zip(vectors) {
                c.embedding = Some(v);
            }
            summary.chunks = chunks.len();
            self.vectors.write().unwrap_or_else(PoisonError::into_inner).upsert(&chunks)?;
        }
        Ok(summary)
    }

    fn complete(&self, prompt: &crate::prompts::RenderedPrompt, temperature: f64) -> Result<String, LlmError> {
        self.llm.complete(&CompletionRequest::new(prompt, temperature)?)
    }

    /// Retrieval path: embed, filtered search, grounded prompt, completion.
    pub fn rag_answer(
        &self,
        question: &str,
        route: &QueryRoute,
        history: &[HistoryTurn],
    ) -> Result<AnswerEnvelope, AgentError> {
        let mut env = AnswerEnvelope::new(route.clone(), NOT_FOUND_TEXT);

        let t = Instant::now();
        let query_vec = self.embedder.embed(&self.rules.expand_synonyms(question))?;
        env.timings.insert("embed".into(), ms(t.elapsed()));

        let t = Instant::now();
        let hits = self
            .vectors()
            .query(&query_vec, self.config.k, &route.filter, self.config.metric)
            .map_err(|e| AgentError::Retrieval(e.to_string()))?;
        env.timings.insert("retrieve".into(), ms(t.elapsed()));

        let t = Instant::now();
        let prompt = match self.prompts.build_rag_prompt(question, &hits, history, self.config.prompt_budget) {
            Ok(p) => p,
            Err(PromptError::NoContext) => return Ok(env),
            Err(PromptError::BudgetTooSmall { .. }) => {
                return Err(AgentError::InvalidQuestion("question is too long for the prompt budget".into()))
            }
            Err(e) => return Err(AgentError::InvalidQuestion(e.to_string())),
        };
        env.timings.insert("prompt".into(), ms(t.elapsed()));

        let t = Instant::now();
        env.answer_text = self.complete(&prompt, RAG_TEMPERATURE)?;
        env.timings.insert("generate".into(), ms(t.elapsed()));

        env.citations = prompt
            .included_chunk_ids
            .iter()
            .filter_map(|id| hits.iter().find(|h| &h.chunk_id == id))
            .map(Citation::from)
            .collect();
        Ok(env)
    }

    /// Text-to-SQL path with one self-correction retry.
    pub fn sql_answer(
        &self,
        question: &str,
        route: &QueryRoute,
        history: &[HistoryTurn],
    ) -> Result<AnswerEnvelope, AgentError> {
        let mut env = AnswerEnvelope::new(route.clone(), String::new());
        let schema = self.contracts.schema();

        let t = Instant::now();
        let prompt = self
            .prompts
            .build_sql_prompt(question, &schema, &schema.dialect, history, self.config.prompt_budget)
            .map_err(|e| AgentError::InvalidQuestion(e.to_string()))?;
        env.timings.insert("prompt".into(), ms(t.elapsed()));

        let mut generate = Duration::ZERO;
        let mut validate = Duration::ZERO;
        let mut current = prompt.clone();
        let mut validated = None;
        for _ in 0..2 {
            let t = Instant::now();
            let reply = self.complete(&current, SQL_TEMPERATURE)?;
            generate += t.elapsed();

            let t = Instant::now();
            let sql = extract_sql(&reply);
            let outcome = validate_sql(&sql, &schema);
            validate += t.elapsed();
            match outcome {
                Ok(q) => {
                    env.sql_attempts.push(SqlAttempt {
                        sql,
                        outcome: SqlOutcome::Accepted,
                    });
                    validated = Some(q);
                    break;
                }
                Err(e) => {
                    current = self.prompts.sql_correction(&prompt, question, &sql, &e.to_string());
                    env.sql_attempts.push(SqlAttempt {
                        sql,
                        outcome: SqlOutcome::Rejected { error: e.to_string() },
                    });
                }
            }
        }
        env.timings.insert("generate".into(), ms(generate));
        env.timings.insert("validate".into(), ms(validate));
        let Some(query) = validated else {
            return Err(AgentError::SqlGenerationFailed {
                attempts: env.sql_attempts,
            });
        };

        let t = Instant::now();
        env.executed_sql = Some(query.sql_text().to_string());
        let table = self
            .contracts
            .execute_sql(&query, self.config.sql_timeout_ms)
            .map_err(|e| AgentError::Execution {
                sql: query.sql_text().to_string(),
                message: match e {
                    StructuredError::ExecutionTimeout(limit) => format!("the query took longer than {limit} ms"),
                    StructuredError::EngineError(m) => format!("the database rejected the query ({m})"),
                    other => other.to_string(),
                },
            })?;
        env.timings.insert("execute".into(), ms(t.elapsed()));

        let t = Instant::now();
        let summary = self
            .prompts
            .build_sql_answer_prompt(question, query.sql_text(), &table)
            .map_err(|e| LlmError::InvalidRequest(e.to_string()))
            .and_then(|p| self.complete(&p, SQL_TEMPERATURE));
        env.answer_text = match summary {
            Ok(text) => text,
            Err(e) => {
                env.warnings.push(format!("answer summary unavailable: {e}"));
                table.to_markdown()
            }
        };
        env.timings.insert("summarize".into(), ms(t.elapsed()));
        env.table = Some(table);
        Ok(env)
    }

    /// Attaches a bar chart when the table has a label and a numeric column.
    /// Never fails: problems become a warning and no chart.
    pub fn graph_augment(&self, mut env: AnswerEnvelope, question: &str) -> AnswerEnvelope {
        let Some(table) = env.table.as_ref() else {
            return env;
        };
        let (labels, numerics) = chart_columns(table);
        if labels.is_empty() || numerics.is_empty() || table.rows.is_empty() {
            return env;
        }
        let t = Instant::now();
        let mut label_col = labels[0].clone();
        let mut value_col = numerics[0].clone();
        let mut axis = None;
        match self.choose_columns(table) {
            Ok(Some(choice)) => {
                if labels.contains(&choice.label_column) && numerics.contains(&choice.value_column) {
                    label_col = choice.label_column;
                    value_col = choice.value_column;
                    axis = choice.value_axis_label.filter(|s| !s.trim().is_empty());
                }
            }
            Ok(None) => {}
            Err(e) => env.warnings.push(format!("chart column choice unavailable: {e}")),
        }
        match build_chart(table, question, &label_col, &value_col, axis) {
            Ok(chart) => env.chart = Some(chart),
            Err(reason) => env.warnings.push(format!("chart omitted: {reason}")),
        }
        env.timings.insert("graph".into(), ms(t.elapsed()));
        env
    }

    fn choose_columns(&self, table: &ResultTable) -> Result<Option<GraphChoice>, LlmError> {
        let Ok(prompt) = self.prompts.build_graph_prompt(table) else {
            return Ok(None);
        };
        let reply = self.complete(&prompt, SQL_TEMPERATURE)?;
        Ok(json_object_re()
            .find(&reply)
            .and_then(|m| serde_json::from_str::<GraphChoice>(m.as_str()).ok()))
    }

    /// Route, dispatch, chart, record the turn. Always returns an envelope.
    pub fn orchestrate(&self, session_id: &str, question: &str) -> AnswerEnvelope {
        let started = Instant::now();
        let question = question.trim();

        let t = Instant::now();
        let route = self.rules.route(question);
        let route_time = ms(t.elapsed());

        let mut env = if question.is_empty() {
            AnswerEnvelope::failed(route, FailureKind::InvalidQuestion, "question is empty")
        } else if question.chars().count() > MAX_QUESTION_CHARS {
            AnswerEnvelope::failed(
                route,
                FailureKind::InvalidQuestion,
                format!("question exceeds {MAX_QUESTION_CHARS} characters"),
            )
        } else {
            let session = self.sessions.get_or_create(session_id);
            let mut session = session.lock().unwrap_or_else(PoisonError::into_inner);
            let history = session.turns();
            let result = match route.target {
                Target::Rag => self.rag_answer(question, &route, &history),
                Target::Sql => self.sql_answer(question, &route, &history),
            };
            let env = match result {
                Ok(env) => self.graph_augment(env, question),
                Err(e) => failure_envelope(route, e),
            };
            if !env.is_failure() {
                session.push(
                    HistoryTurn {
                        question: question.to_string(),
                        answer: env.answer_text.clone(),
                    },
                    self.sessions.cap(),
                );
            }
            env
        };
        env.timings.insert("route".into(), route_time);
        env.timings.insert("total".into(), ms(started.elapsed()));
        env
    }
}

fn failure_envelope(route: QueryRoute, err: AgentError) -> AnswerEnvelope {
    let kind = match &err {
        AgentError::Llm(LlmError::ProviderUnavailable { .. })
        | AgentError::Embedding(EmbeddingError::ProviderUnavailable { .. }) => FailureKind::ProviderUnavailable,
        AgentError::Llm(_) | AgentError::Embedding(_) => FailureKind::ProviderError,
        AgentError::SqlGenerationFailed { .. } => FailureKind::SqlGenerationFailed,
        AgentError::Execution { .. } => FailureKind::ExecutionError,
        AgentError::InvalidQuestion(_) => FailureKind::InvalidQuestion,
        AgentError::Retrieval(_) => FailureKind::Internal,
    };
    let mut env = AnswerEnvelope::failed(route, kind, err.to_string());
    match err {
        AgentError::SqlGenerationFailed { attempts } => env.sql_attempts = attempts,
        AgentError::Execution { sql, .. } => env.executed_sql = Some(sql),
        _ => {}
    }
    env
}

fn build_chart(
    table: &ResultTable,
    title: &str,
    label_col: &str,
    value_col: &str,
    axis: Option<String>,
) -> Result<ChartSpec, String> {
    let li = table.columns.iter().position(|c| c.name == label_col).ok_or("label column missing")?;
    let vi = table.columns.iter().position(|c| c.name == value_col).ok_or("value column missing")?;
    let mut labels = Vec::with_capacity(table.rows.len());
    let mut values = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let value = row[vi].as_f64().ok_or_else(|| format!("`{value_col}` has a non-numeric value"))?;
        if !value.is_finite() {
            return Err(format!("`{value_col}` has a non-finite value"));
        }
        labels.push(match &row[li] {
            Cell::Null => String::new(),
            other => other.to_string(),
        });
        values.push(value);
    }
    let chart = ChartSpec {
        kind: ChartKind::Bar,
        title: title.to_string(),
        labels,
        values,
        value_axis_label: axis.unwrap_or_else(|| value_col.to_string()),
    };
    debug_assert!(chart.is_valid());
    Ok(chart)
}
