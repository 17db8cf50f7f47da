//! HTTP front end for the question-answering engine.
//!
//! Every body is JSON except `POST /ingest/contracts`, which takes the
//! contracts file as plain delimited text. Domain failures come back as a 200
//! envelope with a `failure` field; only malformed requests (400) and an
//! unreachable model provider (503) use error statuses.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::{ServeDir, ServeFile};

use clauseqa_core::agents::{AnswerEnvelope, Engine, FailureKind, MAX_QUESTION_CHARS};
use clauseqa_core::ingest::{parse_manifest, DocumentSource, IngestError};
use clauseqa_core::prompts::HistoryTurn;
use clauseqa_core::structured::{parse_contracts_csv, ContractRecord, StructuredError};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    /// Where the vector index is written after each document ingest.
    pub index_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Built web client to serve at `/`.
    pub static_dir: Option<PathBuf>,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u64>,
}

fn bad_request(error: impl Into<String>, line: Option<u64>) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(ErrorBody {
            error: error.into(),
            line,
        }),
    )
        .into_response()
}

fn internal(error: impl Into<String>) -> Response {
    (
        StatusCode::INTERNAL_SERVER_ERROR,
        Json(ErrorBody {
            error: error.into(),
            line: None,
        }),
    )
        .into_response()
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, String> {
    serde_json::from_slice(body).map_err(|e| format!("invalid request body: {e}"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AskRequest {
    pub session_id: String,
    pub question: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ServerTimings {
    pub total_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AskResponse {
    pub session_id: String,
    pub question: String,
    #[serde(flatten)]
    pub envelope: AnswerEnvelope,
    pub server_timings: ServerTimings,
}

async fn ask(State(state): State<AppState>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: AskRequest = match parse_json(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(e, None),
    };
    if req.session_id.trim().is_empty() {
        return bad_request("session_id is empty", None);
    }
    let len = req.question.trim().chars().count();
    if len == 0 || len > MAX_QUESTION_CHARS {
        return bad_request(format!("question must be 1 to {MAX_QUESTION_CHARS} characters"), None);
    }
    let engine = state.engine.clone();
    let (session, question) = (req.session_id.clone(), req.question.clone());
    let envelope = match tokio::task::spawn_blocking(move || engine.orchestrate(&session, &question)).await {
        Ok(env) => env,
        Err(e) => return internal(format!("answer task failed: {e}")),
    };
    let status = match envelope.failure.as_ref().map(|f| f.kind) {
        Some(FailureKind::ProviderUnavailable) => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::OK,
    };
    let response = AskResponse {
        session_id: req.session_id,
        question: req.question,
        envelope,
        server_timings: ServerTimings {
            total_ms: started.elapsed().as_micros() as f64 / 1_000.0,
        },
    };
    (status, Json(response)).into_response()
}

/// Manifest lines (JSONL) plus document texts keyed by the manifest `path`.
#[derive(Debug, Serialize, Deserialize)]
pub struct IngestDocumentsRequest {
    pub manifest: String,
    pub documents: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestDocumentsResponse {
    pub documents: usize,
    pub chunks_embedded: usize,
    pub chunks_upserted: usize,
    pub index_size: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

async fn ingest_documents(State(state): State<AppState>, body: Bytes) -> Response {
    let req: IngestDocumentsRequest = match parse_json(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(e, None),
    };
    let entries = match parse_manifest(&req.manifest) {
        Ok(e) => e,
        Err(IngestError::Manifest { line, reason }) => {
            return bad_request(format!("manifest line {line}: {reason}"), Some(line as u64))
        }
        Err(e) => return bad_request(e.to_string(), None),
    };
    let mut docs = Vec::with_capacity(entries.len());
    for entry in entries {
        let path = entry.path;
        let Some(text) = req.documents.get(&path) else {
            return bad_request(format!("document `{path}` listed in the manifest was not sent"), None);
        };
        match DocumentSource::new(entry.source_id, entry.contract_number, text.clone()) {
            Ok(d) => docs.push(d),
            Err(e) => return bad_request(e.to_string(), None),
        }
    }
    let engine = state.engine.clone();
    let index_path = state.index_path.clone();
    let result = tokio::task::spawn_blocking(move || {
        let summary = engine.ingest_documents(&docs)?;
        if let Some(path) = index_path {
            engine.vectors().persist(&path)?;
        }
        Ok::<_, clauseqa_core::agents::PipelineError>((summary, engine.vectors().len()))
    })
    .await;
    match result {
        Ok(Ok((summary, index_size))) => Json(IngestDocumentsResponse {
            documents: summary.documents,
            chunks_embedded: summary.chunks,
            chunks_upserted: summary.chunks,
            index_size,
            warnings: summary.warnings,
        })
        .into_response(),
        Ok(Err(clauseqa_core::agents::PipelineError::Embedding(e))) => {
            (StatusCode::SERVICE_UNAVAILABLE, Json(ErrorBody { error: e.to_string(), line: None })).into_response()
        }
        Ok(Err(e)) => bad_request(e.to_string(), None),
        Err(e) => internal(format!("ingest task failed: {e}")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestContractsResponse {
    pub rows: usize,
}

async fn ingest_contracts(State(state): State<AppState>, body: Bytes) -> Response {
    let Ok(text) = std::str::from_utf8(&body) else {
        return bad_request("contracts file is not UTF-8", None);
    };
    let records = match parse_contracts_csv(text) {
        Ok(r) => r,
        Err(StructuredError::Csv { line, reason }) => {
            return bad_request(format!("contracts file line {line}: {reason}"), Some(line))
        }
        Err(e) => return bad_request(e.to_string(), None),
    };
    let engine = state.engine.clone();
    match tokio::task::spawn_blocking(move || engine.ingest_contracts(&records)).await {
        Ok(Ok(summary)) => Json(IngestContractsResponse {
            rows: summary.contract_rows,
        })
        .into_response(),
        Ok(Err(e)) => bad_request(e.to_string(), None),
        Err(e) => internal(format!("ingest task failed: {e}")),
    }
}

async fn contracts(State(state): State<AppState>) -> Response {
    let engine = state.engine.clone();
    match tokio::task::spawn_blocking(move || engine.contracts().list_contracts()).await {
        Ok(Ok(list)) => Json::<Vec<ContractRecord>>(list).into_response(),
        Ok(Err(e)) => internal(e.to_string()),
        Err(e) => internal(e.to_string()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistoryResponse {
    pub session_id: String,
    pub turns: Vec<HistoryTurn>,
}

async fn history(State(state): State<AppState>, Path(id): Path<String>) -> Json<HistoryResponse> {
    let turns = state.engine.sessions().history(&id);
    Json(HistoryResponse { session_id: id, turns })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub chunks: usize,
    pub documents: usize,
    pub contracts: usize,
    pub sessions: usize,
    pub provider_mode: String,
    pub embedding_mode: String,
}

async fn health(State(state): State<AppState>) -> Response {
    let engine = state.engine.clone();
    let counts = tokio::task::spawn_blocking(move || {
        let (chunks, documents) = {
            let v = engine.vectors();
            (v.len(), v.sources().len())
        };
        engine.contracts().count().map(|c| HealthResponse {
            status: "ok".into(),
            chunks,
            documents,
            contracts: c,
            sessions: engine.sessions().len(),
            provider_mode: engine.llm_mode().into(),
            embedding_mode: engine.embedder_mode().into(),
        })
    })
    .await;
    match counts {
        Ok(Ok(h)) => Json(h).into_response(),
        Ok(Err(e)) => internal(e.to_string()),
        Err(e) => internal(e.to_string()),
    }
}

pub fn router(state: AppState, options: &ServerOptions) -> Router {
    let cors = match options.cors_origin.as_deref().and_then(|o| o.parse::<HeaderValue>().ok()) {
        Some(origin) => CorsLayer::new().allow_origin(origin),
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);

    let mut app = Router::new()
        .route("/ask", post(ask))
        .route("/ingest/documents", post(ingest_documents))
        .route("/ingest/contracts", post(ingest_contracts))
        .route("/contracts", get(contracts))
        .route("/sessions/{id}/history", get(history))
        .route("/health", get(health))
        .with_state(state);
    if let Some(dir) = &options.static_dir {
        let index = dir.join("index.html");
        app = app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)));
    }
    app.layer(cors)
}

/// Serves until `shutdown` resolves; in-flight requests are drained first.
pub async fn serve<F>(listener: tokio::net::TcpListener, app: Router, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
