//! Operator commands: `ingest`, `ask`, `serve` and `eval`.
//!
//! Exit codes are stable: 0 success, 2 usage or configuration error,
//! 3 runtime or provider error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clauseqa_api::{router, AppState, ServerOptions};
use clauseqa_core::agents::{AnswerEnvelope, Engine, FailureKind, RuleTable, SessionStore, MAX_HISTORY_TURNS};
use clauseqa_core::embedding::EmbedderConfig;
use clauseqa_core::eval::{load_questions, run_eval};
use clauseqa_core::ingest::{load_corpus, parse_manifest};
use clauseqa_core::llm::{ChatModel, RemoteChat, RemoteChatConfig, ScriptedStub};
use clauseqa_core::prompts::{PromptBuilder, PromptTemplates};
use clauseqa_core::structured::{parse_contracts_csv, ContractStore};
use clauseqa_core::vectorstore::VectorStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Reads the remote embedding key; never taken from the command line.
pub const EMBEDDING_KEY_ENV: &str = "CLAUSEQA_EMBEDDING_API_KEY";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(m: impl std::fmt::Display) -> CliError {
    CliError::Usage(m.to_string())
}

fn runtime(m: impl std::fmt::Display) -> CliError {
    CliError::Runtime(m.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "clauseqa", version, about = "Question answering over contract documents and contract records")]
pub struct Cli {
    #[command(flatten)]
    pub stores: StoreArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Vector index file.
    #[arg(long, global = true, env = "CLAUSEQA_INDEX", default_value = "data/index.bin")]
    pub index: PathBuf,
    /// Contract records database file.
    #[arg(long, global = true, env = "CLAUSEQA_DB", default_value = "data/contracts.db")]
    pub db: PathBuf,
    /// Embedding dimensionality; must match the index.
    #[arg(long, global = true, env = "CLAUSEQA_EMBEDDING_DIMS", default_value_t = 256)]
    pub embedding_dims: usize,
    /// OpenAI-compatible embeddings endpoint; the local hashing embedder is used when unset.
    #[arg(long, global = true, env = "CLAUSEQA_EMBEDDING_URL")]
    pub embedding_url: Option<String>,
    #[arg(long, global = true, env = "CLAUSEQA_EMBEDDING_MODEL")]
    pub embedding_model: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Provider {
    Stub,
    Remote,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, env = "CLAUSEQA_PROVIDER", value_enum, default_value = "remote")]
    pub provider: Provider,
    /// Scripted responses for `--provider stub`.
    #[arg(long, env = "CLAUSEQA_STUB_SCRIPT")]
    pub stub_script: Option<PathBuf>,
    /// OpenAI-compatible chat endpoint base URL.
    #[arg(long, env = "CLAUSEQA_LLM_URL")]
    pub llm_url: Option<String>,
    #[arg(long, env = "CLAUSEQA_LLM_MODEL")]
    pub llm_model: Option<String>,
    /// Routing rule table replacing the shipped one.
    #[arg(long, env = "CLAUSEQA_RULES")]
    pub rules: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long, env = "CLAUSEQA_TEMPLATES")]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk, embed and index documents, and load contract records.
    Ingest {
        #[arg(long, requires = "manifest")]
        docs: Option<PathBuf>,
        #[arg(long, requires = "docs")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        contracts: Option<PathBuf>,
    },
    /// Answer one question.
    Ask {
        question: String,
        #[arg(long, default_value = "cli")]
        session: String,
        /// Print the answer envelope as JSON.
        #[arg(long)]
        json: bool,
        /// Session history file, read before and written after the question.
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "CLAUSEQA_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "CLAUSEQA_HOST", default_value = "127.0.0.1")]
        host: String,
        /// Built web client to serve at `/`.
        #[arg(long, env = "CLAUSEQA_STATIC_DIR")]
        static_dir: Option<PathBuf>,
        /// Browser origin allowed by CORS; any origin when unset.
        #[arg(long, env = "CLAUSEQA_CORS_ORIGIN")]
        cors_origin: Option<String>,
        /// Session history file, restored at start and written on shutdown.
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run a benchmark question file and write a report.
    Eval {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn embedder_config(s: &StoreArgs) -> Result<EmbedderConfig, CliError> {
    let cfg = match (&s.embedding_url, &s.embedding_model) {
        (Some(url), Some(model)) => {
            let mut c = EmbedderConfig::remote(url.clone(), model.clone(), s.embedding_dims);
            c.api_key = std::env::var(EMBEDDING_KEY_ENV).ok().filter(|k| !k.is_empty());
            c
        }
        (None, None) => EmbedderConfig::local(s.embedding_dims),
        _ => return Err(usage("--embedding-url and --embedding-model must be given together")),
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn chat_model(m: &ModelArgs) -> Result<Arc<dyn ChatModel>, CliError> {
    match m.provider {
        Provider::Stub => {
            let path = m
                .stub_script
                .as_ref()
                .ok_or_else(|| usage("--provider stub requires --stub-script <file>"))?;
            let stub = ScriptedStub::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            Ok(Arc::new(stub))
        }
        Provider::Remote => {
            let (Some(url), Some(model)) = (&m.llm_url, &m.llm_model) else {
                return Err(usage("--provider remote requires --llm-url and --llm-model"));
            };
            let chat = RemoteChat::new(RemoteChatConfig::new(url.clone(), model.clone())).map_err(usage)?;
            Ok(Arc::new(chat))
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
        }
        _ => Ok(()),
    }
}

/// Opens both stores. A missing index starts empty.
fn open_engine(stores: &StoreArgs, llm: Arc<dyn ChatModel>, model: Option<&ModelArgs>) -> Result<Engine, CliError> {
    let embedder = embedder_config(stores)?.build().map_err(usage)?;
    ensure_parent(&stores.db)?;
    let contracts = ContractStore::open(&stores.db).map_err(|e| usage(format!("{}: {e}", stores.db.display())))?;
    let mut engine = Engine::new(embedder, llm, contracts);
    if stores.index.exists() {
        let index = VectorStore::load(&stores.index).map_err(|e| usage(format!("{}: {e}", stores.index.display())))?;
        engine = engine
            .with_vectors(index)
            .map_err(|e| usage(format!("{}: {e}; pass the --embedding-dims used at ingest", stores.index.display())))?;
    }
    if let Some(m) = model {
        if let Some(path) = &m.rules {
            engine = engine.with_rules(RuleTable::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?);
        }
        if let Some(dir) = &m.templates {
            let templates = PromptTemplates::load_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
            engine = engine.with_prompts(PromptBuilder::new(templates));
        }
    }
    Ok(engine)
}

fn restore_sessions(engine: Engine, path: Option<&Path>) -> Result<Engine, CliError> {
    let store = SessionStore::new(MAX_HISTORY_TURNS);
    if let Some(p) = path {
        store.restore(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    Ok(engine.with_sessions(store))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn ingest(
    stores: &StoreArgs,
    docs: Option<&Path>,
    manifest: Option<&Path>,
    contracts: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if docs.is_none() && contracts.is_none() {
        return Err(usage("nothing to ingest: pass --docs with --manifest, or --contracts"));
    }
    // Validate every input before touching either store.
    let documents = match (docs, manifest) {
        (Some(dir), Some(m)) => {
            let entries = parse_manifest(&read(m)?).map_err(|e| usage(format!("{}: {e}", m.display())))?;
            load_corpus(dir, &entries).map_err(usage)?
        }
        _ => Vec::new(),
    };
    let records = match contracts {
        Some(p) => parse_contracts_csv(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };

    let engine = open_engine(stores, Arc::new(ScriptedStub::new(Vec::new(), "")), None)?;
    let mut summary = engine.ingest_documents(&documents).map_err(runtime)?;
    if docs.is_some() {
        ensure_parent(&stores.index)?;
        engine.vectors().persist(&stores.index).map_err(runtime)?;
    }
    if !records.is_empty() {
        let rows = engine.ingest_contracts(&records).map_err(runtime)?;
        summary.contract_rows = rows.contract_rows;
        summary.warnings.extend(rows.warnings);
    }
    for w in &summary.warnings {
        writeln!(out, "warning: {w}").map_err(runtime)?;
    }
    writeln!(out, "{summary}").map_err(runtime)?;
    Ok(())
}

fn failure_error(env: &AnswerEnvelope) -> Option<CliError> {
    let f = env.failure.as_ref()?;
    Some(match f.kind {
        FailureKind::InvalidQuestion => usage(&f.message),
        _ => runtime(&f.message),
    })
}

/// Human-readable rendering of an envelope.
pub fn render_text(env: &AnswerEnvelope) -> String {
    let mut s = String::new();
    s.push_str(env.answer_text.trim_end());
    s.push('\n');
    if let Some(table) = &env.table {
        let md = table.to_markdown();
        if !env.answer_text.contains(md.trim_end()) {
            s.push('\n');
            s.push_str(md.trim_end());
            s.push('\n');
        }
    }
    if let Some(chart) = &env.chart {
        s.push_str(&format!("\nChart: {} ({})\n", chart.title, chart.value_axis_label));
        for (l, v) in chart.labels.iter().zip(&chart.values) {
            s.push_str(&format!("  {l}: {v}\n"));
        }
    }
    if !env.citations.is_empty() {
        s.push_str("\nSources:\n");
        for c in &env.citations {
            s.push_str(&format!("  [{} | {} | {}] {}\n", c.source, c.contract, c.clause, c.chunk_id));
        }
    }
    if let Some(sql) = &env.executed_sql {
        s.push_str(&format!("\nSQL: {sql}\n"));
    }
    for w in &env.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

fn ask(
    stores: &StoreArgs,
    question: &str,
    session: &str,
    json: bool,
    sessions: Option<&Path>,
    model: &ModelArgs,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let llm = chat_model(model)?;
    let engine = restore_sessions(open_engine(stores, llm, Some(model))?, sessions)?;
    let env = engine.orchestrate(session, question);
    if json {
        let text = serde_json::to_string_pretty(&env).map_err(runtime)?;
        writeln!(out, "{text}").map_err(runtime)?;
    } else if env.failure.is_none() {
        write!(out, "{}", render_text(&env)).map_err(runtime)?;
    }
    if let Some(p) = sessions {
        engine.sessions().snapshot(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
    }
    match failure_error(&env) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn serve(
    stores: &StoreArgs,
    host: &str,
    port: u16,
    static_dir: Option<PathBuf>,
    cors_origin: Option<String>,
    sessions: Option<&Path>,
    model: &ModelArgs,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let llm = chat_model(model)?;
    let engine = Arc::new(restore_sessions(open_engine(stores, llm, Some(model))?, sessions)?);
    if let Some(dir) = &static_dir {
        if !dir.is_dir() {
            return Err(usage(format!("{}: not a directory", dir.display())));
        }
    }
    let listener = std::net::TcpListener::bind((host, port)).map_err(|e| usage(format!("cannot bind {host}:{port}: {e}")))?;
    listener.set_nonblocking(true).map_err(runtime)?;
    let addr = listener.local_addr().map_err(runtime)?;

    let state = AppState {
        engine: engine.clone(),
        index_path: Some(stores.index.clone()),
    };
    let app = router(state, &ServerOptions { static_dir, cors_origin });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
    writeln!(out, "listening on http://{addr} ({} provider)", engine.llm_mode()).map_err(runtime)?;
    out.flush().map_err(runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        clauseqa_api::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
    .map_err(runtime)?;
    if let Some(p) = sessions {
        engine.sessions().snapshot(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn eval(stores: &StoreArgs, questions: &Path, report: &Path, model: &ModelArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let suite = load_questions(questions).map_err(usage)?;
    let llm = chat_model(model)?;
    let engine = restore_sessions(open_engine(stores, llm, Some(model))?, None)?;
    let result = run_eval(&engine, &suite);
    ensure_parent(report)?;
    fs::write(report, result.to_json()).map_err(|e| runtime(format!("{}: {e}", report.display())))?;
    for (cat, score) in &result.categories {
        let name = serde_json::to_value(cat).map_err(runtime)?;
        writeln!(
            out,
            "{}: {}/{} answers matched, {}/{} routes matched",
            name.as_str().unwrap_or_default(),
            score.answer_matches,
            score.questions,
            score.route_matches,
            score.questions
        )
        .map_err(runtime)?;
    }
    let t = &result.total;
    writeln!(
        out,
        "total: answer match {:.1}%, route match {:.1}%",
        t.answer_match_rate * 100.0,
        t.route_match_rate * 100.0
    )
    .map_err(runtime)?;
    Ok(())
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let stores = &cli.stores;
    match cli.command {
        Command::Ingest { docs, manifest, contracts } => {
            ingest(stores, docs.as_deref(), manifest.as_deref(), contracts.as_deref(), out)
        }
        Command::Ask {
            question,
            session,
            json,
            sessions,
            model,
        } => ask(stores, &question, &session, json, sessions.as_deref(), &model, out),
        Command::Serve {
            port,
            host,
            static_dir,
            cors_origin,
            sessions,
            model,
        } => serve(stores, &host, port, static_dir, cors_origin, sessions.as_deref(), &model, out),
        Command::Eval {
            questions,
            report,
            model,
        } => eval(stores, &questions, &report, &model, out),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}
