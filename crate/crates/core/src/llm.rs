//! Chat-completion providers.
//!
//! [`ScriptedStub`] answers from an ordered rule list and records every call,
//! which makes the whole pipeline reproducible offline. [`RemoteChat`] speaks
//! the common `/chat/completions` wire format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{estimate_tokens, Message, RenderedPrompt, Role};
use crate::remote::{retriable_status, scrub, Attempt, InFlightLimit, RetryPolicy};

pub const SQL_TEMPERATURE: f64 = 0.0;
pub const RAG_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 512;
pub const DEFAULT_CONTEXT_LIMIT: usize = 16_000;
pub const API_KEY_ENV: &str = "CLAUSEQA_LLM_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("language model provider unavailable after {attempts} attempt(s): {reason}")]
    ProviderUnavailable { attempts: u32, reason: String },
    #[error("language model returned an empty response")]
    ResponseEmpty,
    #[error("request needs about {estimated} tokens, provider limit is {limit}")]
    BudgetExceeded { estimated: usize, limit: usize },
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("invalid stub script: {0}")]
    InvalidScript(String),
    #[error("invalid provider configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: usize,
}

impl CompletionRequest {
    pub fn new(prompt: &RenderedPrompt, temperature: f64) -> Result<Self, LlmError> {
        let req = Self {
            messages: prompt.messages.clone(),
            temperature,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.messages.first() {
            None => return Err(LlmError::InvalidRequest("no messages".into())),
            Some(m) if m.role != Role::System => {
                return Err(LlmError::InvalidRequest("first message must be the system message".into()))
            }
            _ => {}
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Prompt text plus the output allowance.
    pub fn estimated_tokens(&self) -> usize {
        self.messages.iter().map(|m| estimate_tokens(&m.content)).sum::<usize>() + self.max_output_tokens
    }

    pub fn text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    fn check_budget(&self, limit: usize) -> Result<(), LlmError> {
        let estimated = self.estimated_tokens();
        if estimated > limit {
            return Err(LlmError::BudgetExceeded { estimated, limit });
        }
        Ok(())
    }
}

pub trait ChatModel: Send + Sync {
    /// `"stub"` or `"remote"`.
    fn mode(&self) -> &'static str;

    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError>;
}

#[derive(Debug, Clone)]
pub enum Matcher {
    /// Every substring must occur.
    Contains(Vec<String>),
    Pattern(Regex),
}

#[derive(Debug, Clone)]
pub struct StubRule {
    pub id: String,
    pub matcher: Matcher,
    /// For pattern rules, `$name` and `${name}` expand to capture groups; `$$` is a literal `$`.
    pub response: String,
}

impl StubRule {
    pub fn contains(id: impl Into<String>, needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            matcher: Matcher::Contains(vec![needle.into()]),
            response: response.into(),
        }
    }

    pub fn pattern(id: impl Into<String>, pattern: &str, response: impl Into<String>) -> Result<Self, LlmError> {
        let re = Regex::new(pattern).map_err(|e| LlmError::InvalidScript(e.to_string()))?;
        Ok(Self {
            id: id.into(),
            matcher: Matcher::Pattern(re),
            response: response.into(),
        })
    }

    fn respond(&self, text: &str) -> Option<String> {
        match &self.matcher {
            Matcher::Contains(needles) => needles.iter().all(|n| text.contains(n.as_str())).then(|| self.response.clone()),
            Matcher::Pattern(re) => re.captures(text).map(|caps| {
                let mut out = String::new();
                caps.expand(&self.response, &mut out);
                out
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StubCall {
    pub request: CompletionRequest,
    /// Id of the rule that answered, `None` for the default response.
    pub rule: Option<String>,
    pub response: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    default: String,
    #[serde(default)]
    context_limit: Option<usize>,
    #[serde(default, rename = "rule")]
    rules: Vec<ScriptRule>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptRule {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    contains: Option<OneOrMany>,
    #[serde(default)]
    regex: Option<String>,
    response: String,
}

/// Deterministic model: the first rule matching the full prompt text answers.
#[derive(Debug)]
pub struct ScriptedStub {
    rules: Vec<StubRule>,
    default_response: String,
    context_limit: usize,
    calls: Mutex<Vec<StubCall>>,
}

impl ScriptedStub {
    pub fn new(rules: Vec<StubRule>, default_response: impl Into<String>) -> Self {
        Self {
            rules,
            default_response: default_response.into(),
            context_limit: DEFAULT_CONTEXT_LIMIT,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = limit;
        self
    }

    /// Parses a TOML script: a top-level `default`, optional `context_limit`,
    /// and `[[rule]]` tables each holding `contains` (string or list) or
    /// `regex`, plus `response`.
    pub fn from_toml(text: &str) -> Result<Self, LlmError> {
        let file: ScriptFile = toml::from_str(text).map_err(|e| LlmError::InvalidScript(e.to_string()))?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for (i, r) in file.rules.into_iter().enumerate() {
            let id = r.id.unwrap_or_else(|| format!("rule-{}", i + 1));
            let rule = match (r.contains, r.regex) {
                (Some(c), None) => {
                    let needles = match c {
                        OneOrMany::One(s) => vec![s],
                        OneOrMany::Many(v) => v,
                    };
                    if needles.is_empty() || needles.iter().any(String::is_empty) {
                        return Err(LlmError::InvalidScript(format!("{id}: empty `contains`")));
                    }
                    StubRule {
                        id,
                        matcher: Matcher::Contains(needles),
                        response: r.response,
                    }
                }
                (None, Some(re)) => {
                    StubRule::pattern(id.clone(), &re, r.response).map_err(|e| LlmError::InvalidScript(format!("{id}: {e}")))?
                }
                _ => return Err(LlmError::InvalidScript(format!("{id}: needs exactly one of `contains` or `regex`"))),
            };
            rules.push(rule);
        }
        let stub = Self::new(rules, file.default);
        Ok(match file.context_limit {
            Some(limit) => stub.with_context_limit(limit),
            None => stub,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::InvalidScript(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn calls(&self) -> Vec<StubCall> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn clear_calls(&self) {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }
}

impl ChatModel for ScriptedStub {
    fn mode(&self) -> &'static str {
        "stub"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        req.validate()?;
        req.check_budget(self.context_limit)?;
        let text = req.text();
        let (rule, response) = self
            .rules
            .iter()
            .find_map(|r| r.respond(&text).map(|resp| (Some(r.id.clone()), resp)))
            .unwrap_or_else(|| (None, self.default_response.clone()));
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).push(StubCall {
            request: req.clone(),
            rule,
            response: response.clone(),
        });
        if response.trim().is_empty() {
            return Err(LlmError::ResponseEmpty);
        }
        Ok(response)
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct RemoteChatConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_context_limit")]
    pub context_limit: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(skip)]
    pub retry: RetryPolicy,
}

fn default_context_limit() -> usize {
    DEFAULT_CONTEXT_LIMIT
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl fmt::Debug for RemoteChatConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteChatConfig")
            .field("base_url", &scrub(&self.base_url, self.api_key.as_deref()))
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "[redacted]"))
            .field("context_limit", &self.context_limit)
            .finish()
    }
}

impl RemoteChatConfig {
    /// Reads the key from [`API_KEY_ENV`] when set.
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            context_limit: DEFAULT_CONTEXT_LIMIT,
            max_in_flight: default_in_flight(),
            request_timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: Role,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireContent,
}

#[derive(Deserialize)]
struct WireContent {
    #[serde(default)]
    content: Option<String>,
}

pub struct RemoteChat {
    cfg: RemoteChatConfig,
    limit: InFlightLimit,
    // Built lazily: a blocking client must not be created on an async runtime thread.
    client: OnceLock<reqwest::blocking::Client>,
}

impl fmt::Debug for RemoteChat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteChat").field("cfg", &self.cfg).finish()
    }
}

impl RemoteChat {
    pub fn new(cfg: RemoteChatConfig) -> Result<Self, LlmError> {
        if cfg.base_url.trim().is_empty() {
            return Err(LlmError::InvalidConfig("remote chat needs a base URL".into()));
        }
        if cfg.model.trim().is_empty() {
            return Err(LlmError::InvalidConfig("remote chat needs a model name".into()));
        }
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

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }
}

impl ChatModel for RemoteChat {
    fn mode(&self) -> &'static str {
        "remote"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        req.validate()?;
        req.check_budget(self.cfg.context_limit)?;
        let secret = self.cfg.api_key.as_deref();
        let url = self.url();
        let body = WireRequest {
            model: &self.cfg.model,
            messages: req
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role,
                    content: &m.content,
                })
                .collect(),
            temperature: req.temperature,
            max_tokens: req.max_output_tokens,
        };
        let _permit = self.limit.acquire();

        let unavailable = |reason: String| LlmError::ProviderUnavailable { attempts: 0, reason };
        let parsed = self
            .cfg
            .retry
            .run(|_| {
                let mut call = self.client().post(&url).json(&body);
                if let Some(key) = secret {
                    call = call.bearer_auth(key);
                }
                match call.send() {
                    Err(e) => Attempt::Retry(unavailable(scrub(&e.to_string(), secret))),
                    Ok(resp) if retriable_status(resp.status().as_u16()) => {
                        Attempt::Retry(unavailable(format!("HTTP {}", resp.status())))
                    }
                    Ok(resp) if !resp.status().is_success() => {
                        Attempt::Fail(LlmError::InvalidResponse(format!("HTTP {}", resp.status())))
                    }
                    Ok(resp) => match resp.json::<WireResponse>() {
                        Ok(parsed) => Attempt::Done(parsed),
                        Err(e) => Attempt::Fail(LlmError::InvalidResponse(scrub(&e.to_string(), secret))),
                    },
                }
            })
            .map_err(|(err, attempts)| match err {
                LlmError::ProviderUnavailable { reason, .. } => LlmError::ProviderUnavailable { attempts, reason },
                other => other,
            })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(LlmError::ResponseEmpty);
        }
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;
    use std::thread;

    fn request(user: &str) -> CompletionRequest {
        CompletionRequest {
            messages: vec![Message::system("You are a test."), Message::user(user)],
            temperature: SQL_TEMPERATURE,
            max_output_tokens: 64,
        }
    }

    #[test]
    fn request_invariants() {
        let mut r = request("q");
        assert!(r.validate().is_ok());
        r.messages.remove(0);
        assert!(matches!(r.validate(), Err(LlmError::InvalidRequest(_))));
        r.messages.clear();
        assert!(matches!(r.validate(), Err(LlmError::InvalidRequest(_))));
        let mut hot = request("q");
        hot.temperature = 2.5;
        assert!(hot.validate().is_err());
    }

    #[test]
    fn stub_first_match_wins_and_logs() {
        let stub = ScriptedStub::new(
            vec![
                StubRule::contains("count", "active contracts", "SELECT COUNT(*) FROM contracts WHERE status='active'"),
                StubRule::contains("shadowed", "active", "never"),
            ],
            "no rule matched",
        );
        assert_eq!(
            stub.complete(&request("How many active contracts?")).unwrap(),
            "SELECT COUNT(*) FROM contracts WHERE status='active'"
        );
        assert_eq!(stub.complete(&request("hello")).unwrap(), "no rule matched");
        let calls = stub.calls();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[0].rule.as_deref(), Some("count"));
        assert_eq!(calls[1].rule, None);
        assert!(calls[0].request.text().contains("How many active"));
    }

    #[test]
    fn stub_pattern_expands_captures() {
        let rule = StubRule::pattern("echo", r"manager: (?P<name>[A-Z]\w+ [A-Z]\w+)", "The manager is ${name}.").unwrap();
        let stub = ScriptedStub::new(vec![rule], "?");
        assert_eq!(
            stub.complete(&request("Contract manager: Alice Souza.")).unwrap(),
            "The manager is Alice Souza."
        );
    }

    #[test]
    fn stub_budget_and_empty() {
        let stub = ScriptedStub::new(vec![], "").with_context_limit(70);
        assert!(matches!(
            stub.complete(&request(&"x".repeat(100))),
            Err(LlmError::BudgetExceeded { .. })
        ));
        assert_eq!(stub.complete(&request("q")), Err(LlmError::ResponseEmpty));
    }

    #[test]
    fn stub_script_parsing() {
        let stub = ScriptedStub::from_toml(
            r#"
default = "fallback"

[[rule]]
id = "both"
contains = ["alpha", "beta"]
response = "both seen"

[[rule]]
regex = '(?m)^Question: (\w+)'
response = "asked $1"
"#,
        )
        .unwrap();
        assert_eq!(stub.complete(&request("alpha beta")).unwrap(), "both seen");
        assert_eq!(stub.complete(&request("alpha\nQuestion: gamma")).unwrap(), "asked gamma");
        assert_eq!(stub.calls()[1].rule.as_deref(), Some("rule-2"));

        assert!(ScriptedStub::from_toml("[[rule]]\nresponse = \"x\"").is_err());
        assert!(ScriptedStub::from_toml("default = \"d\"\n[[rule]]\nregex = \"(\"\nresponse = \"x\"").is_err());
        assert!(ScriptedStub::from_toml("default = \"d\"\n[[rule]]\ncontains = \"a\"\nregex = \"b\"\nresponse = \"x\"").is_err());
    }

    /// Serves canned HTTP responses in order; returns the base URL and captured requests.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut payload = vec![0; len];
                reader.read_exact(&mut payload).unwrap();
                log.lock().unwrap().push(head + &String::from_utf8(payload).unwrap());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (url, seen)
    }

    fn remote(url: &str) -> RemoteChat {
        let mut cfg = RemoteChatConfig::new(url, "test-model");
        cfg.api_key = Some("sk-top-secret".into());
        cfg.retry = RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
        };
        RemoteChat::new(cfg).unwrap()
    }

    #[test]
    fn remote_retries_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"SELECT 1"}}]}"#.to_string();
        let (url, seen) = serve(vec![(503, "{}".into()), (200, ok)]);
        let chat = remote(&url);
        assert_eq!(chat.complete(&request("q")).unwrap(), "SELECT 1");
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].starts_with("POST /chat/completions"));
        assert!(seen[1].contains("\"model\":\"test-model\""));
        assert!(seen[1].contains("\"role\":\"system\""));
        assert!(seen[1].to_ascii_lowercase().contains("authorization: bearer sk-top-secret"));
    }

    #[test]
    fn remote_empty_and_client_errors() {
        let empty = r#"{"choices":[{"message":{"content":"  "}}]}"#.to_string();
        let (url, _) = serve(vec![(200, empty), (400, "{}".into())]);
        let chat = remote(&url);
        assert_eq!(chat.complete(&request("q")), Err(LlmError::ResponseEmpty));
        assert!(matches!(chat.complete(&request("q")), Err(LlmError::InvalidResponse(_))));
    }

    #[test]
    fn remote_unreachable_after_three_attempts() {
        // Bind then drop to get a port nothing listens on.
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let url = format!("http://sk-top-secret@127.0.0.1:{port}");
        let chat = remote(&url);
        match chat.complete(&request("q")) {
            Err(e @ LlmError::ProviderUnavailable { attempts: 3, .. }) => {
                assert!(!e.to_string().contains("sk-top-secret"), "{e}");
            }
            other => panic!("{other:?}"),
        }
        assert!(!format!("{chat:?}").contains("sk-top-secret"));
    }
}
