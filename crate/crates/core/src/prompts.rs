//! Agent-specific prompt assembly under an estimated token budget.
//!
//! Template files are plain text split into `[system]` and `[instruction]`
//! blocks, with `{{slot}}` markers filled at render time. Retrieved context,
//! few-shot examples and history are appended by the builders.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structured::{ResultTable, SchemaDescription, TypeTag};
use crate::vectorstore::SearchHit;

pub const GROUNDING_DIRECTIVE: &str = "Do not use prior knowledge";
pub const DEFAULT_BUDGET: usize = 6_000;
pub const MAX_FEW_SHOTS: usize = 2;

const RAG_TEMPLATE: &str = include_str!("../templates/rag.txt");
const SQL_TEMPLATE: &str = include_str!("../templates/sql.txt");
const SQL_ANSWER_TEMPLATE: &str = include_str!("../templates/sql_answer.txt");
const GRAPH_TEMPLATE: &str = include_str!("../templates/graph.txt");
const SQL_EXAMPLES: &str = include_str!("../config/sql_examples.json");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("no retrieved context to ground the answer")]
    NoContext,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("table cannot be charted: {0}")]
    NotChartable(String),
    #[error("slot `{0}` was not filled")]
    MissingSlot(String),
    #[error("the minimal prompt ({needed} estimated tokens) exceeds the budget of {budget}")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
}

/// Rough token count: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Rag,
    Sql,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub messages: Vec<Message>,
    pub estimated_tokens: usize,
    /// Chunk ids of the retrieved hits that made it into the prompt, best first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub included_chunk_ids: Vec<String>,
}

impl RenderedPrompt {
    fn new(messages: Vec<Message>) -> Self {
        let estimated_tokens = messages.iter().map(|m| estimate_tokens(&m.content)).sum();
        Self {
            messages,
            estimated_tokens,
            included_chunk_ids: Vec::new(),
        }
    }

    /// All message text, for matching and logging.
    pub fn full_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

/// One earlier question/answer pair of the session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub question: String,
    pub answer: String,
}

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub agent_kind: AgentKind,
    pub system_preamble: String,
    pub instruction_blocks: Vec<String>,
    pub context_slots: Vec<String>,
}

impl PromptTemplate {
    pub fn parse(agent_kind: AgentKind, text: &str) -> Result<Self, PromptError> {
        let mut system: Option<String> = None;
        let mut instructions = Vec::new();
        let mut current: Option<(bool, Vec<&str>)> = None;
        let mut flush = |block: Option<(bool, Vec<&str>)>| -> Result<(), PromptError> {
            if let Some((is_system, lines)) = block {
                let body = lines.join("\n").trim().to_string();
                if is_system {
                    if system.replace(body).is_some() {
                        return Err(PromptError::InvalidTemplate("more than one [system] block".into()));
                    }
                } else if !body.is_empty() {
                    instructions.push(body);
                }
            }
            Ok(())
        };
        for line in text.lines() {
            match line.trim() {
                "[system]" => flush(current.replace((true, Vec::new())))?,
                "[instruction]" => flush(current.replace((false, Vec::new())))?,
                _ => match current.as_mut() {
                    Some((_, lines)) => lines.push(line),
                    None if line.trim().is_empty() => {}
                    None => return Err(PromptError::InvalidTemplate("text before the first block".into())),
                },
            }
        }
        flush(current.take())?;
        let system_preamble = system.ok_or_else(|| PromptError::InvalidTemplate("missing [system] block".into()))?;

        let mut seen = HashSet::new();
        let context_slots = std::iter::once(&system_preamble)
            .chain(&instructions)
            .flat_map(|block| slot_re().captures_iter(block).map(|c| c[1].to_string()))
            .filter(|s| seen.insert(s.clone()))
            .collect();
        let template = Self {
            agent_kind,
            system_preamble,
            instruction_blocks: instructions,
            context_slots,
        };
        if agent_kind == AgentKind::Rag && !template.instruction_blocks.iter().any(|b| b.contains(GROUNDING_DIRECTIVE)) {
            return Err(PromptError::InvalidTemplate(format!(
                "rag template must contain \"{GROUNDING_DIRECTIVE}\""
            )));
        }
        Ok(template)
    }

    /// System message text with every slot filled.
    pub fn render(&self, slots: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        if let Some(missing) = self.context_slots.iter().find(|s| !slots.contains_key(s.as_str())) {
            return Err(PromptError::MissingSlot(missing.clone()));
        }
        let fill = |block: &str| {
            slot_re()
                .replace_all(block, |c: &regex::Captures| slots[&c[1]].clone())
                .into_owned()
        };
        let mut parts = vec![fill(&self.system_preamble)];
        parts.extend(self.instruction_blocks.iter().map(|b| fill(b)));
        Ok(parts.join("\n\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlExample {
    pub question: String,
    pub sql: String,
}

pub fn parse_sql_examples(text: &str) -> Result<Vec<SqlExample>, PromptError> {
    serde_json::from_str(text).map_err(|e| PromptError::InvalidTemplate(format!("sql examples: {e}")))
}

/// Every template the agents use, loaded once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub rag: PromptTemplate,
    pub sql: PromptTemplate,
    pub sql_answer: PromptTemplate,
    pub graph: PromptTemplate,
    pub sql_examples: Vec<SqlExample>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            rag: PromptTemplate::parse(AgentKind::Rag, RAG_TEMPLATE).expect("bundled rag template"),
            sql: PromptTemplate::parse(AgentKind::Sql, SQL_TEMPLATE).expect("bundled sql template"),
            sql_answer: PromptTemplate::parse(AgentKind::Sql, SQL_ANSWER_TEMPLATE).expect("bundled answer template"),
            graph: PromptTemplate::parse(AgentKind::Graph, GRAPH_TEMPLATE).expect("bundled graph template"),
            sql_examples: parse_sql_examples(SQL_EXAMPLES).expect("bundled sql examples"),
        }
    }
}

impl PromptTemplates {
    /// Loads `rag.txt`, `sql.txt`, `sql_answer.txt`, `graph.txt` and
    /// `sql_examples.json` from `dir`; absent files keep the bundled default.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = Self::default();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(PromptError::InvalidTemplate(format!("{}: {e}", path.display()))),
            }
        };
        if let Some(s) = read("rag.txt")? {
            t.rag = PromptTemplate::parse(AgentKind::Rag, &s)?;
        }
        if let Some(s) = read("sql.txt")? {
            t.sql = PromptTemplate::parse(AgentKind::Sql, &s)?;
        }
        if let Some(s) = read("sql_answer.txt")? {
            t.sql_answer = PromptTemplate::parse(AgentKind::Sql, &s)?;
        }
        if let Some(s) = read("graph.txt")? {
            t.graph = PromptTemplate::parse(AgentKind::Graph, &s)?;
        }
        if let Some(s) = read("sql_examples.json")? {
            t.sql_examples = parse_sql_examples(&s)?;
        }
        Ok(t)
    }
}

pub fn citation_tag(hit: &SearchHit) -> String {
    let m = &hit.chunk.metadata;
    format!("[{} | {} | {}]", m.source, m.contract, m.clause)
}

/// Parses `[source | contract | clause]` tags back out of prompt text.
pub fn parse_citation_tags(text: &str) -> Vec<(String, String, String)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?m)^\[([^|\]\n]+) \| ([^|\]\n]+) \| ([^\]\n]+)\]$").unwrap());
    re.captures_iter(text)
        .map(|c| (c[1].to_string(), c[2].to_string(), c[3].to_string()))
        .collect()
}

fn history_block(history: &[HistoryTurn]) -> Option<String> {
    if history.is_empty() {
        return None;
    }
    let turns: Vec<String> = history
        .iter()
        .map(|t| format!("User: {}\nAssistant: {}", t.question, t.answer))
        .collect();
    Some(format!("Conversation so far:\n{}", turns.join("\n")))
}

fn words(s: &str) -> HashSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() > 2)
        .map(str::to_lowercase)
        .collect()
}

/// Up to `n` examples sharing the most words with `question`, file order on ties.
fn pick_examples<'a>(examples: &'a [SqlExample], question: &str, n: usize) -> Vec<&'a SqlExample> {
    let q = words(question);
    let mut scored: Vec<(usize, usize, &SqlExample)> = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| (words(&ex.question).intersection(&q).count(), i, ex))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(n).map(|(_, _, ex)| ex).collect()
}

/// Scope phrase naming the contracts the hits come from.
fn scope_phrase(hits: &[SearchHit]) -> String {
    let mut contracts: Vec<&str> = Vec::new();
    for h in hits {
        let c = h.chunk.metadata.contract.as_str();
        if !contracts.contains(&c) {
            contracts.push(c);
        }
    }
    match contracts.as_slice() {
        [] => String::new(),
        [one] => format!(" from contract {one}"),
        many => format!(" from contracts {}", many.join(", ")),
    }
}

#[derive(Debug, Clone, Default)]
pub struct PromptBuilder {
    pub templates: PromptTemplates,
}

impl PromptBuilder {
    pub fn new(templates: PromptTemplates) -> Self {
        Self { templates }
    }

    fn rag_messages(&self, question: &str, hits: &[SearchHit], history: &[HistoryTurn]) -> Result<Vec<Message>, PromptError> {
        let slots = BTreeMap::from([("scope", scope_phrase(hits))]);
        let system = self.templates.rag.render(&slots)?;
        let mut user = Vec::new();
        if let Some(h) = history_block(history) {
            user.push(h);
        }
        let excerpts: Vec<String> = hits
            .iter()
            .map(|h| format!("{}\n{}", citation_tag(h), h.chunk.text))
            .collect();
        user.push(format!("Contract excerpts:\n\n{}", excerpts.join("\n\n")));
        user.push(format!("Question: {question}"));
        Ok(vec![Message::system(system), Message::user(user.join("\n\n"))])
    }

    /// Grounded prompt over retrieved hits (best first).
    ///
    /// Over budget, the oldest history turns go first, then the lowest-ranked
    /// hits. The directive and the question are never dropped.
    pub fn build_rag_prompt(
        &self,
        question: &str,
        hits: &[SearchHit],
        history: &[HistoryTurn],
        budget: usize,
    ) -> Result<RenderedPrompt, PromptError> {
        if question.trim().is_empty() {
            return Err(PromptError::EmptyQuestion);
        }
        if hits.is_empty() {
            return Err(PromptError::NoContext);
        }
        let mut history_from = 0;
        let mut hit_count = hits.len();
        loop {
            let prompt = RenderedPrompt::new(self.rag_messages(question, &hits[..hit_count], &history[history_from..])?);
            if prompt.estimated_tokens <= budget {
                return Ok(RenderedPrompt {
                    included_chunk_ids: hits[..hit_count].iter().map(|h| h.chunk_id.clone()).collect(),
                    ..prompt
                });
            }
            if history_from < history.len() {
                history_from += 1;
            } else if hit_count > 1 {
                hit_count -= 1;
            } else {
                let minimal = RenderedPrompt::new(self.rag_messages(question, &[], &[])?);
                if minimal.estimated_tokens > budget {
                    return Err(PromptError::BudgetTooSmall {
                        needed: minimal.estimated_tokens,
                        budget,
                    });
                }
                // Not even the best hit fits next to the question.
                return Err(PromptError::NoContext);
            }
        }
    }

    fn sql_messages(
        &self,
        question: &str,
        schema: &SchemaDescription,
        dialect: &str,
        history: &[HistoryTurn],
    ) -> Result<Vec<Message>, PromptError> {
        let slots = BTreeMap::from([("dialect", dialect.to_string()), ("schema", schema.ddl_text())]);
        let mut system = self.templates.sql.render(&slots)?;
        let examples = pick_examples(&self.templates.sql_examples, question, MAX_FEW_SHOTS);
        if !examples.is_empty() {
            let shots: Vec<String> = examples
                .iter()
                .map(|ex| format!("Question: {}\nSQL: {}", ex.question, ex.sql))
                .collect();
            system.push_str(&format!("\n\nExamples:\n{}", shots.join("\n\n")));
        }
        let mut user = Vec::new();
        if let Some(h) = history_block(history) {
            user.push(h);
        }
        user.push(format!("Question: {question}"));
        Ok(vec![Message::system(system), Message::user(user.join("\n\n"))])
    }

    /// Text-to-SQL prompt: schema DDL, dialect, single-SELECT instruction and
    /// up to two few-shot pairs. History is trimmed oldest-first to fit `budget`.
    pub fn build_sql_prompt(
        &self,
        question: &str,
        schema: &SchemaDescription,
        dialect: &str,
        history: &[HistoryTurn],
        budget: usize,
    ) -> Result<RenderedPrompt, PromptError> {
        if question.trim().is_empty() {
            return Err(PromptError::EmptyQuestion);
        }
        let mut from = 0;
        loop {
            let prompt = RenderedPrompt::new(self.sql_messages(question, schema, dialect, &history[from..])?);
            if prompt.estimated_tokens <= budget {
                return Ok(prompt);
            }
            if from == history.len() {
                return Err(PromptError::BudgetTooSmall {
                    needed: prompt.estimated_tokens,
                    budget,
                });
            }
            from += 1;
        }
    }

    /// Follow-up asking for a corrected statement after validation failed.
    pub fn sql_correction(&self, prompt: &RenderedPrompt, question: &str, rejected_sql: &str, error: &str) -> RenderedPrompt {
        let mut messages = prompt.messages.clone();
        messages.push(Message::user(format!(
            "The previous answer was rejected.\nRejected SQL: {rejected_sql}\nReason: {error}\n\
             Respond with one corrected SELECT statement only.\n\nQuestion: {question}"
        )));
        RenderedPrompt::new(messages)
    }

    /// Second SQL-agent turn: explain the executed result in prose.
    pub fn build_sql_answer_prompt(&self, question: &str, sql: &str, table: &ResultTable) -> Result<RenderedPrompt, PromptError> {
        let slots = BTreeMap::from([("sql", sql.to_string())]);
        let system = self.templates.sql_answer.render(&slots)?;
        let user = format!("Query result:\n{}\nQuestion: {question}", table.to_markdown());
        Ok(RenderedPrompt::new(vec![Message::system(system), Message::user(user)]))
    }

    /// Asks the model which columns of `table` to draw as a bar chart.
    pub fn build_graph_prompt(&self, table: &ResultTable) -> Result<RenderedPrompt, PromptError> {
        let (labels, numerics) = chart_columns(table);
        if numerics.is_empty() {
            return Err(PromptError::NotChartable("no numeric column".into()));
        }
        if labels.is_empty() {
            return Err(PromptError::NotChartable("no label column".into()));
        }
        let slots = BTreeMap::from([
            ("row_count", table.rows.len().to_string()),
            ("label_columns", labels.join(", ")),
            ("numeric_columns", numerics.join(", ")),
        ]);
        let system = self.templates.graph.render(&slots)?;
        Ok(RenderedPrompt::new(vec![
            Message::system(system),
            Message::user(format!("Table:\n{}", table.to_markdown())),
        ]))
    }
}

/// (label-like columns, numeric columns) by name.
pub fn chart_columns(table: &ResultTable) -> (Vec<String>, Vec<String>) {
    let mut labels = Vec::new();
    let mut numerics = Vec::new();
    for c in &table.columns {
        match c.type_tag {
            TypeTag::Text => labels.push(c.name.clone()),
            TypeTag::Integer | TypeTag::Real => numerics.push(c.name.clone()),
            _ => {}
        }
    }
    (labels, numerics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Chunk, ChunkMetadata, Overlap};
    use crate::structured::{contracts_schema, Cell, ColumnInfo, TableDescription};
    use crate::vectorstore::Metric;

    fn hit(rank: usize, contract: &str, clause: &str, text: &str) -> SearchHit {
        let id = format!("c{contract}#{rank:04}").replace('/', "_");
        SearchHit {
            chunk_id: id.clone(),
            score: 1.0 - rank as f64 * 0.01,
            metric: Metric::Cosine,
            chunk: Chunk {
                chunk_id: id,
                text: text.to_string(),
                metadata: ChunkMetadata {
                    source: format!("c{}.txt", contract.split('/').next().unwrap()),
                    contract: contract.to_string(),
                    clause: clause.to_string(),
                },
                overlap: Overlap::default(),
                embedding: None,
            },
        }
    }

    #[test]
    fn estimator() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("12345678"), 2);
        assert_eq!(estimate_tokens("123456789"), 3);
    }

    #[test]
    fn rag_prompt_structure() {
        let b = PromptBuilder::default();
        let hits = [
            hit(1, "123/2024", "2. CONTRACT MANAGER", "The manager is Alice Souza."),
            hit(2, "123/2024", "1. OBJECT", "Mainframe support."),
        ];
        let p = b.build_rag_prompt("Who is the manager?", &hits, &[], DEFAULT_BUDGET).unwrap();
        assert_eq!(p.messages[0].role, Role::System);
        let sys = &p.messages[0].content;
        assert!(sys.starts_with("You are a contract management assistant"));
        assert!(sys.contains("Do not use prior knowledge"));
        assert!(sys.contains("Retrieve relevant sections from contract 123/2024"));
        let user = p.last_user().unwrap();
        assert!(user.ends_with("Question: Who is the manager?"));
        assert!(!user.contains("Conversation so far"));
        let first = user.find("[c123.txt | 123/2024 | 2. CONTRACT MANAGER]").unwrap();
        let second = user.find("[c123.txt | 123/2024 | 1. OBJECT]").unwrap();
        assert!(first < second);
        assert!(user.contains("Alice Souza"));
        assert_eq!(p.included_chunk_ids.len(), 2);
        assert!(p.estimated_tokens <= DEFAULT_BUDGET);
    }

    #[test]
    fn rag_prompt_truncation_order() {
        let b = PromptBuilder::default();
        let hits: Vec<_> = (1..=10)
            .map(|r| hit(r, "123/2024", &format!("{r}. CLAUSE"), &"filler text ".repeat(40)))
            .collect();
        let history = vec![
            HistoryTurn {
                question: "old question".into(),
                answer: "x".repeat(400),
            },
            HistoryTurn {
                question: "recent question".into(),
                answer: "y".repeat(40),
            },
        ];
        let full = b.build_rag_prompt("What now?", &hits, &history, 100_000).unwrap();
        assert_eq!(full.included_chunk_ids.len(), 10);

        // Room for everything except the older turn.
        let budget = full.estimated_tokens - 50;
        let p = b.build_rag_prompt("What now?", &hits, &history, budget).unwrap();
        assert!(!p.full_text().contains("old question"));
        assert!(p.full_text().contains("recent question"));
        assert_eq!(p.included_chunk_ids.len(), 10);

        let tight = b.build_rag_prompt("What now?", &hits, &history, 900).unwrap();
        assert!(tight.estimated_tokens <= 900);
        assert!(!tight.full_text().contains("recent question"));
        let kept = tight.included_chunk_ids.len();
        assert!((1..10).contains(&kept));
        let expected: Vec<_> = hits[..kept].iter().map(|h| h.chunk_id.clone()).collect();
        assert_eq!(tight.included_chunk_ids, expected);
        assert!(tight.full_text().contains(GROUNDING_DIRECTIVE));
        assert!(tight.last_user().unwrap().ends_with("Question: What now?"));
    }

    #[test]
    fn rag_prompt_errors() {
        let b = PromptBuilder::default();
        assert_eq!(b.build_rag_prompt("q", &[], &[], 1000), Err(PromptError::NoContext));
        let hits = [hit(1, "123/2024", "1. X", "text")];
        assert!(matches!(
            b.build_rag_prompt("q", &hits, &[], 10),
            Err(PromptError::BudgetTooSmall { .. })
        ));
        assert_eq!(b.build_rag_prompt(" ", &hits, &[], 1000), Err(PromptError::EmptyQuestion));
    }

    #[test]
    fn citation_tags_round_trip() {
        let b = PromptBuilder::default();
        let hits = [
            hit(1, "123/2024", "2. CONTRACT MANAGER", "a"),
            hit(2, "456/2023", "1. OBJECT", "b"),
        ];
        let p = b.build_rag_prompt("q", &hits, &[], DEFAULT_BUDGET).unwrap();
        let tags = parse_citation_tags(p.last_user().unwrap());
        let ids: Vec<_> = tags
            .iter()
            .map(|(s, c, cl)| {
                hits.iter()
                    .find(|h| {
                        let m = &h.chunk.metadata;
                        (&m.source, &m.contract, &m.clause) == (s, c, cl)
                    })
                    .unwrap()
                    .chunk_id
                    .clone()
            })
            .collect();
        assert_eq!(ids, p.included_chunk_ids);
        assert!(p.messages[0].content.contains("from contracts 123/2024, 456/2023"));
    }

    #[test]
    fn sql_prompt_structure() {
        let b = PromptBuilder::default();
        let q = "Who are the managers of contracts that we have with IBM?";
        let p = b.build_sql_prompt(q, &contracts_schema(), "SQLite", &[], DEFAULT_BUDGET).unwrap();
        let sys = &p.messages[0].content;
        assert!(sys.contains("CREATE TABLE contracts"));
        assert!(sys.contains("exactly one SQLite SELECT statement"));
        assert_eq!(sys.matches("\nSQL: ").count(), 2);
        // "Who manages the contracts with Oracle?" shares the most words.
        assert!(sys.contains("Who manages the contracts with Oracle?"));
        assert!(!p.full_text().contains("Conversation so far"));
        assert!(p.last_user().unwrap().ends_with(q));
    }

    #[test]
    fn sql_prompt_lists_every_table_in_order() {
        let mut schema = contracts_schema();
        schema.tables.push(TableDescription {
            name: "suppliers".into(),
            ddl: "CREATE TABLE suppliers (name TEXT)".into(),
        });
        let p = PromptBuilder::default()
            .build_sql_prompt("q?", &schema, "SQLite", &[], DEFAULT_BUDGET)
            .unwrap();
        let sys = &p.messages[0].content;
        assert!(sys.find("CREATE TABLE contracts").unwrap() < sys.find("CREATE TABLE suppliers").unwrap());
    }

    #[test]
    fn sql_prompt_with_history() {
        let history = [HistoryTurn {
            question: "How many active contracts?".into(),
            answer: "2".into(),
        }];
        let p = PromptBuilder::default()
            .build_sql_prompt("And expired?", &contracts_schema(), "SQLite", &history, DEFAULT_BUDGET)
            .unwrap();
        assert!(p.last_user().unwrap().contains("User: How many active contracts?\nAssistant: 2"));
        assert_eq!(
            PromptBuilder::default().build_sql_prompt("", &contracts_schema(), "SQLite", &[], DEFAULT_BUDGET),
            Err(PromptError::EmptyQuestion)
        );
    }

    fn table(cols: &[(&str, TypeTag)], rows: Vec<Vec<Cell>>) -> ResultTable {
        ResultTable {
            columns: cols
                .iter()
                .map(|(n, t)| ColumnInfo {
                    name: n.to_string(),
                    type_tag: *t,
                })
                .collect(),
            rows,
            truncated: false,
        }
    }

    #[test]
    fn graph_prompt() {
        let b = PromptBuilder::default();
        let t = table(
            &[("supplier", TypeTag::Text), ("total_value", TypeTag::Real)],
            vec![
                vec![Cell::Text("IBM".into()), Cell::Real(1.0)],
                vec![Cell::Text("Oracle".into()), Cell::Real(2.0)],
                vec![Cell::Text("SAP".into()), Cell::Real(3.0)],
            ],
        );
        let p = b.build_graph_prompt(&t).unwrap();
        assert!(p.full_text().contains("bar graph"));
        assert!(p.full_text().contains("| Oracle | 2 |"));
        assert!(p.full_text().contains("(3 rows)"));

        let single = table(&[("s", TypeTag::Text), ("n", TypeTag::Integer)], vec![vec![Cell::Text("A".into()), Cell::Integer(1)]]);
        assert!(b.build_graph_prompt(&single).is_ok());

        let text_only = table(&[("s", TypeTag::Text)], vec![vec![Cell::Text("A".into())]]);
        assert!(matches!(b.build_graph_prompt(&text_only), Err(PromptError::NotChartable(_))));
    }

    #[test]
    fn template_parsing() {
        let t = PromptTemplate::parse(AgentKind::Sql, "[system]\nHello {{who}}\n[instruction]\nUse {{ dialect }}.\n").unwrap();
        assert_eq!(t.context_slots, ["who", "dialect"]);
        assert_eq!(t.render(&BTreeMap::from([("who", "x".to_string())])), Err(PromptError::MissingSlot("dialect".into())));
        assert!(PromptTemplate::parse(AgentKind::Rag, "[system]\nno directive\n").is_err());
        assert!(PromptTemplate::parse(AgentKind::Sql, "stray\n[system]\nx").is_err());
        assert!(PromptTemplate::parse(AgentKind::Sql, "[instruction]\nx").is_err());
    }

    #[test]
    fn load_dir_overrides_and_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("sql.txt"), "[system]\nCustom SQL agent for {{dialect}}.\n").unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.sql.system_preamble, "Custom SQL agent for {{dialect}}.");
        assert_eq!(t.rag, PromptTemplates::default().rag);
    }
}
