//! Pattern-rule question router.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vectorstore::{ClauseMatch, MetadataField, MetadataFilter};

const SHIPPED_RULES: &str = include_str!("../../config/routing_rules.toml");

pub const DEFAULT_ROUTE_ID: &str = "default";

#[derive(Debug, Error, PartialEq)]
pub enum RouterError {
    #[error("rule table: {0}")]
    Parse(String),
    #[error("rule `{id}`: pattern does not compile: {reason}")]
    BadPattern { id: String, reason: String },
    #[error("rule `{id}`: capture group `{group}` not in pattern")]
    UnknownGroup { id: String, group: String },
    #[error("priority {priority} used by more than one rule")]
    DuplicatePriority { priority: i64 },
    #[error("rule id `{0}` used more than once")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Rag,
    Sql,
}

#[derive(Debug, Clone)]
pub struct RoutingRule {
    pub id: String,
    pub priority: i64,
    pub pattern: Regex,
    pub target: Target,
    /// Capture group name to filter field.
    pub extractors: BTreeMap<String, MetadataField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRoute {
    pub target: Target,
    pub filter: MetadataFilter,
    /// Id of the rule that matched, or `"default"`.
    pub rule_id: String,
}

#[derive(Debug, Clone)]
pub struct Synonym {
    term: Regex,
    expansions: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default = "default_target")]
    default_target: Target,
    #[serde(default, rename = "rule")]
    rules: Vec<RuleEntry>,
    #[serde(default, rename = "synonym")]
    synonyms: Vec<SynonymEntry>,
}

fn default_target() -> Target {
    Target::Rag
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleEntry {
    id: String,
    priority: i64,
    target: Target,
    pattern: String,
    #[serde(default)]
    extract: BTreeMap<String, MetadataField>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynonymEntry {
    term: String,
    expansions: Vec<String>,
}

/// Rules sorted by descending priority plus the fallback target.
#[derive(Debug, Clone)]
pub struct RuleTable {
    rules: Vec<RoutingRule>,
    default_target: Target,
    synonyms: Vec<Synonym>,
}

impl RuleTable {
    pub fn new(mut rules: Vec<RoutingRule>, default_target: Target) -> Result<Self, RouterError> {
        let mut priorities = HashSet::new();
        let mut ids = HashSet::new();
        for r in &rules {
            if !priorities.insert(r.priority) {
                return Err(RouterError::DuplicatePriority { priority: r.priority });
            }
            if r.id == DEFAULT_ROUTE_ID || !ids.insert(r.id.clone()) {
                return Err(RouterError::DuplicateId(r.id.clone()));
            }
            let names: HashSet<&str> = r.pattern.capture_names().flatten().collect();
            if let Some(group) = r.extractors.keys().find(|g| !names.contains(g.as_str())) {
                return Err(RouterError::UnknownGroup {
                    id: r.id.clone(),
                    group: group.clone(),
                });
            }
        }
        rules.sort_by_key(|r| std::cmp::Reverse(r.priority));
        Ok(Self {
            rules,
            default_target,
            synonyms: Vec::new(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, RouterError> {
        let file: RuleFile = toml::from_str(text).map_err(|e| RouterError::Parse(e.to_string()))?;
        let rules = file
            .rules
            .into_iter()
            .map(|e| {
                let pattern = Regex::new(&e.pattern).map_err(|err| RouterError::BadPattern {
                    id: e.id.clone(),
                    reason: err.to_string(),
                })?;
                Ok(RoutingRule {
                    id: e.id,
                    priority: e.priority,
                    pattern,
                    target: e.target,
                    extractors: e.extract,
                })
            })
            .collect::<Result<Vec<_>, RouterError>>()?;
        let mut table = Self::new(rules, file.default_target)?;
        for s in file.synonyms {
            let term = RegexBuilder::new(&format!(r"\b{}\b", regex::escape(&s.term)))
                .case_insensitive(true)
                .build()
                .map_err(|e| RouterError::Parse(e.to_string()))?;
            table.synonyms.push(Synonym {
                term,
                expansions: s.expansions,
            });
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, RouterError> {
        let text = fs::read_to_string(path).map_err(|e| RouterError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The rule table bundled with the crate.
    pub fn shipped() -> Self {
        Self::from_toml(SHIPPED_RULES).expect("bundled routing rules")
    }

    pub fn rules(&self) -> &[RoutingRule] {
        &self.rules
    }

    pub fn default_target(&self) -> Target {
        self.default_target
    }

    /// Total and deterministic: the highest-priority match wins, otherwise the default.
    pub fn route(&self, question: &str) -> QueryRoute {
        for rule in &self.rules {
            let Some(caps) = rule.pattern.captures(question) else {
                continue;
            };
            let mut filter = MetadataFilter::any();
            for (group, field) in &rule.extractors {
                if let Some(m) = caps.name(group) {
                    filter.set(*field, m.as_str().trim());
                    if *field == MetadataField::Clause {
                        filter.clause_match = ClauseMatch::Contains;
                    }
                }
            }
            return QueryRoute {
                target: rule.target,
                filter,
                rule_id: rule.id.clone(),
            };
        }
        QueryRoute {
            target: self.default_target,
            filter: MetadataFilter::any(),
            rule_id: DEFAULT_ROUTE_ID.to_string(),
        }
    }

    /// Question text used for retrieval: the question followed by the
    /// expansions of every synonym term it mentions.
    pub fn expand_synonyms(&self, question: &str) -> String {
        let mut out = question.to_string();
        for s in &self.synonyms {
            if s.term.is_match(question) {
                for e in &s.expansions {
                    out.push(' ');
                    out.push_str(e);
                }
            }
        }
        out
    }
}
