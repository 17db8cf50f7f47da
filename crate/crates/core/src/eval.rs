//! Benchmark harness: runs a question file through the engine and reports
//! answer-match and route-match rates per category.
//!
//! Matching is plain substring containment. The report holds no timings, so
//! under a scripted model it is byte-for-byte reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Engine, Target};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("question file: {0}")]
    Parse(String),
    #[error("question file has no questions")]
    Empty,
    #[error("question {index}: {reason}")]
    InvalidQuestion { index: usize, reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Direct,
    Indirect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalQuestion {
    pub id: String,
    pub question: String,
    pub category: Category,
    /// Substrings the answer must all contain.
    pub expect: Vec<String>,
    pub route: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    pub category: Category,
    pub expected_route: Target,
    pub actual_route: Target,
    pub rule_id: String,
    pub route_match: bool,
    pub answer_match: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub questions: usize,
    pub answer_matches: usize,
    pub route_matches: usize,
    pub answer_match_rate: f64,
    pub route_match_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: CategoryScore,
    pub categories: BTreeMap<Category, CategoryScore>,
    pub results: Vec<QuestionResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn parse_questions(text: &str) -> Result<Vec<EvalQuestion>, EvalError> {
    let questions: Vec<EvalQuestion> = serde_json::from_str(text).map_err(|e| EvalError::Parse(e.to_string()))?;
    if questions.is_empty() {
        return Err(EvalError::Empty);
    }
    for (i, q) in questions.iter().enumerate() {
        if q.question.trim().is_empty() {
            return Err(EvalError::InvalidQuestion {
                index: i + 1,
                reason: "empty question".into(),
            });
        }
        if q.expect.is_empty() {
            return Err(EvalError::InvalidQuestion {
                index: i + 1,
                reason: "no expected substrings".into(),
            });
        }
    }
    Ok(questions)
}

pub fn load_questions(path: &Path) -> Result<Vec<EvalQuestion>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_questions(&text)
}

fn score(results: &[&QuestionResult]) -> CategoryScore {
    let questions = results.len();
    let answer_matches = results.iter().filter(|r| r.answer_match).count();
    let route_matches = results.iter().filter(|r| r.route_match).count();
    let rate = |n: usize| if questions == 0 { 0.0 } else { n as f64 / questions as f64 };
    CategoryScore {
        questions,
        answer_matches,
        route_matches,
        answer_match_rate: rate(answer_matches),
        route_match_rate: rate(route_matches),
    }
}

/// Asks every question in order within one fresh session.
pub fn run_eval(engine: &Engine, questions: &[EvalQuestion]) -> EvalReport {
    static RUN: AtomicU64 = AtomicU64::new(0);
    let session = format!("eval-{}-{}", std::process::id(), RUN.fetch_add(1, Ordering::Relaxed));
    let results: Vec<QuestionResult> = questions
        .iter()
        .map(|q| {
            let env = engine.orchestrate(&session, &q.question);
            let missing: Vec<String> = q
                .expect
                .iter()
                .filter(|s| !env.answer_text.contains(s.as_str()))
                .cloned()
                .collect();
            QuestionResult {
                id: q.id.clone(),
                category: q.category,
                expected_route: q.route,
                actual_route: env.route.target,
                rule_id: env.route.rule_id.clone(),
                route_match: env.route.target == q.route,
                answer_match: missing.is_empty() && env.failure.is_none(),
                missing,
                failure: env.failure.map(|f| f.message),
            }
        })
        .collect();
    let mut categories = BTreeMap::new();
    for cat in [Category::Direct, Category::Indirect] {
        let subset: Vec<&QuestionResult> = results.iter().filter(|r| r.category == cat).collect();
        if !subset.is_empty() {
            categories.insert(cat, score(&subset));
        }
    }
    EvalReport {
        total: score(&results.iter().collect::<Vec<_>>()),
        categories,
        results,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rejects_empty_and_bad_entries() {
        assert!(matches!(parse_questions("[]"), Err(EvalError::Empty)));
        assert!(matches!(parse_questions("{"), Err(EvalError::Parse(_))));
        let no_expect = r#"[{"id":"q","question":"x","category":"direct","expect":[],"route":"rag"}]"#;
        assert!(matches!(parse_questions(no_expect), Err(EvalError::InvalidQuestion { index: 1, .. })));
        let ok = r#"[{"id":"q","question":"x","category":"indirect","expect":["2"],"route":"sql"}]"#;
        assert_eq!(parse_questions(ok).unwrap()[0].route, Target::Sql);
    }
}
