//! Read-only gate for generated SQL.
//!
//! Checks run in a fixed order so every input maps to exactly one outcome:
//! tokenize, forbidden keyword scan (outside literals, comments and quoted
//! identifiers), statement count, parse, statement kind, table references.

use std::collections::BTreeSet;
use std::ops::ControlFlow;

use serde::Serialize;
use sqlparser::ast::{ObjectName, ObjectNamePart, Query, Statement, Visit, Visitor};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use sqlparser::tokenizer::{Token, Tokenizer};
use thiserror::Error;

use super::SchemaDescription;

const FORBIDDEN: &[&str] = &[
    "INSERT", "UPDATE", "DELETE", "UPSERT", "MERGE", "REPLACE", "DROP", "ALTER", "CREATE", "TRUNCATE", "ATTACH",
    "DETACH", "PRAGMA", "VACUUM", "REINDEX", "ANALYZE", "BEGIN", "COMMIT", "ROLLBACK", "SAVEPOINT", "RELEASE",
    "GRANT", "REVOKE", "INTO", "LOAD_EXTENSION",
];

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SqlValidationError {
    #[error("statement is not read-only: {reason}")]
    NotReadOnly { reason: String },
    #[error("expected a single statement, found {count}")]
    MultiStatement { count: usize },
    #[error("unknown table `{table}`")]
    UnknownTable { table: String },
    #[error("could not parse SQL: {message}")]
    ParseError { message: String },
}

/// A single SELECT over published tables. Only [`validate_sql`] builds one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidatedQuery {
    sql_text: String,
    referenced_tables: BTreeSet<String>,
}

impl ValidatedQuery {
    pub fn sql_text(&self) -> &str {
        &self.sql_text
    }

    pub fn referenced_tables(&self) -> &BTreeSet<String> {
        &self.referenced_tables
    }
}

fn next_significant(tokens: &[Token], from: usize) -> Option<&Token> {
    tokens[from..].iter().find(|t| !matches!(t, Token::Whitespace(_)))
}

fn forbidden_keyword(tokens: &[Token]) -> Option<String> {
    tokens.iter().enumerate().find_map(|(i, tok)| {
        let Token::Word(w) = tok else { return None };
        if w.quote_style.is_some() {
            return None;
        }
        let upper = w.value.to_ascii_uppercase();
        if !FORBIDDEN.contains(&upper.as_str()) {
            return None;
        }
        // replace(x, y, z) is a scalar function, not REPLACE INTO.
        if upper == "REPLACE" && matches!(next_significant(tokens, i + 1), Some(Token::LParen)) {
            return None;
        }
        Some(upper)
    })
}

fn statement_count(tokens: &[Token]) -> usize {
    tokens
        .split(|t| matches!(t, Token::SemiColon))
        .filter(|seg| seg.iter().any(|t| !matches!(t, Token::Whitespace(_))))
        .count()
}

#[derive(Default)]
struct Relations {
    ctes: BTreeSet<String>,
    tables: Vec<ObjectName>,
}

impl Visitor for Relations {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        if let Some(with) = &query.with {
            for cte in &with.cte_tables {
                self.ctes.insert(cte.alias.name.value.to_lowercase());
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_relation(&mut self, relation: &ObjectName) -> ControlFlow<()> {
        self.tables.push(relation.clone());
        ControlFlow::Continue(())
    }
}

fn name_parts(name: &ObjectName) -> Vec<String> {
    name.0
        .iter()
        .map(|part| match part {
            ObjectNamePart::Identifier(ident) => ident.value.to_lowercase(),
            ObjectNamePart::Function(f) => f.name.value.to_lowercase(),
        })
        .collect()
}

/// Accepts exactly one read-only SELECT over tables in `schema`.
pub fn validate_sql(sql: &str, schema: &SchemaDescription) -> Result<ValidatedQuery, SqlValidationError> {
    let trimmed = sql.trim();
    if trimmed.is_empty() {
        return Err(SqlValidationError::ParseError {
            message: "empty statement".into(),
        });
    }
    let dialect = SQLiteDialect {};
    let tokens = Tokenizer::new(&dialect, trimmed)
        .tokenize()
        .map_err(|e| SqlValidationError::ParseError { message: e.to_string() })?;

    if let Some(keyword) = forbidden_keyword(&tokens) {
        return Err(SqlValidationError::NotReadOnly {
            reason: format!("forbidden keyword {keyword}"),
        });
    }
    let count = statement_count(&tokens);
    if count > 1 {
        return Err(SqlValidationError::MultiStatement { count });
    }

    let mut statements = Parser::parse_sql(&dialect, trimmed)
        .map_err(|e| SqlValidationError::ParseError { message: e.to_string() })?;
    if statements.len() != 1 {
        return Err(SqlValidationError::MultiStatement {
            count: statements.len(),
        });
    }
    let statement = statements.remove(0);
    if !matches!(statement, Statement::Query(_)) {
        let kind = statement.to_string();
        let kind = kind.split_whitespace().next().unwrap_or("statement").to_ascii_uppercase();
        return Err(SqlValidationError::NotReadOnly {
            reason: format!("only SELECT is allowed, found {kind}"),
        });
    }

    let mut rel = Relations::default();
    let _ = statement.visit(&mut rel);
    let mut referenced = BTreeSet::new();
    for name in &rel.tables {
        let parts = name_parts(name);
        let table = match parts.as_slice() {
            [t] => t,
            [schema_name, t] if schema_name == "main" => t,
            _ => {
                return Err(SqlValidationError::UnknownTable {
                    table: parts.join("."),
                })
            }
        };
        if rel.ctes.contains(table) {
            continue;
        }
        if !schema.has_table(table) {
            return Err(SqlValidationError::UnknownTable { table: table.clone() });
        }
        referenced.insert(table.clone());
    }

    Ok(ValidatedQuery {
        sql_text: trimmed.trim_end_matches(';').trim_end().to_string(),
        referenced_tables: referenced,
    })
}
