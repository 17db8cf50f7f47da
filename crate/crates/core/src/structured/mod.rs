//! The relational side: contract records, their text rendering for
//! embedding, and guarded SQL execution against an embedded SQLite store.

mod store;
mod validate;

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ingest::{is_contract_number, Chunk, ChunkMetadata, Overlap};

pub use store::{Cell, ColumnInfo, ContractStore, ResultTable, TypeTag, DEFAULT_ROW_CAP, DEFAULT_TIMEOUT_MS};
pub use validate::{validate_sql, SqlValidationError, ValidatedQuery};

/// Source label for chunks rendered from database rows.
pub const DB_SOURCE: &str = "db";
/// Clause label for chunks rendered from database rows.
pub const DB_RECORD_CLAUSE: &str = "DB_RECORD";

#[derive(Debug, Error, PartialEq)]
pub enum StructuredError {
    #[error("contract `{0}` appears more than once in the batch")]
    DuplicateInBatch(String),
    #[error("invalid value for `{field}`: {reason}")]
    InvariantViolation { field: &'static str, reason: String },
    #[error("contracts file line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error("query exceeded its {0} ms time limit")]
    ExecutionTimeout(u64),
    #[error("database error: {0}")]
    EngineError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContractStatus {
    Active,
    Expired,
    Terminated,
}

impl ContractStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ContractStatus::Active => "active",
            ContractStatus::Expired => "expired",
            ContractStatus::Terminated => "terminated",
        }
    }
}

impl FromStr for ContractStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "active" => Ok(Self::Active),
            "expired" => Ok(Self::Expired),
            "terminated" => Ok(Self::Terminated),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// Currency amount held as integer cents; text form is `1234.50`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i64);

impl Money {
    pub fn from_cents(cents: i64) -> Self {
        Self(cents)
    }

    pub fn cents(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Nearest cent of a float read back from the database.
    pub fn from_f64(v: f64) -> Self {
        Self((v * 100.0).round() as i64)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl FromStr for Money {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (negative, digits) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (whole, frac) = digits.split_once('.').unwrap_or((digits, ""));
        let all_digits = |t: &str| t.bytes().all(|b| b.is_ascii_digit());
        if whole.is_empty() || !all_digits(whole) || !all_digits(frac) || frac.len() > 2 {
            return Err(format!("`{s}` is not a decimal amount with at most 2 fraction digits"));
        }
        let whole: i64 = whole.parse().map_err(|_| format!("`{s}` is out of range"))?;
        let frac: i64 = format!("{frac:0<2}").parse().unwrap_or(0);
        let cents = whole
            .checked_mul(100)
            .and_then(|c| c.checked_add(frac))
            .ok_or_else(|| format!("`{s}` is out of range"))?;
        Ok(Self(if negative { -cents } else { cents }))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractRecord {
    pub contract_number: String,
    pub supplier: String,
    pub manager: String,
    pub subject: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub value: Money,
    pub status: ContractStatus,
}

impl ContractRecord {
    pub fn validate(&self) -> Result<(), StructuredError> {
        let violation = |field, reason: &str| StructuredError::InvariantViolation {
            field,
            reason: reason.to_string(),
        };
        if !is_contract_number(&self.contract_number) {
            return Err(violation("contract_number", "must look like NNN/YYYY"));
        }
        for (field, value) in [
            ("supplier", &self.supplier),
            ("manager", &self.manager),
            ("subject", &self.subject),
        ] {
            if value.trim().is_empty() {
                return Err(violation(field, "must not be empty"));
            }
        }
        if self.end_date < self.start_date {
            return Err(violation("end_date", "ends before start_date"));
        }
        if self.value.cents() < 0 {
            return Err(violation("value", "must not be negative"));
        }
        Ok(())
    }
}

/// Renders a record as one deterministic sentence, one clause per field.
pub fn flatten_record_to_text(r: &ContractRecord) -> String {
    format!(
        "Contract {}: supplier {}; manager {}; subject {}; valid {} to {}; value {}; status {}.",
        r.contract_number,
        r.supplier,
        r.manager,
        r.subject,
        r.start_date.format("%Y-%m-%d"),
        r.end_date.format("%Y-%m-%d"),
        r.value,
        r.status.as_str()
    )
}

/// A record as an (unembedded) chunk for the shared vector store.
pub fn record_chunk(r: &ContractRecord) -> Chunk {
    Chunk {
        chunk_id: format!("{DB_SOURCE}#{}", r.contract_number),
        text: flatten_record_to_text(r),
        metadata: ChunkMetadata {
            source: DB_SOURCE.to_string(),
            contract: r.contract_number.clone(),
            clause: DB_RECORD_CLAUSE.to_string(),
        },
        overlap: Overlap::default(),
        embedding: None,
    }
}

/// Parses a header-row delimited contracts file.
pub fn parse_contracts_csv(text: &str) -> Result<Vec<ContractRecord>, StructuredError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<ContractRecord>() {
        let record = row.map_err(|e| StructuredError::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        })?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDescription {
    pub name: String,
    /// `CREATE TABLE` text with one `--` comment per column.
    pub ddl: String,
}

/// What the SQL agent is told about the database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescription {
    pub dialect: String,
    pub tables: Vec<TableDescription>,
}

impl SchemaDescription {
    pub fn ddl_text(&self) -> String {
        self.tables.iter().map(|t| t.ddl.trim_end()).collect::<Vec<_>>().join("\n\n")
    }

    pub fn has_table(&self, name: &str) -> bool {
        self.tables.iter().any(|t| t.name.eq_ignore_ascii_case(name))
    }
}

pub const CONTRACTS_DDL: &str = "CREATE TABLE contracts (
    contract_number TEXT PRIMARY KEY, -- contract identifier, format NNN/YYYY
    supplier TEXT NOT NULL, -- supplier company name, e.g. 'IBM'
    manager TEXT NOT NULL, -- full name of the designated contract manager
    subject TEXT NOT NULL, -- short description of the contract object
    start_date TEXT NOT NULL, -- ISO-8601 date (YYYY-MM-DD) the contract starts
    end_date TEXT NOT NULL, -- ISO-8601 date (YYYY-MM-DD) the contract ends
    value REAL NOT NULL, -- total contract value in currency units
    status TEXT NOT NULL -- one of 'active', 'expired', 'terminated'
);";

pub fn contracts_schema() -> SchemaDescription {
    SchemaDescription {
        dialect: "SQLite".to_string(),
        tables: vec![TableDescription {
            name: "contracts".to_string(),
            ddl: CONTRACTS_DDL.to_string(),
        }],
    }
}
