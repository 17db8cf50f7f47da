use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rusqlite::{params, Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    contracts_schema, ContractRecord, ContractStatus, Money, SchemaDescription, StructuredError, ValidatedQuery,
    CONTRACTS_DDL,
};

pub const DEFAULT_ROW_CAP: usize = 500;
pub const DEFAULT_TIMEOUT_MS: u64 = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeTag {
    Integer,
    Real,
    Text,
    Blob,
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
}

impl Cell {
    pub fn type_tag(&self) -> TypeTag {
        match self {
            Cell::Null => TypeTag::Null,
            Cell::Integer(_) => TypeTag::Integer,
            Cell::Real(_) => TypeTag::Real,
            Cell::Text(_) => TypeTag::Text,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Integer(i) => Some(*i as f64),
            Cell::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Integer(i) => write!(f, "{i}"),
            Cell::Real(r) => write!(f, "{r}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<ColumnInfo>,
    pub rows: Vec<Vec<Cell>>,
    #[serde(default)]
    pub truncated: bool,
}

impl ResultTable {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.columns.len())
    }

    /// Markdown rendering used inside prompts and CLI output.
    pub fn to_markdown(&self) -> String {
        let header = self.columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(" | ");
        let rule = vec!["---"; self.columns.len()].join(" | ");
        let mut out = format!("| {header} |\n| {rule} |\n");
        for row in &self.rows {
            let cells = row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" | ");
            out.push_str(&format!("| {cells} |\n"));
        }
        if self.truncated {
            out.push_str("(result truncated)\n");
        }
        out
    }
}

fn decl_tag(decl: Option<&str>) -> Option<TypeTag> {
    let decl = decl?.to_ascii_uppercase();
    Some(if decl.contains("INT") {
        TypeTag::Integer
    } else if decl.contains("REAL") || decl.contains("FLOA") || decl.contains("DOUB") {
        TypeTag::Real
    } else if decl.contains("CHAR") || decl.contains("TEXT") || decl.contains("CLOB") {
        TypeTag::Text
    } else {
        return None;
    })
}

enum Location {
    File(PathBuf),
    Memory(String),
}

/// Embedded SQLite holding the `contracts` table.
///
/// Loads go through one serialized writer connection. Every query opens its
/// own read-only connection with `query_only` set, so reads run concurrently
/// and cannot write even if validation were bypassed.
pub struct ContractStore {
    location: Location,
    writer: Mutex<Connection>,
    row_cap: usize,
}

impl std::fmt::Debug for ContractStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let loc = match &self.location {
            Location::File(p) => p.display().to_string(),
            Location::Memory(uri) => uri.clone(),
        };
        f.debug_struct("ContractStore").field("location", &loc).finish()
    }
}

fn engine(e: rusqlite::Error) -> StructuredError {
    let msg = match &e {
        rusqlite::Error::SqliteFailure(_, Some(m)) => m.clone(),
        other => other.to_string(),
    };
    StructuredError::EngineError(msg.chars().take(200).collect())
}

impl ContractStore {
    pub fn open(path: &Path) -> Result<Self, StructuredError> {
        let conn = Connection::open(path).map_err(engine)?;
        conn.pragma_update(None, "journal_mode", "WAL").map_err(engine)?;
        Self::init(Location::File(path.to_path_buf()), conn)
    }

    pub fn open_in_memory() -> Result<Self, StructuredError> {
        static NEXT: AtomicU64 = AtomicU64::new(0);
        let uri = format!(
            "file:clauseqa-mem-{}-{}?mode=memory&cache=shared",
            std::process::id(),
            NEXT.fetch_add(1, Ordering::Relaxed)
        );
        let flags = OpenFlags::SQLITE_OPEN_READ_WRITE | OpenFlags::SQLITE_OPEN_CREATE | OpenFlags::SQLITE_OPEN_URI;
        let conn = Connection::open_with_flags(&uri, flags).map_err(engine)?;
        Self::init(Location::Memory(uri), conn)
    }

    fn init(location: Location, conn: Connection) -> Result<Self, StructuredError> {
        let exists: bool = conn
            .query_row(
                "SELECT count(*) FROM sqlite_master WHERE type = 'table' AND name = 'contracts'",
                [],
                |r| r.get::<_, i64>(0),
            )
            .map_err(engine)?
            > 0;
        if !exists {
            conn.execute_batch(CONTRACTS_DDL).map_err(engine)?;
        }
        Ok(Self {
            location,
            writer: Mutex::new(conn),
            row_cap: DEFAULT_ROW_CAP,
        })
    }

    pub fn with_row_cap(mut self, cap: usize) -> Self {
        self.row_cap = cap.max(1);
        self
    }

    pub fn schema(&self) -> SchemaDescription {
        contracts_schema()
    }

    fn open_reader(&self) -> Result<Connection, StructuredError> {
        let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_URI | OpenFlags::SQLITE_OPEN_NO_MUTEX;
        let conn = match &self.location {
            Location::File(p) => Connection::open_with_flags(p, flags),
            Location::Memory(uri) => Connection::open_with_flags(uri, flags),
        }
        .map_err(engine)?;
        conn.pragma_update(None, "query_only", "ON").map_err(engine)?;
        Ok(conn)
    }

    /// Upserts by contract number inside one transaction.
    pub fn load_contracts(&self, records: &[ContractRecord]) -> Result<usize, StructuredError> {
        let mut seen = std::collections::HashSet::new();
        for r in records {
            r.validate()?;
            if !seen.insert(r.contract_number.as_str()) {
                return Err(StructuredError::DuplicateInBatch(r.contract_number.clone()));
            }
        }
        let mut conn = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let tx = conn.transaction().map_err(engine)?;
        {
            let mut stmt = tx
                .prepare(
                    "INSERT INTO contracts (contract_number, supplier, manager, subject, start_date, end_date, value, status)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)
                     ON CONFLICT(contract_number) DO UPDATE SET
                       supplier = excluded.supplier, manager = excluded.manager, subject = excluded.subject,
                       start_date = excluded.start_date, end_date = excluded.end_date,
                       value = excluded.value, status = excluded.status",
                )
                .map_err(engine)?;
            for r in records {
                stmt.execute(params![
                    r.contract_number,
                    r.supplier,
                    r.manager,
                    r.subject,
                    r.start_date.format("%Y-%m-%d").to_string(),
                    r.end_date.format("%Y-%m-%d").to_string(),
                    r.value.as_f64(),
                    r.status.as_str(),
                ])
                .map_err(engine)?;
            }
        }
        tx.commit().map_err(engine)?;
        Ok(records.len())
    }

    pub fn count(&self) -> Result<usize, StructuredError> {
        let conn = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        conn.query_row("SELECT count(*) FROM contracts", [], |r| r.get::<_, i64>(0))
            .map(|n| n as usize)
            .map_err(engine)
    }

    pub fn list_contracts(&self) -> Result<Vec<ContractRecord>, StructuredError> {
        let conn = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut stmt = conn
            .prepare(
                "SELECT contract_number, supplier, manager, subject, start_date, end_date, value, status
                 FROM contracts ORDER BY contract_number",
            )
            .map_err(engine)?;
        let rows = stmt
            .query_map([], |row| {
                Ok((
                    row.get::<_, String>(0)?,
                    row.get::<_, String>(1)?,
                    row.get::<_, String>(2)?,
                    row.get::<_, String>(3)?,
                    row.get::<_, String>(4)?,
                    row.get::<_, String>(5)?,
                    row.get::<_, f64>(6)?,
                    row.get::<_, String>(7)?,
                ))
            })
            .map_err(engine)?;
        rows.map(|row| {
            let (contract_number, supplier, manager, subject, start, end, value, status) = row.map_err(engine)?;
            let date = |s: &str| {
                chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                    .map_err(|e| StructuredError::EngineError(format!("stored date `{s}`: {e}")))
            };
            Ok(ContractRecord {
                contract_number,
                supplier,
                manager,
                subject,
                start_date: date(&start)?,
                end_date: date(&end)?,
                value: Money::from_f64(value),
                status: status.parse::<ContractStatus>().map_err(StructuredError::EngineError)?,
            })
        })
        .collect()
    }

    /// SHA-256 over the schema and every row; equal hashes mean equal contents.
    pub fn content_hash(&self) -> Result<String, StructuredError> {
        let conn = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut hasher = Sha256::new();
        let mut schema = conn
            .prepare("SELECT type, name, coalesce(sql, '') FROM sqlite_master ORDER BY type, name")
            .map_err(engine)?;
        let mut rows = schema.query([]).map_err(engine)?;
        while let Some(row) = rows.next().map_err(engine)? {
            for i in 0..3 {
                hasher.update(row.get::<_, String>(i).map_err(engine)?.as_bytes());
                hasher.update([0u8]);
            }
        }
        drop(rows);
        let mut data = conn
            .prepare("SELECT * FROM contracts ORDER BY contract_number")
            .map_err(engine)?;
        let width = data.column_count();
        let mut rows = data.query([]).map_err(engine)?;
        while let Some(row) = rows.next().map_err(engine)? {
            for i in 0..width {
                let v: rusqlite::types::Value = row.get(i).map_err(engine)?;
                hasher.update(format!("{v:?}").as_bytes());
                hasher.update([0u8]);
            }
            hasher.update([1u8]);
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// Runs a validated query with a row cap and a wall-clock limit.
    pub fn execute_sql(&self, q: &ValidatedQuery, timeout_ms: u64) -> Result<ResultTable, StructuredError> {
        let conn = self.open_reader()?;
        conn.busy_timeout(Duration::from_millis(timeout_ms)).map_err(engine)?;
        let interrupt = conn.get_interrupt_handle();
        let (done_tx, done_rx) = mpsc::channel::<()>();
        let watchdog = thread::spawn(move || {
            if done_rx.recv_timeout(Duration::from_millis(timeout_ms)) == Err(mpsc::RecvTimeoutError::Timeout) {
                interrupt.interrupt();
                return true;
            }
            false
        });

        let result = self.run_query(&conn, q.sql_text());
        let _ = done_tx.send(());
        let timed_out = watchdog.join().unwrap_or(false);
        match result {
            Err(_) if timed_out => Err(StructuredError::ExecutionTimeout(timeout_ms)),
            Err(rusqlite::Error::SqliteFailure(f, _)) if f.code == rusqlite::ErrorCode::OperationInterrupted => {
                Err(StructuredError::ExecutionTimeout(timeout_ms))
            }
            other => other.map_err(engine),
        }
    }

    fn run_query(&self, conn: &Connection, sql: &str) -> Result<ResultTable, rusqlite::Error> {
        let mut stmt = conn.prepare(sql)?;
        let decl: Vec<(String, Option<TypeTag>)> = stmt
            .columns()
            .iter()
            .map(|c| (c.name().to_string(), decl_tag(c.decl_type())))
            .collect();
        let width = decl.len();
        let mut rows_out = Vec::new();
        let mut truncated = false;
        let mut rows = stmt.query([])?;
        while let Some(row) = rows.next()? {
            if rows_out.len() == self.row_cap {
                truncated = true;
                break;
            }
            let mut cells = Vec::with_capacity(width);
            for i in 0..width {
                use rusqlite::types::ValueRef;
                cells.push(match row.get_ref(i)? {
                    ValueRef::Null => Cell::Null,
                    ValueRef::Integer(v) => Cell::Integer(v),
                    ValueRef::Real(v) => Cell::Real(v),
                    ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
                    ValueRef::Blob(b) => Cell::Text(format!("<{} byte blob>", b.len())),
                });
            }
            rows_out.push(cells);
        }
        let columns = decl
            .into_iter()
            .enumerate()
            .map(|(i, (name, declared))| {
                let observed = rows_out
                    .iter()
                    .map(|r| r[i].type_tag())
                    .find(|t| *t != TypeTag::Null);
                ColumnInfo {
                    name,
                    type_tag: observed.or(declared).unwrap_or(TypeTag::Null),
                }
            })
            .collect();
        Ok(ResultTable {
            columns,
            rows: rows_out,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::three;
    use super::super::{flatten_record_to_text, validate_sql};
    use super::*;

    fn store() -> ContractStore {
        let s = ContractStore::open_in_memory().unwrap();
        s.load_contracts(&three()).unwrap();
        s
    }

    fn run(s: &ContractStore, sql: &str) -> Result<ResultTable, StructuredError> {
        s.execute_sql(&validate_sql(sql, &s.schema()).unwrap(), DEFAULT_TIMEOUT_MS)
    }

    #[test]
    fn load_and_upsert() {
        let s = ContractStore::open_in_memory().unwrap();
        assert_eq!(s.load_contracts(&three()).unwrap(), 3);
        assert_eq!(s.load_contracts(&three()).unwrap(), 3);
        assert_eq!(s.count().unwrap(), 3);
        assert_eq!(s.list_contracts().unwrap(), three());
    }

    #[test]
    fn duplicate_in_batch() {
        let s = ContractStore::open_in_memory().unwrap();
        let mut batch = three();
        batch.push(batch[0].clone());
        assert_eq!(
            s.load_contracts(&batch),
            Err(StructuredError::DuplicateInBatch("123/2024".into()))
        );
        assert_eq!(s.count().unwrap(), 0);
    }

    #[test]
    fn count_active() {
        let t = run(&store(), "SELECT COUNT(*) FROM contracts WHERE status='active'").unwrap();
        assert_eq!(t.shape(), (1, 1));
        assert_eq!(t.rows[0][0], Cell::Integer(2));
        assert_eq!(t.columns[0].type_tag, TypeTag::Integer);
    }

    #[test]
    fn empty_table_keeps_columns() {
        let s = ContractStore::open_in_memory().unwrap();
        let t = run(&s, "SELECT supplier, value FROM contracts").unwrap();
        assert!(t.rows.is_empty());
        let names: Vec<_> = t.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["supplier", "value"]);
        assert_eq!(t.columns[1].type_tag, TypeTag::Real);
    }

    #[test]
    fn row_cap_truncates() {
        let s = ContractStore::open_in_memory().unwrap();
        let many: Vec<_> = (0..1000)
            .map(|i| {
                let mut r = three().remove(0);
                r.contract_number = format!("{i}/2020");
                r
            })
            .collect();
        s.load_contracts(&many).unwrap();
        let t = run(&s, "SELECT contract_number FROM contracts").unwrap();
        assert_eq!(t.rows.len(), 500);
        assert!(t.truncated);
        let small = s.with_row_cap(2000);
        let t = run(&small, "SELECT contract_number FROM contracts").unwrap();
        assert_eq!(t.rows.len(), 1000);
        assert!(!t.truncated);
    }

    #[test]
    fn runaway_query_times_out() {
        let s = store();
        let q = validate_sql(
            "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c",
            &s.schema(),
        )
        .unwrap();
        assert_eq!(s.execute_sql(&q, 100), Err(StructuredError::ExecutionTimeout(100)));
    }

    #[test]
    fn engine_errors_are_wrapped() {
        let err = run(&store(), "SELECT no_such_column FROM contracts").unwrap_err();
        assert!(matches!(err, StructuredError::EngineError(m) if m.contains("no_such_column")));
    }

    #[test]
    fn reader_connection_cannot_write() {
        let s = store();
        let conn = s.open_reader().unwrap();
        assert!(conn.execute("DELETE FROM contracts", []).is_err());
        assert!(conn.execute_batch("DROP TABLE contracts").is_err());
        assert_eq!(s.count().unwrap(), 3);
    }

    #[test]
    fn file_store_reader_is_read_only() {
        let dir = tempfile::tempdir().unwrap();
        let s = ContractStore::open(&dir.path().join("c.db")).unwrap();
        s.load_contracts(&three()).unwrap();
        assert!(s.open_reader().unwrap().execute("DELETE FROM contracts", []).is_err());
        let reopened = ContractStore::open(&dir.path().join("c.db")).unwrap();
        assert_eq!(reopened.count().unwrap(), 3);
    }

    #[test]
    fn sql_rows_match_flattened_text() {
        let s = store();
        let t = run(&s, "SELECT * FROM contracts ORDER BY contract_number").unwrap();
        for (row, record) in t.rows.iter().zip(three()) {
            let rebuilt = ContractRecord {
                contract_number: row[0].to_string(),
                supplier: row[1].to_string(),
                manager: row[2].to_string(),
                subject: row[3].to_string(),
                start_date: row[4].to_string().parse().unwrap(),
                end_date: row[5].to_string().parse().unwrap(),
                value: Money::from_f64(row[6].as_f64().unwrap()),
                status: row[7].to_string().parse().unwrap(),
            };
            assert_eq!(flatten_record_to_text(&rebuilt), flatten_record_to_text(&record));
        }
    }

    #[test]
    fn hash_changes_only_with_content() {
        let s = store();
        let h = s.content_hash().unwrap();
        run(&s, "SELECT * FROM contracts").unwrap();
        assert_eq!(s.content_hash().unwrap(), h);
        let mut r = three().remove(0);
        r.manager = "Someone Else".into();
        s.load_contracts(&[r]).unwrap();
        assert_ne!(s.content_hash().unwrap(), h);
    }
}
