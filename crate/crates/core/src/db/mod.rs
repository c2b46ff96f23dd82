//! Database access: handles, hierarchy snapshots, query execution and the
//! result-equivalence relation.

mod canonical;
mod result;
mod snapshot;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use canonical::{canonicalize, normalize_cell, results_equivalent, CanonicalResult, NormCell, NumTolerance};
pub use result::{Cell, ResultTable};
pub use snapshot::{ColumnEntry, SchemaEntry, SchemaSnapshot, TableEntry, FLAT_SCHEMA};

use crate::sqltok::quote_ident;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Dialect {
    Sqlite,
    SnowflakeLike,
}

impl std::fmt::Display for Dialect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dialect::Sqlite => "SQLITE",
            Dialect::SnowflakeLike => "SNOWFLAKE_LIKE",
        })
    }
}

#[derive(Debug, Error)]
pub enum DbError {
    #[error("database not found: {0}")]
    NotFound(PathBuf),
    #[error("corrupt or unreadable database {path}: {message}")]
    CorruptDatabase { path: PathBuf, message: String },
    #[error("unsupported backend: dialect {0} needs a warehouse connector, only SQLITE files can be opened")]
    Unsupported(Dialect),
    #[error("query failed: {0}")]
    QueryFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecErrorKind {
    Syntax,
    Runtime,
    Timeout,
}

/// A failed execution. `message` is the engine's text, verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?} error: {message}")]
pub struct ExecError {
    pub kind: ExecErrorKind,
    pub message: String,
}

impl ExecError {
    pub fn runtime(message: impl Into<String>) -> Self {
        ExecError { kind: ExecErrorKind::Runtime, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecLimits {
    pub max_rows: usize,
    pub timeout: Duration,
}

impl ExecLimits {
    /// Limits used by the exploration tool.
    pub fn exploration() -> Self {
        ExecLimits { max_rows: 100, timeout: Duration::from_secs(30) }
    }

    /// Limits used when executing candidate answers.
    pub fn answer() -> Self {
        ExecLimits { max_rows: 10_000, timeout: Duration::from_secs(60) }
    }
}

/// An open database. Exploratory handles are opened read-only.
pub struct DbHandle {
    location: PathBuf,
    dialect: Dialect,
    read_only: bool,
    conn: Connection,
    attached: Vec<(String, PathBuf)>,
}

impl std::fmt::Debug for DbHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DbHandle")
            .field("location", &self.location)
            .field("dialect", &self.dialect)
            .field("read_only", &self.read_only)
            .field("attached", &self.attached)
            .finish()
    }
}

pub fn open_database(location: impl AsRef<Path>, dialect: Dialect, read_only: bool) -> Result<DbHandle, DbError> {
    let location = location.as_ref().to_path_buf();
    if dialect != Dialect::Sqlite {
        return Err(DbError::Unsupported(dialect));
    }
    if !location.exists() {
        return Err(DbError::NotFound(location));
    }
    let mut flags = OpenFlags::SQLITE_OPEN_URI | OpenFlags::SQLITE_OPEN_NO_MUTEX;
    flags |= if read_only {
        OpenFlags::SQLITE_OPEN_READ_ONLY
    } else {
        OpenFlags::SQLITE_OPEN_READ_WRITE
    };
    let corrupt = |e: rusqlite::Error| DbError::CorruptDatabase {
        path: location.clone(),
        message: e.to_string(),
    };
    let conn = Connection::open_with_flags(&location, flags).map_err(corrupt)?;
    conn.query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get::<_, i64>(0))
        .map_err(corrupt)?;
    if read_only {
        conn.pragma_update(None, "query_only", true).map_err(corrupt)?;
    }
    Ok(DbHandle { location, dialect, read_only, conn, attached: Vec::new() })
}

impl DbHandle {
    pub fn location(&self) -> &Path {
        &self.location
    }

    pub fn dialect(&self) -> Dialect {
        self.dialect
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    pub fn attached(&self) -> &[(String, PathBuf)] {
        &self.attached
    }

    /// Attaches another database file as a named schema.
    pub fn attach(&mut self, schema: &str, path: impl AsRef<Path>) -> Result<(), DbError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(DbError::NotFound(path.to_path_buf()));
        }
        let mode = if self.read_only { "ro" } else { "rw" };
        let uri = format!("file:{}?mode={mode}", path.display());
        // ATTACH is rejected under query_only, so lift it briefly.
        if self.read_only {
            self.conn.pragma_update(None, "query_only", false).map_err(query_failed)?;
        }
        let res = self
            .conn
            .execute(&format!("ATTACH DATABASE ?1 AS {}", quote_ident(schema)), [uri]);
        if self.read_only {
            self.conn.pragma_update(None, "query_only", true).map_err(query_failed)?;
        }
        res.map_err(query_failed)?;
        self.attached.push((schema.to_string(), path.to_path_buf()));
        Ok(())
    }

    /// Re-opens the same database (and attachments) as a separate handle.
    pub fn reopen(&self) -> Result<DbHandle, DbError> {
        let mut h = open_database(&self.location, self.dialect, self.read_only)?;
        for (name, path) in &self.attached {
            h.attach(name, path)?;
        }
        Ok(h)
    }

    pub fn snapshot_hierarchy(&self) -> Result<SchemaSnapshot, DbError> {
        snapshot::build(self)
    }

    pub(crate) fn conn(&self) -> &Connection {
        &self.conn
    }

    /// Runs one statement. Never panics on model-written SQL; failures come
    /// back as [`ExecError`] with the engine's message.
    pub fn execute_sql(&self, sql: &str, limits: ExecLimits) -> Result<ResultTable, ExecError> {
        let deadline = Instant::now() + limits.timeout;
        self.conn
            .progress_handler(1_000, Some(move || Instant::now() > deadline));
        let res = self.run_query(sql, limits.max_rows);
        self.conn.progress_handler(0, None::<fn() -> bool>);
        res.map_err(|e| classify(e, Instant::now() > deadline))
    }

    fn run_query(&self, sql: &str, max_rows: usize) -> rusqlite::Result<ResultTable> {
        let mut stmt = self.conn.prepare(sql)?;
        let column_names: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
        let width = column_names.len();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        let mut total = 0usize;
        while let Some(row) = rows.next()? {
            total += 1;
            if out.len() < max_rows {
                let mut cells = Vec::with_capacity(width);
                for i in 0..width {
                    cells.push(cell_from(row.get_ref(i)?));
                }
                out.push(cells);
            }
        }
        Ok(ResultTable {
            column_names,
            truncated: total > out.len(),
            row_count_before_truncation: total,
            rows: out,
        })
    }
}

pub(crate) fn cell_from(v: ValueRef<'_>) -> Cell {
    match v {
        ValueRef::Null => Cell::Null,
        ValueRef::Integer(i) => Cell::Integer(i),
        ValueRef::Real(r) => Cell::Real(r),
        ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
    }
}

fn query_failed(e: rusqlite::Error) -> DbError {
    DbError::QueryFailed(e.to_string())
}

fn classify(e: rusqlite::Error, past_deadline: bool) -> ExecError {
    let message = e.to_string();
    let lower = message.to_lowercase();
    let kind = if past_deadline || lower.contains("interrupted") {
        ExecErrorKind::Timeout
    } else if lower.contains("syntax error") || lower.contains("incomplete input") || lower.contains("unrecognized token") {
        ExecErrorKind::Syntax
    } else {
        ExecErrorKind::Runtime
    };
    ExecError { kind, message }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn scratch() -> (TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.db");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE t(x INTEGER, y TEXT);
             WITH RECURSIVE n(i) AS (SELECT 1 UNION ALL SELECT i+1 FROM n WHERE i < 500)
             INSERT INTO t SELECT i, 'row' || i FROM n;",
        )
        .unwrap();
        (dir, path)
    }

    #[test]
    fn select_literal() {
        let (_d, path) = scratch();
        let db = open_database(&path, Dialect::Sqlite, true).unwrap();
        let t = db.execute_sql("SELECT 1 AS x", ExecLimits::exploration()).unwrap();
        assert_eq!(t.column_names, vec!["x"]);
        assert_eq!(t.rows, vec![vec![Cell::Integer(1)]]);
        assert!(!t.truncated);
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = open_database("missing.db", Dialect::Sqlite, true).unwrap_err();
        assert!(matches!(err, DbError::NotFound(_)));
    }

    #[test]
    fn snowflake_dialect_is_unsupported() {
        let (_d, path) = scratch();
        let err = open_database(&path, Dialect::SnowflakeLike, true).unwrap_err();
        assert!(matches!(err, DbError::Unsupported(Dialect::SnowflakeLike)));
        assert!(err.to_string().contains("SNOWFLAKE_LIKE"), "{err}");
    }

    #[test]
    fn garbage_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.db");
        std::fs::write(&path, vec![7u8; 4096]).unwrap();
        let err = open_database(&path, Dialect::Sqlite, true).unwrap_err();
        assert!(matches!(err, DbError::CorruptDatabase { .. }), "{err}");
    }

    #[test]
    fn missing_table_error_carries_engine_text() {
        let (_d, path) = scratch();
        let db = open_database(&path, Dialect::Sqlite, true).unwrap();
        let err = db
            .execute_sql("SELECT * FROM no_such_table", ExecLimits::exploration())
            .unwrap_err();
        assert!(err.message.contains("no such table: no_such_table"), "{}", err.message);
        assert_eq!(err.kind, ExecErrorKind::Runtime);
        let err = db.execute_sql("SELEC 1", ExecLimits::exploration()).unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Syntax);
    }

    #[test]
    fn truncation_flag_tracks_limit() {
        let (_d, path) = scratch();
        let db = open_database(&path, Dialect::Sqlite, true).unwrap();
        let t = db.execute_sql("SELECT * FROM t", ExecLimits::exploration()).unwrap();
        assert_eq!(t.rows.len(), 100);
        assert!(t.truncated);
        assert_eq!(t.row_count_before_truncation, 500);
        let limits = ExecLimits { max_rows: 500, ..ExecLimits::exploration() };
        let t = db.execute_sql("SELECT * FROM t", limits).unwrap();
        assert!(!t.truncated);
    }

    #[test]
    fn read_only_rejects_writes() {
        let (_d, path) = scratch();
        let before = std::fs::read(&path).unwrap();
        let db = open_database(&path, Dialect::Sqlite, true).unwrap();
        for sql in ["INSERT INTO t VALUES (1, 'x')", "DELETE FROM t", "DROP TABLE t", "CREATE TABLE z(a)"] {
            assert!(db.execute_sql(sql, ExecLimits::exploration()).is_err(), "{sql}");
        }
        drop(db);
        assert_eq!(before, std::fs::read(&path).unwrap());
    }

    #[test]
    fn runaway_query_times_out() {
        let (_d, path) = scratch();
        let db = open_database(&path, Dialect::Sqlite, true).unwrap();
        let limits = ExecLimits { max_rows: 10, timeout: Duration::from_millis(200) };
        let start = Instant::now();
        let err = db
            .execute_sql(
                "WITH RECURSIVE n(i) AS (SELECT 1 UNION ALL SELECT i+1 FROM n) SELECT count(*) FROM n",
                limits,
            )
            .unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Timeout);
        assert!(start.elapsed() < Duration::from_secs(5));
        // Handle stays usable afterwards.
        assert!(db.execute_sql("SELECT 1", limits).is_ok());
    }
}
