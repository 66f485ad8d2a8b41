//! Read-only sandboxed SQL execution and result canonicalization.
//!
//! Every call to [`execute`] opens a private read-only connection, installs
//! an authorizer that only admits reads, and arms a progress handler that
//! interrupts the statement once the deadline passes. The result rows are
//! reduced to a [`CanonicalResultSet`]: a set of tuples with numerics
//! unified, which is the notion of "outputs match" used by the reward.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::hooks::{AuthAction, AuthContext, Authorization};
use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode, OpenFlags};
use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

/// VM instructions between deadline checks.
const PROGRESS_OPS: i32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub timeout_ms: u64,
    pub max_rows: usize,
    pub read_only: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            timeout_ms: 30_000,
            max_rows: 100_000,
            read_only: true,
        }
    }
}

impl SandboxConfig {
    pub fn with_timeout_ms(mut self, timeout_ms: u64) -> Self {
        self.timeout_ms = timeout_ms;
        self
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if self.timeout_ms == 0 {
            return Err(ExecError::Config("timeout_ms must be positive".into()));
        }
        if self.max_rows == 0 {
            return Err(ExecError::Config("max_rows must be positive".into()));
        }
        if !self.read_only {
            return Err(ExecError::Config("read_only must be true".into()));
        }
        Ok(())
    }
}

/// Harness-side failures. These never describe the SQL under test; a bad
/// query is always reported through [`ExecStatus`].
#[derive(Debug, Error)]
pub enum ExecError {
    #[error("database file {0} not found")]
    MissingDatabase(PathBuf),
    #[error("cannot open database {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
    #[error("invalid sandbox config: {0}")]
    Config(String),
    #[error("internal: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Success,
    SyntaxError,
    RuntimeError,
    Timeout,
    RowCapExceeded,
}

impl ExecStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecStatus::Success => "success",
            ExecStatus::SyntaxError => "syntax_error",
            ExecStatus::RuntimeError => "runtime_error",
            ExecStatus::Timeout => "timeout",
            ExecStatus::RowCapExceeded => "row_cap_exceeded",
        }
    }
}

impl fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<CanonicalResultSet>,
    pub row_count: usize,
    pub elapsed_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ExecutionOutcome {
    fn failed(status: ExecStatus, message: impl Into<String>, started: Instant) -> Self {
        ExecutionOutcome {
            status,
            rows: None,
            row_count: 0,
            elapsed_ms: started.elapsed().as_millis() as u64,
            message: Some(message.into()),
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == ExecStatus::Success
    }

    /// Both succeeded with equal canonical result sets. Row counts and
    /// timing are ignored.
    pub fn same_result(&self, other: &ExecutionOutcome) -> bool {
        self.is_success() && other.is_success() && self.rows == other.rows
    }
}

/// A value as produced by the engine (or by a test), before normalization.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarValue {
    Null,
    Bool(bool),
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl ScalarValue {
    /// SQL literal rendering, used for prompt sample rows.
    pub fn to_sql_literal(&self) -> String {
        match self {
            ScalarValue::Null => "NULL".into(),
            ScalarValue::Bool(b) => i64::from(*b).to_string(),
            ScalarValue::Integer(i) => i.to_string(),
            ScalarValue::Real(x) => format!("{x:?}"),
            ScalarValue::Text(t) => format!("'{}'", t.replace('\'', "''")),
            ScalarValue::Blob(b) => format!("X'{}'", hex::encode_upper(b)),
        }
    }
}

impl Serialize for ScalarValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ScalarValue::Bool(b) => s.serialize_bool(*b),
            ScalarValue::Real(x) => CanonicalValue::Real(*x).serialize(s),
            other => CanonicalValue::normalize(other).serialize(s),
        }
    }
}

/// A normalized scalar.
///
/// Integral reals inside the `i64` range collapse to [`CanonicalValue::Integer`],
/// booleans become `0`/`1`, and NaN becomes `Null` (SQLite never stores NaN).
#[derive(Debug, Clone)]
pub enum CanonicalValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl CanonicalValue {
    pub fn normalize(v: &ScalarValue) -> CanonicalValue {
        match v {
            ScalarValue::Null => CanonicalValue::Null,
            ScalarValue::Bool(b) => CanonicalValue::Integer(i64::from(*b)),
            ScalarValue::Integer(i) => CanonicalValue::Integer(*i),
            ScalarValue::Real(x) => Self::from_real(*x),
            ScalarValue::Text(s) => CanonicalValue::Text(s.clone()),
            ScalarValue::Blob(b) => CanonicalValue::Blob(b.clone()),
        }
    }

    fn from_real(x: f64) -> CanonicalValue {
        if x.is_nan() {
            return CanonicalValue::Null;
        }
        // 2^63 is exactly representable; anything below it that is integral fits.
        if x.fract() == 0.0 && x >= -9_223_372_036_854_775_808.0 && x < 9_223_372_036_854_775_808.0 {
            return CanonicalValue::Integer(x as i64);
        }
        CanonicalValue::Real(x)
    }

    pub fn to_scalar(&self) -> ScalarValue {
        match self {
            CanonicalValue::Null => ScalarValue::Null,
            CanonicalValue::Integer(i) => ScalarValue::Integer(*i),
            CanonicalValue::Real(x) => ScalarValue::Real(*x),
            CanonicalValue::Text(s) => ScalarValue::Text(s.clone()),
            CanonicalValue::Blob(b) => ScalarValue::Blob(b.clone()),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            CanonicalValue::Null => 0,
            CanonicalValue::Integer(_) => 1,
            CanonicalValue::Real(_) => 2,
            CanonicalValue::Text(_) => 3,
            CanonicalValue::Blob(_) => 4,
        }
    }
}

impl Ord for CanonicalValue {
    fn cmp(&self, other: &Self) -> Ordering {
        use CanonicalValue::*;
        match (self, other) {
            (Null, Null) => Ordering::Equal,
            (Integer(a), Integer(b)) => a.cmp(b),
            (Real(a), Real(b)) => a.total_cmp(b),
            (Text(a), Text(b)) => a.cmp(b),
            (Blob(a), Blob(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl PartialOrd for CanonicalValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for CanonicalValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for CanonicalValue {}

impl Serialize for CanonicalValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CanonicalValue::Null => s.serialize_none(),
            CanonicalValue::Integer(i) => s.serialize_i64(*i),
            CanonicalValue::Real(x) if x.is_finite() => s.serialize_f64(*x),
            CanonicalValue::Real(x) => s.serialize_str(if *x > 0.0 { "Infinity" } else { "-Infinity" }),
            CanonicalValue::Text(t) => s.serialize_str(t),
            CanonicalValue::Blob(b) => {
                let mut m = s.serialize_map(Some(1))?;
                m.serialize_entry("blob", &hex::encode(b))?;
                m.end()
            }
        }
    }
}

pub type Tuple = Vec<CanonicalValue>;

/// Order-insensitive, duplicate-free result of one query.
///
/// Two sets are equal iff they contain the same normalized tuples. The
/// arity of an empty set is 0, so all empty results compare equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct CanonicalResultSet {
    arity: usize,
    rows: BTreeSet<Tuple>,
}

impl CanonicalResultSet {
    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &Tuple> {
        self.rows.iter()
    }

    /// Rows converted back to engine values, in canonical order.
    pub fn to_raw_rows(&self) -> Vec<Vec<ScalarValue>> {
        self.rows
            .iter()
            .map(|t| t.iter().map(CanonicalValue::to_scalar).collect())
            .collect()
    }
}

impl Serialize for CanonicalResultSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        struct Rows<'a>(&'a BTreeSet<Tuple>);
        impl Serialize for Rows<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let mut seq = s.serialize_seq(Some(self.0.len()))?;
                for t in self.0 {
                    seq.serialize_element(t)?;
                }
                seq.end()
            }
        }
        let mut m = s.serialize_map(Some(2))?;
        m.serialize_entry("arity", &self.arity)?;
        m.serialize_entry("rows", &Rows(&self.rows))?;
        m.end()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("mixed arity in result rows: expected {expected}, row {row} has {found}")]
pub struct ArityError {
    pub expected: usize,
    pub row: usize,
    pub found: usize,
}

pub fn canonicalize(raw_rows: &[Vec<ScalarValue>]) -> Result<CanonicalResultSet, ArityError> {
    let Some(first) = raw_rows.first() else {
        return Ok(CanonicalResultSet::default());
    };
    let arity = first.len();
    let mut rows = BTreeSet::new();
    for (i, r) in raw_rows.iter().enumerate() {
        if r.len() != arity {
            return Err(ArityError {
                expected: arity,
                row: i,
                found: r.len(),
            });
        }
        rows.insert(r.iter().map(CanonicalValue::normalize).collect());
    }
    Ok(CanonicalResultSet { arity, rows })
}

/// Executes the first (and only) statement of `sql` against `db_path`.
pub fn execute(db_path: &Path, sql: &str, cfg: &SandboxConfig) -> Result<ExecutionOutcome, ExecError> {
    cfg.validate()?;
    if !db_path.is_file() {
        return Err(ExecError::MissingDatabase(db_path.to_path_buf()));
    }
    let started = Instant::now();

    match statement_shape(sql) {
        StatementShape::Empty => {
            return Ok(ExecutionOutcome::failed(ExecStatus::SyntaxError, "no SQL statement", started))
        }
        StatementShape::Multiple => {
            return Ok(ExecutionOutcome::failed(
                ExecStatus::SyntaxError,
                "multiple statements are not allowed",
                started,
            ))
        }
        StatementShape::Single => {}
    }

    let conn = open_sandboxed(db_path)?;
    let deadline = started + Duration::from_millis(cfg.timeout_ms);
    conn.progress_handler(PROGRESS_OPS, Some(move || Instant::now() > deadline))
        .map_err(|e| ExecError::Internal(e.to_string()))?;

    let mut stmt = match conn.prepare(sql) {
        Ok(s) => s,
        Err(e) => {
            let status = match error_code(&e) {
                Some(ErrorCode::AuthorizationForStatementDenied) => ExecStatus::RuntimeError,
                Some(ErrorCode::OperationInterrupted) => ExecStatus::Timeout,
                _ => ExecStatus::SyntaxError,
            };
            return Ok(ExecutionOutcome::failed(status, e.to_string(), started));
        }
    };
    if !stmt.readonly() {
        return Ok(ExecutionOutcome::failed(
            ExecStatus::RuntimeError,
            "statement would modify the database",
            started,
        ));
    }

    // REINDEX, BEGIN and friends can pass the checks above when they have
    // nothing to do; none of them returns columns.
    let ncols = stmt.column_count();
    if ncols == 0 {
        return Ok(ExecutionOutcome::failed(
            ExecStatus::RuntimeError,
            "statement is not a query",
            started,
        ));
    }
    let mut raw: Vec<Vec<ScalarValue>> = Vec::new();
    let mut cursor = stmt.raw_query();
    loop {
        match cursor.next() {
            Ok(Some(row)) => {
                if raw.len() == cfg.max_rows {
                    return Ok(ExecutionOutcome::failed(
                        ExecStatus::RowCapExceeded,
                        format!("more than {} rows", cfg.max_rows),
                        started,
                    ));
                }
                let mut tuple = Vec::with_capacity(ncols);
                for i in 0..ncols {
                    let v = row.get_ref(i).map_err(|e| ExecError::Internal(e.to_string()))?;
                    tuple.push(scalar_from_ref(v));
                }
                raw.push(tuple);
            }
            Ok(None) => break,
            Err(e) => {
                let status = if error_code(&e) == Some(ErrorCode::OperationInterrupted) {
                    ExecStatus::Timeout
                } else {
                    ExecStatus::RuntimeError
                };
                return Ok(ExecutionOutcome::failed(status, e.to_string(), started));
            }
        }
        if Instant::now() > deadline {
            return Ok(ExecutionOutcome::failed(ExecStatus::Timeout, "deadline exceeded", started));
        }
    }

    let rows = canonicalize(&raw).map_err(|e| ExecError::Internal(e.to_string()))?;
    Ok(ExecutionOutcome {
        status: ExecStatus::Success,
        row_count: raw.len(),
        rows: Some(rows),
        elapsed_ms: started.elapsed().as_millis() as u64,
        message: None,
    })
}

/// Opens `path` read-only with the read-only authorizer installed.
pub fn open_sandboxed(path: &Path) -> Result<Connection, ExecError> {
    let conn = open_read_only(path)?;
    conn.authorizer(Some(authorize))
        .map_err(|e| ExecError::Internal(e.to_string()))?;
    Ok(conn)
}

/// Plain read-only connection, no authorizer. Used for schema inspection.
pub fn open_read_only(path: &Path) -> Result<Connection, ExecError> {
    if !path.is_file() {
        return Err(ExecError::MissingDatabase(path.to_path_buf()));
    }
    Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)
        .map_err(|source| ExecError::Open {
            path: path.to_path_buf(),
            source,
        })
}

fn authorize(ctx: AuthContext<'_>) -> Authorization {
    match ctx.action {
        AuthAction::Select | AuthAction::Read { .. } | AuthAction::Recursive => Authorization::Allow,
        AuthAction::Function { function_name } => {
            if function_name.eq_ignore_ascii_case("load_extension") {
                Authorization::Deny
            } else {
                Authorization::Allow
            }
        }
        _ => Authorization::Deny,
    }
}

fn error_code(e: &rusqlite::Error) -> Option<ErrorCode> {
    match e {
        rusqlite::Error::SqliteFailure(f, _) => Some(f.code),
        _ => None,
    }
}

fn scalar_from_ref(v: ValueRef<'_>) -> ScalarValue {
    match v {
        ValueRef::Null => ScalarValue::Null,
        ValueRef::Integer(i) => ScalarValue::Integer(i),
        ValueRef::Real(x) => ScalarValue::Real(x),
        ValueRef::Text(t) => ScalarValue::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => ScalarValue::Blob(b.to_vec()),
    }
}

#[derive(Debug, PartialEq, Eq)]
enum StatementShape {
    Empty,
    Single,
    Multiple,
}

/// Lexical scan for statement boundaries, skipping literals, quoted
/// identifiers and comments.
fn statement_shape(sql: &str) -> StatementShape {
    let b = sql.as_bytes();
    let mut i = 0;
    let mut statements = 0usize;
    let mut in_statement = false;
    while i < b.len() {
        let c = b[i];
        match c {
            b'-' if b.get(i + 1) == Some(&b'-') => {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            b'/' if b.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i < b.len() && !(b[i] == b'*' && b.get(i + 1) == Some(&b'/')) {
                    i += 1;
                }
                i += 2;
                continue;
            }
            b';' => {
                in_statement = false;
                i += 1;
                continue;
            }
            c if c.is_ascii_whitespace() => {
                i += 1;
                continue;
            }
            _ => {}
        }
        if !in_statement {
            in_statement = true;
            statements += 1;
            if statements > 1 {
                return StatementShape::Multiple;
            }
        }
        let close = match c {
            b'\'' => Some(b'\''),
            b'"' => Some(b'"'),
            b'`' => Some(b'`'),
            b'[' => Some(b']'),
            _ => None,
        };
        i += 1;
        if let Some(close) = close {
            while i < b.len() {
                if b[i] == close {
                    // doubled quote is an escape, except for brackets
                    if close != b']' && b.get(i + 1) == Some(&close) {
                        i += 2;
                        continue;
                    }
                    break;
                }
                i += 1;
            }
            i += 1;
        }
    }
    match statements {
        0 => StatementShape::Empty,
        _ => StatementShape::Single,
    }
}
