//! Benchmark split ingestion, database catalogs, schema encoding and prompts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sqlexec::{open_read_only, ExecError, ScalarValue};

/// Sample rows per table in the default schema encoding.
pub const DEFAULT_SAMPLE_ROWS: usize = 3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid datapoints:\n{}", render_issues(.0))]
    Fields(Vec<FieldIssue>),
    #[error("unresolved db_id(s): {}", .0.join(", "))]
    UnresolvedDbIds(Vec<String>),
    #[error("invalid catalog under {root}:\n{}", .problems.join("\n"))]
    Catalog { root: PathBuf, problems: Vec<String> },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldIssue {
    pub index: usize,
    pub field: &'static str,
    pub problem: &'static str,
}

fn render_issues(issues: &[FieldIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  [{}] field \"{}\": {}", i.index, i.field, i.problem))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
}

/// One benchmark example. Serializes with the public split's key names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Datapoint {
    pub question_id: i64,
    pub db_id: String,
    pub question: String,
    #[serde(default)]
    pub evidence: String,
    #[serde(rename = "SQL")]
    pub gold_sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
}

impl Datapoint {
    pub fn unified_query(&self) -> String {
        unify_query(&self.question, &self.evidence)
    }
}

/// Merges the question and its evidence hint into one query.
pub fn unify_query(question: &str, evidence: &str) -> String {
    if evidence.is_empty() {
        question.to_string()
    } else {
        format!("{question}\nHint: {evidence}")
    }
}

/// Maps database ids to SQLite files laid out as `<root>/<db_id>/<db_id>.sqlite`.
#[derive(Debug, Clone, Default)]
pub struct DatabaseCatalog {
    root: PathBuf,
    entries: BTreeMap<String, PathBuf>,
}

impl DatabaseCatalog {
    /// Scans `root` and checks every database opens.
    pub fn discover(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        let dir = std::fs::read_dir(&root).map_err(|source| DatasetError::Io {
            path: root.clone(),
            source,
        })?;
        let mut entries = BTreeMap::new();
        let mut problems = Vec::new();
        for item in dir {
            let item = item.map_err(|source| DatasetError::Io {
                path: root.clone(),
                source,
            })?;
            if !item.path().is_dir() {
                continue;
            }
            let db_id = item.file_name().to_string_lossy().into_owned();
            let file = item.path().join(format!("{db_id}.sqlite"));
            if !file.is_file() {
                continue;
            }
            match check_database(&file) {
                Ok(()) => {
                    entries.insert(db_id, file);
                }
                Err(e) => problems.push(format!("{db_id}: {e}")),
            }
        }
        if !problems.is_empty() {
            return Err(DatasetError::Catalog { root, problems });
        }
        Ok(DatabaseCatalog { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, db_id: &str) -> Option<&Path> {
        self.entries.get(db_id).map(PathBuf::as_path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Unknown ids referenced by `dps`, sorted and deduplicated.
    pub fn unresolved<'a>(&self, dps: impl IntoIterator<Item = &'a Datapoint>) -> Vec<String> {
        dps.into_iter()
            .filter(|dp| !self.entries.contains_key(&dp.db_id))
            .map(|dp| dp.db_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

fn check_database(path: &Path) -> Result<(), DatasetError> {
    let conn = open_read_only(path)?;
    conn.query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get::<_, i64>(0))?;
    Ok(())
}

/// Parses a split file and validates every db_id against `catalog`.
pub fn load_split(path: &Path, catalog: &DatabaseCatalog) -> Result<Vec<Datapoint>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dps = parse_split(&text)?;
    let missing = catalog.unresolved(&dps);
    if !missing.is_empty() {
        return Err(DatasetError::UnresolvedDbIds(missing));
    }
    Ok(dps)
}

/// Parses split JSON without touching any catalog.
///
/// `question_id` defaults to the element index when absent (the public
/// train split omits it).
pub fn parse_split(text: &str) -> Result<Vec<Datapoint>, DatasetError> {
    let items: Vec<Value> = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut issues = Vec::new();
    let mut out = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        match datapoint_from_json(index, item) {
            Ok(dp) => out.push(dp),
            Err(mut e) => issues.append(&mut e),
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(DatasetError::Fields(issues))
    }
}

fn datapoint_from_json(index: usize, item: &Value) -> Result<Datapoint, Vec<FieldIssue>> {
    let issue = |field, problem| FieldIssue { index, field, problem };
    let Some(obj) = item.as_object() else {
        return Err(vec![issue("<element>", "not a JSON object")]);
    };
    let mut issues = Vec::new();
    let mut required = |field: &'static str| match obj.get(field) {
        None => {
            issues.push(issue(field, "missing"));
            String::new()
        }
        Some(Value::String(s)) if s.trim().is_empty() => {
            issues.push(issue(field, "empty"));
            String::new()
        }
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            issues.push(issue(field, "not a string"));
            String::new()
        }
    };
    let question = required("question");
    let db_id = required("db_id");
    let gold_sql = required("SQL");
    let evidence = match obj.get("evidence") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            issues.push(issue("evidence", "not a string"));
            String::new()
        }
    };
    let question_id = match obj.get("question_id") {
        None | Some(Value::Null) => index as i64,
        Some(v) => v.as_i64().unwrap_or_else(|| {
            issues.push(issue("question_id", "not an integer"));
            0
        }),
    };
    let difficulty = match obj.get("difficulty") {
        None | Some(Value::Null) => None,
        Some(v) => match serde_json::from_value::<Difficulty>(v.clone()) {
            Ok(d) => Some(d),
            Err(_) => {
                issues.push(issue("difficulty", "not one of simple/moderate/challenging"));
                None
            }
        },
    };
    if !issues.is_empty() {
        return Err(issues);
    }
    Ok(Datapoint {
        question_id,
        db_id,
        question,
        evidence,
        gold_sql,
        difficulty,
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSchema {
    pub name: String,
    pub declared_type: String,
    pub is_primary_key: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ForeignKey {
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSchema>,
    pub foreign_keys: Vec<ForeignKey>,
    pub sample_rows: Vec<Vec<ScalarValue>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SchemaDescription {
    pub tables: Vec<TableSchema>,
}

pub fn describe_schema_path(path: &Path, sample_rows: usize) -> Result<SchemaDescription, DatasetError> {
    let conn = open_read_only(path)?;
    describe_schema(&conn, sample_rows)
}

/// Lists user tables in creation order with columns, keys and the first
/// `sample_rows` rows of each.
pub fn describe_schema(conn: &Connection, sample_rows: usize) -> Result<SchemaDescription, DatasetError> {
    let mut stmt = conn.prepare(
        "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid",
    )?;
    let names = stmt
        .query_map([], |r| r.get::<_, String>(0))?
        .collect::<Result<Vec<_>, _>>()?;

    let mut tables = Vec::with_capacity(names.len());
    for name in names {
        let columns = conn
            .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")?
            .query_map([&name], |r| {
                Ok(ColumnSchema {
                    name: r.get(0)?,
                    declared_type: r.get(1)?,
                    is_primary_key: r.get::<_, i64>(2)? > 0,
                })
            })?
            .collect::<Result<Vec<_>, _>>()?;
        let raw_fks = conn
            .prepare(r#"SELECT "from", "table", "to" FROM pragma_foreign_key_list(?1) ORDER BY id, seq"#)?
            .query_map([&name], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, Option<String>>(2)?))
            })?
            .collect::<Result<Vec<_>, _>>()?;
        let mut foreign_keys = Vec::with_capacity(raw_fks.len());
        for (from_column, to_table, to_column) in raw_fks {
            let to_column = match to_column {
                Some(c) => c,
                // implicit reference to the parent's primary key
                None => conn
                    .query_row(
                        "SELECT name FROM pragma_table_info(?1) WHERE pk = 1",
                        [&to_table],
                        |r| r.get(0),
                    )
                    .unwrap_or_default(),
            };
            foreign_keys.push(ForeignKey {
                from_column,
                to_table,
                to_column,
            });
        }
        let mut samples = Vec::new();
        if sample_rows > 0 {
            let mut s = conn.prepare(&format!("SELECT * FROM {} LIMIT {sample_rows}", quote_ident(&name)))?;
            let n = s.column_count();
            let mut rows = s.query([])?;
            while let Some(row) = rows.next()? {
                let mut tuple = Vec::with_capacity(n);
                for i in 0..n {
                    tuple.push(match row.get_ref(i)? {
                        rusqlite::types::ValueRef::Null => ScalarValue::Null,
                        rusqlite::types::ValueRef::Integer(v) => ScalarValue::Integer(v),
                        rusqlite::types::ValueRef::Real(v) => ScalarValue::Real(v),
                        rusqlite::types::ValueRef::Text(t) => {
                            ScalarValue::Text(String::from_utf8_lossy(t).into_owned())
                        }
                        rusqlite::types::ValueRef::Blob(b) => ScalarValue::Blob(b.to_vec()),
                    });
                }
                samples.push(tuple);
            }
        }
        tables.push(TableSchema {
            name,
            columns,
            foreign_keys,
            sample_rows: samples,
        });
    }
    Ok(SchemaDescription { tables })
}

pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

impl SchemaDescription {
    /// DDL-style encoding followed by sample rows, one block per table.
    pub fn encode(&self) -> String {
        let mut out = String::new();
        for (ti, t) in self.tables.iter().enumerate() {
            if ti > 0 {
                out.push('\n');
            }
            let pks: Vec<&ColumnSchema> = t.columns.iter().filter(|c| c.is_primary_key).collect();
            let mut lines: Vec<String> = t
                .columns
                .iter()
                .map(|c| {
                    let mut l = quote_ident(&c.name);
                    if !c.declared_type.is_empty() {
                        l.push(' ');
                        l.push_str(&c.declared_type);
                    }
                    if c.is_primary_key && pks.len() == 1 {
                        l.push_str(" PRIMARY KEY");
                    }
                    l
                })
                .collect();
            if pks.len() > 1 {
                let cols: Vec<String> = pks.iter().map(|c| quote_ident(&c.name)).collect();
                lines.push(format!("PRIMARY KEY ({})", cols.join(", ")));
            }
            for fk in &t.foreign_keys {
                lines.push(format!(
                    "FOREIGN KEY ({}) REFERENCES {}({})",
                    quote_ident(&fk.from_column),
                    quote_ident(&fk.to_table),
                    quote_ident(&fk.to_column)
                ));
            }
            let _ = writeln!(out, "CREATE TABLE {} (\n  {}\n);", quote_ident(&t.name), lines.join(",\n  "));
            if !t.sample_rows.is_empty() {
                let _ = writeln!(out, "-- Sample rows from {}:", quote_ident(&t.name));
                for row in &t.sample_rows {
                    let vals: Vec<String> = row.iter().map(ScalarValue::to_sql_literal).collect();
                    let _ = writeln!(out, "-- ({})", vals.join(", "));
                }
            }
        }
        out
    }
}

pub const DEFAULT_TEMPLATE: &str = "You are a SQLite expert. Given the database schema below, write a SQL query that answers the question.\n\n\
Database schema:\n{schema}\n\
Question:\n{question}\n\n\
{instructions}\n";

pub const DEFAULT_INSTRUCTIONS: &str = "Think through the problem step by step before answering: \
identify the relevant tables and columns, decide which joins and filters are needed, and check how the hint maps onto the schema. \
Then give exactly one final SQL query in a fenced block that starts with ```sql and ends with ```.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_text: String,
    pub instruction_block: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            template_text: DEFAULT_TEMPLATE.into(),
            instruction_block: DEFAULT_INSTRUCTIONS.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unbound placeholder {{{0}}}")]
    Unbound(String),
}

/// Renders the prompt for one datapoint. Placeholders are `{schema}`,
/// `{question}` and `{instructions}`; anything else of the form `{name}` is
/// an error. Substituted text is never re-scanned.
pub fn render_prompt(dp: &Datapoint, schema: &SchemaDescription, tpl: &PromptTemplate) -> Result<String, TemplateError> {
    let schema_text = schema.encode();
    let question = dp.unified_query();
    let t = &tpl.template_text;
    let mut out = String::with_capacity(t.len() + schema_text.len() + question.len());
    let mut rest = t.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            match name {
                "schema" => out.push_str(&schema_text),
                "question" => out.push_str(&question),
                "instructions" => out.push_str(&tpl.instruction_block),
                other => return Err(TemplateError::Unbound(other.to_string())),
            }
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn movies_db(dir: &Path) -> PathBuf {
        let p = dir.join("movies.sqlite");
        let c = Connection::open(&p).unwrap();
        c.execute_batch(
            "CREATE TABLE movies(movie_id INTEGER PRIMARY KEY, title TEXT);
             CREATE TABLE ratings(rating_id INTEGER PRIMARY KEY, movie_id INTEGER REFERENCES movies(movie_id), score REAL);
             CREATE INDEX ix ON ratings(movie_id);
             INSERT INTO movies VALUES (1, 'Heat'), (2, 'Alien'), (3, 'Up'), (4, 'Jaws');
             INSERT INTO ratings VALUES (1, 1, 4.5), (2, 1, 3.0);",
        )
        .unwrap();
        p
    }

    #[test]
    fn unify() {
        assert_eq!(
            unify_query("Name the movie with the most ratings", ""),
            "Name the movie with the most ratings"
        );
        assert_eq!(
            unify_query(
                "What is the highest eligible free rate for K-12 students in the schools in Alameda County?",
                "Eligible free rate for K-12 = `Free Meal Count (K-12)` / `Enrollment (K-12)`"
            ),
            "What is the highest eligible free rate for K-12 students in the schools in Alameda County?\n\
             Hint: Eligible free rate for K-12 = `Free Meal Count (K-12)` / `Enrollment (K-12)`"
        );
    }

    #[test]
    fn parse_empty_split() {
        assert!(parse_split("[]").unwrap().is_empty());
    }

    #[test]
    fn missing_field_named() {
        let text = r#"[
            {"question_id": 0, "db_id": "a", "question": "q", "SQL": "SELECT 1"},
            {"question_id": 1, "db_id": "a", "question": "q"},
            {"question_id": 2, "db_id": "a", "question": "q", "SQL": "SELECT 1", "evidence": ""}
        ]"#;
        match parse_split(text) {
            Err(DatasetError::Fields(issues)) => {
                assert_eq!(issues, vec![FieldIssue { index: 1, field: "SQL", problem: "missing" }]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_offset() {
        let text = "[\n  {\"question\": \"q\",,}\n]";
        match parse_split(text) {
            Err(DatasetError::Parse { offset, .. }) => assert_eq!(&text[offset..offset + 1], ","),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extra_keys_ignored_and_defaults() {
        let text = r#"[{"db_id": "a", "question": "q", "SQL": "S", "extra": 5, "difficulty": "moderate"}]"#;
        let dps = parse_split(text).unwrap();
        assert_eq!(dps[0].question_id, 0);
        assert_eq!(dps[0].evidence, "");
        assert_eq!(dps[0].difficulty, Some(Difficulty::Moderate));
    }

    #[test]
    fn unresolved_ids_listed() {
        let dir = tempfile::tempdir().unwrap();
        let db_dir = dir.path().join("movies");
        std::fs::create_dir(&db_dir).unwrap();
        movies_db(&db_dir);
        let cat = DatabaseCatalog::discover(dir.path()).unwrap();
        assert_eq!(cat.len(), 1);
        let split = dir.path().join("split.json");
        std::fs::write(
            &split,
            r#"[{"db_id": "zoo", "question": "q", "SQL": "S"},
                {"db_id": "movies", "question": "q", "SQL": "S"},
                {"db_id": "bank", "question": "q", "SQL": "S"},
                {"db_id": "zoo", "question": "q", "SQL": "S"}]"#,
        )
        .unwrap();
        match load_split(&split, &cat) {
            Err(DatasetError::UnresolvedDbIds(ids)) => assert_eq!(ids, vec!["bank", "zoo"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_catalog_entry() {
        let dir = tempfile::tempdir().unwrap();
        let db_dir = dir.path().join("junk");
        std::fs::create_dir(&db_dir).unwrap();
        std::fs::write(db_dir.join("junk.sqlite"), b"definitely not sqlite, padded to look like a header ......").unwrap();
        assert!(matches!(DatabaseCatalog::discover(dir.path()), Err(DatasetError::Catalog { .. })));
    }

    #[test]
    fn schema_structure() {
        let dir = tempfile::tempdir().unwrap();
        let db = movies_db(dir.path());
        let s = describe_schema_path(&db, 3).unwrap();
        let names: Vec<_> = s.tables.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["movies", "ratings"]);
        assert_eq!(s.tables[0].columns[0].name, "movie_id");
        assert!(s.tables[0].columns[0].is_primary_key);
        assert_eq!(
            s.tables[1].foreign_keys,
            vec![ForeignKey {
                from_column: "movie_id".into(),
                to_table: "movies".into(),
                to_column: "movie_id".into()
            }]
        );
        assert_eq!(s.tables[0].sample_rows.len(), 3);
        assert_eq!(s.tables[1].sample_rows.len(), 2);
        assert_eq!(s.tables[0].sample_rows[0], vec![ScalarValue::Integer(1), ScalarValue::Text("Heat".into())]);

        let none = describe_schema_path(&db, 0).unwrap();
        assert!(none.tables.iter().all(|t| t.sample_rows.is_empty()));

        let again = describe_schema_path(&db, 3).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn internal_tables_hidden() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sqlite");
        let c = Connection::open(&p).unwrap();
        c.execute_batch("CREATE TABLE t(id INTEGER PRIMARY KEY AUTOINCREMENT, v); INSERT INTO t(v) VALUES (1); ANALYZE;")
            .unwrap();
        drop(c);
        let s = describe_schema_path(&p, 1).unwrap();
        assert_eq!(s.tables.len(), 1);
        assert_eq!(s.tables[0].name, "t");
    }

    #[test]
    fn empty_database() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.sqlite");
        Connection::open(&p).unwrap().execute_batch("PRAGMA user_version = 1;").unwrap();
        assert!(describe_schema_path(&p, 3).unwrap().tables.is_empty());
    }

    #[test]
    fn quoted_names_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.sqlite");
        Connection::open(&p)
            .unwrap()
            .execute_batch(
                r#"CREATE TABLE frpm("CDSCode" TEXT PRIMARY KEY, "County Name" TEXT, "Free Meal Count (K-12)" REAL, "say ""hi""" TEXT);"#,
            )
            .unwrap();
        let s = describe_schema_path(&p, 3).unwrap();
        let cols: Vec<_> = s.tables[0].columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(cols, ["CDSCode", "County Name", "Free Meal Count (K-12)", "say \"hi\""]);
        let enc = s.encode();
        assert!(enc.contains(r#""Free Meal Count (K-12)" REAL"#));
        assert!(enc.contains(r#""say ""hi""" TEXT"#));
    }

    #[test]
    fn prompt_rendering() {
        let dir = tempfile::tempdir().unwrap();
        let s = describe_schema_path(&movies_db(dir.path()), 3).unwrap();
        let dp = Datapoint {
            question_id: 1,
            db_id: "movies".into(),
            question: "Name the movie with the most ratings".into(),
            evidence: "".into(),
            gold_sql: "SELECT 1".into(),
            difficulty: None,
        };
        let tpl = PromptTemplate::default();
        let a = render_prompt(&dp, &s, &tpl).unwrap();
        assert!(a.contains("CREATE TABLE \"ratings\""));
        assert!(a.contains("FOREIGN KEY (\"movie_id\") REFERENCES \"movies\"(\"movie_id\")"));
        assert!(a.contains("Name the movie with the most ratings"));
        assert!(a.contains("```sql"));
        assert!(!a.contains("{schema}") && !a.contains("{question}") && !a.contains("{instructions}"));
        assert_eq!(a, render_prompt(&dp, &s, &tpl).unwrap());

        let bare = PromptTemplate {
            instruction_block: String::new(),
            ..tpl.clone()
        };
        let b = render_prompt(&dp, &s, &bare).unwrap();
        assert!(b.contains("CREATE TABLE \"movies\"") && b.contains("Name the movie"));

        let bad = PromptTemplate {
            template_text: "{schema} {question} {dialect}".into(),
            ..tpl
        };
        assert_eq!(render_prompt(&dp, &s, &bad), Err(TemplateError::Unbound("dialect".into())));
    }

    #[test]
    fn literal_braces_survive() {
        let tpl = PromptTemplate {
            template_text: "json: {\"a\": 1} {question} { x }".into(),
            instruction_block: String::new(),
        };
        let dp = Datapoint {
            question_id: 0,
            db_id: "d".into(),
            question: "q {schema}".into(),
            evidence: String::new(),
            gold_sql: "S".into(),
            difficulty: None,
        };
        let out = render_prompt(&dp, &SchemaDescription::default(), &tpl).unwrap();
        assert_eq!(out, "json: {\"a\": 1} q {schema} { x }");
    }

    fn datapoint() -> impl Strategy<Value = Datapoint> {
        (
            any::<i64>(),
            "[a-z_]{1,8}",
            "\\PC{1,20}",
            "\\PC{0,20}",
            "\\PC{1,20}",
            prop::option::of(prop_oneof![
                Just(Difficulty::Simple),
                Just(Difficulty::Moderate),
                Just(Difficulty::Challenging)
            ]),
        )
            .prop_filter("non-blank", |(_, _, q, _, s, _)| !q.trim().is_empty() && !s.trim().is_empty())
            .prop_map(|(question_id, db_id, question, evidence, gold_sql, difficulty)| Datapoint {
                question_id,
                db_id,
                question,
                evidence,
                gold_sql,
                difficulty,
            })
    }

    proptest! {
        #[test]
        fn split_roundtrip(dps in prop::collection::vec(datapoint(), 0..6)) {
            let text = serde_json::to_string(&dps).unwrap();
            let once = parse_split(&text).unwrap();
            prop_assert_eq!(&once, &dps);
            let twice = parse_split(&serde_json::to_string(&once).unwrap()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn unify_identity_without_evidence(q in "\\PC{1,40}") {
            prop_assert_eq!(unify_query(&q, ""), q);
        }
    }
}
