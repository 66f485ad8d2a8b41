//! Candidate SQL extraction from model output.
//!
//! The answer is the body of the last ```` ```sql ```` fenced block. Models
//! routinely revise a first draft in a later block, so the last one wins.

use serde::{Deserialize, Serialize};

const SQL_STARTERS: [&str; 5] = ["select", "with", "insert", "update", "delete"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStatus {
    Found,
    NotFound,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractOptions {
    /// Accept a fence-free output whose first keyword starts a SQL statement.
    pub permissive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub text: String,
    pub extracted_sql: Option<String>,
    pub extraction_status: ExtractionStatus,
}

impl GenerationTrace {
    pub fn new(text: impl Into<String>) -> Self {
        Self::with_options(text, ExtractOptions::default())
    }

    pub fn with_options(text: impl Into<String>, opts: ExtractOptions) -> Self {
        let text = text.into();
        let extracted_sql = extract_sql_with(&text, opts);
        Self::from_parts(text, extracted_sql)
    }

    /// A trace that carries bare SQL instead of model output.
    pub fn from_sql(sql: impl Into<String>) -> Self {
        let sql: String = sql.into();
        let extracted = Some(sql.trim().to_string()).filter(|s| !s.is_empty());
        Self::from_parts(sql, extracted)
    }

    fn from_parts(text: String, extracted_sql: Option<String>) -> Self {
        let extraction_status = if extracted_sql.is_some() {
            ExtractionStatus::Found
        } else {
            ExtractionStatus::NotFound
        };
        GenerationTrace {
            text,
            extracted_sql,
            extraction_status,
        }
    }
}

/// Wraps SQL in a single ```` ```sql ```` fence.
pub fn fence(sql: &str) -> String {
    format!("```sql\n{sql}\n```")
}

pub fn extract_sql(text: &str) -> Option<String> {
    extract_sql_with(text, ExtractOptions::default())
}

pub fn extract_sql_with(text: &str, opts: ExtractOptions) -> Option<String> {
    let blocks = fenced_blocks(text);
    let from_sql_block = blocks
        .iter()
        .rev()
        .filter(|b| b.info.eq_ignore_ascii_case("sql"))
        .map(|b| b.body.trim())
        .find(|body| !body.is_empty());
    if let Some(body) = from_sql_block {
        return Some(body.to_string());
    }
    let from_generic = blocks
        .iter()
        .rev()
        .filter(|b| !b.info.eq_ignore_ascii_case("sql"))
        .map(|b| b.body.trim())
        .find(|body| starts_with_sql_keyword(body));
    if let Some(body) = from_generic {
        return Some(body.to_string());
    }
    if opts.permissive && !text.contains("```") {
        let body = text.trim();
        if starts_with_sql_keyword(body) {
            return Some(body.to_string());
        }
    }
    None
}

fn starts_with_sql_keyword(body: &str) -> bool {
    let word: String = body
        .trim_start_matches(|c: char| c.is_whitespace() || c == '(')
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    SQL_STARTERS.iter().any(|k| word.eq_ignore_ascii_case(k))
}

struct Block<'a> {
    info: &'a str,
    body: &'a str,
}

/// Pairs fence markers left to right. An unterminated final fence is ignored.
fn fenced_blocks(text: &str) -> Vec<Block<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after_open = &rest[open + 3..];
        let Some(close) = after_open.find("```") else {
            break;
        };
        let inner = &after_open[..close];
        let (info, body) = match inner.find('\n') {
            Some(nl) => (inner[..nl].trim(), &inner[nl + 1..]),
            // single-line fence, e.g. ```sql SELECT 1```
            None => match inner.trim_start().split_once(char::is_whitespace) {
                Some((first, tail)) if first.eq_ignore_ascii_case("sql") => (first, tail),
                _ => ("", inner),
            },
        };
        out.push(Block { info, body });
        rest = &after_open[close + 3..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn last_block_wins() {
        let sql = extract_sql(crate::fixtures::REVISED_TRACE).unwrap();
        assert!(sql.contains("h.race_id = 21"));
        assert!(!sql.contains("JOIN race"));
        assert!(sql.ends_with("'Male';"));
    }

    #[test]
    fn no_fence() {
        assert_eq!(extract_sql("no code here at all"), None);
        let t = GenerationTrace::new("no code here at all");
        assert_eq!(t.extraction_status, ExtractionStatus::NotFound);
        assert!(t.extracted_sql.is_none());
    }

    #[test]
    fn single_block() {
        assert_eq!(extract_sql("```sql\nSELECT 1;\n```").as_deref(), Some("SELECT 1;"));
    }

    #[test]
    fn generic_fence_needs_sql_keyword() {
        let t = "```\nSELECT a FROM b\n```\nand then\n```\nprint(1)\n```";
        assert_eq!(extract_sql(t).as_deref(), Some("SELECT a FROM b"));
        assert_eq!(extract_sql("```python\nprint(1)\n```"), None);
        // an sql-tagged block anywhere beats a later generic one
        let t = "```sql\nSELECT 1\n```\n```\nWITH x AS (SELECT 2) SELECT * FROM x\n```";
        assert_eq!(extract_sql(t).as_deref(), Some("SELECT 1"));
    }

    #[test]
    fn empty_sql_block_skipped() {
        let t = "```sql\nSELECT 7\n```\n```sql\n   \n```";
        assert_eq!(extract_sql(t).as_deref(), Some("SELECT 7"));
        assert_eq!(extract_sql("```sql\n\n```"), None);
    }

    #[test]
    fn case_insensitive_tag_and_inline_fence() {
        assert_eq!(extract_sql("```SQL\nselect 2\n```").as_deref(), Some("select 2"));
        assert_eq!(extract_sql("answer: ```sql SELECT 3```").as_deref(), Some("SELECT 3"));
    }

    #[test]
    fn unterminated_fence_ignored() {
        assert_eq!(extract_sql("```sql\nSELECT 1\n```\n```sql\nSELECT 2"), Some("SELECT 1".into()));
    }

    #[test]
    fn permissive_mode() {
        let opts = ExtractOptions { permissive: true };
        assert_eq!(extract_sql_with("  select * from t  ", opts).as_deref(), Some("select * from t"));
        assert_eq!(extract_sql("select * from t"), None);
        assert_eq!(extract_sql_with("I think the answer is 3", opts), None);
    }

    #[test]
    fn bare_sql_trace() {
        let t = GenerationTrace::from_sql("  SELECT 1 ");
        assert_eq!(t.extracted_sql.as_deref(), Some("SELECT 1"));
        assert_eq!(GenerationTrace::from_sql("  ").extraction_status, ExtractionStatus::NotFound);
    }

    fn sql_body() -> impl Strategy<Value = String> {
        "[A-Za-z0-9_ ,;()*=<>'\"\n.-]{0,60}".prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    proptest! {
        #[test]
        fn fence_roundtrip(s in sql_body()) {
            let s = s.trim().to_string();
            prop_assert_eq!(extract_sql(&fence(&s)), Some(s));
        }

        #[test]
        fn appended_block_wins(prefix in "[^`]{0,80}", first in sql_body(), last in sql_body()) {
            let text = format!("{prefix}\n{}\nrevised:\n{}", fence(&first), fence(&last));
            prop_assert_eq!(extract_sql(&text), Some(last.trim().to_string()));
        }

        #[test]
        fn never_empty(text in "(```|sql|\n| |SELECT|x){0,20}") {
            if let Some(s) = extract_sql_with(&text, ExtractOptions { permissive: true }) {
                prop_assert!(!s.is_empty());
            }
        }
    }
}
