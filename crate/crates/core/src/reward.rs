//! The execution-match reward and split-level accuracy.
//!
//! | outcome                                           | reward |
//! |---------------------------------------------------|--------|
//! | result set equals gold                            |   1    |
//! | mismatch, runtime error, timeout, row cap         |   0    |
//! | syntax error, or no SQL could be extracted        |  -1    |

use std::path::Path;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::dataset::{DatabaseCatalog, Datapoint};
use crate::par::{map_indexed, ExecMode};
use crate::sqlexec::{execute, ExecError, ExecStatus, ExecutionOutcome, SandboxConfig};
use crate::trace::{ExtractionStatus, GenerationTrace};

pub const REWARD_CORRECT: i8 = 1;
pub const REWARD_INCORRECT: i8 = 0;
pub const REWARD_INVALID: i8 = -1;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    GoldExecution(#[from] GoldExecutionError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("unknown db_id {0:?}")]
    UnknownDb(String),
    #[error("usage: {0}")]
    Usage(String),
}

/// The gold query itself did not run. This is a dataset problem, never a
/// model problem, so the datapoint is excluded from accuracy.
#[derive(Debug, Error, Clone)]
#[error("gold SQL failed with {}", .outcome.status)]
pub struct GoldExecutionError {
    pub outcome: ExecutionOutcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct RewardRecord {
    pub reward: i8,
    #[serde(rename = "match")]
    pub matched: bool,
    pub gold_outcome: ExecutionOutcome,
    pub pred_outcome: Option<ExecutionOutcome>,
    pub extraction_status: ExtractionStatus,
}

impl RewardRecord {
    pub fn pred_status(&self) -> Option<ExecStatus> {
        self.pred_outcome.as_ref().map(|o| o.status)
    }

    /// Status label for the prediction, covering the no-SQL case.
    pub fn pred_status_label(&self) -> &'static str {
        self.pred_status().map_or("extraction_failed", ExecStatus::as_str)
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.gold_outcome.elapsed_ms + self.pred_outcome.as_ref().map_or(0, |o| o.elapsed_ms)
    }
}

/// Maps a predicted outcome against a successful gold outcome.
pub fn reward_for(gold: &ExecutionOutcome, pred: Option<&ExecutionOutcome>) -> (i8, bool) {
    let Some(pred) = pred else {
        return (REWARD_INVALID, false);
    };
    match pred.status {
        ExecStatus::SyntaxError => (REWARD_INVALID, false),
        ExecStatus::RuntimeError | ExecStatus::Timeout | ExecStatus::RowCapExceeded => (REWARD_INCORRECT, false),
        ExecStatus::Success => {
            let matched = pred.same_result(gold);
            if matched {
                (REWARD_CORRECT, true)
            } else {
                (REWARD_INCORRECT, false)
            }
        }
    }
}

pub fn score(
    dp: &Datapoint,
    trace: &GenerationTrace,
    db_path: &Path,
    cfg: &SandboxConfig,
) -> Result<RewardRecord, RewardError> {
    score_sql(&dp.gold_sql, trace, db_path, cfg)
}

/// Scores a trace against a gold query: extract, run gold, run prediction,
/// compare canonical result sets.
pub fn score_sql(
    gold_sql: &str,
    trace: &GenerationTrace,
    db_path: &Path,
    cfg: &SandboxConfig,
) -> Result<RewardRecord, RewardError> {
    let gold_outcome = execute(db_path, gold_sql, cfg)?;
    if !gold_outcome.is_success() {
        return Err(GoldExecutionError { outcome: gold_outcome }.into());
    }
    let pred_outcome = match &trace.extracted_sql {
        Some(sql) => Some(execute(db_path, sql, cfg)?),
        None => None,
    };
    let (reward, matched) = reward_for(&gold_outcome, pred_outcome.as_ref());
    Ok(RewardRecord {
        reward,
        matched,
        gold_outcome,
        pred_outcome,
        extraction_status: trace.extraction_status,
    })
}

/// Accuracy in hundredths of a percent, rounded half up. `None` for an
/// empty denominator.
fn basis_points(correct: usize, denom: usize) -> Option<u64> {
    if denom == 0 {
        return None;
    }
    let (c, d) = (correct as u128, denom as u128);
    Some(((20_000 * c + d) / (2 * d)) as u64)
}

/// Renders `correct / denom` as a percentage with two decimals.
pub fn format_accuracy(correct: usize, denom: usize) -> String {
    let bp = basis_points(correct, denom).unwrap_or(0);
    format!("{}.{:02}", bp / 100, bp % 100)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitReport {
    pub n: usize,
    pub n_correct: usize,
    pub n_invalid: usize,
    pub n_gold_failures: usize,
}

impl SplitReport {
    /// Builds a report from per-item rewards; `None` marks a gold failure.
    pub fn from_rewards(rewards: impl IntoIterator<Item = Option<i8>>) -> Self {
        let mut r = SplitReport {
            n: 0,
            n_correct: 0,
            n_invalid: 0,
            n_gold_failures: 0,
        };
        for reward in rewards {
            r.n += 1;
            match reward {
                None => r.n_gold_failures += 1,
                Some(REWARD_CORRECT) => r.n_correct += 1,
                Some(REWARD_INVALID) => r.n_invalid += 1,
                Some(_) => {}
            }
        }
        r
    }

    pub fn denominator(&self) -> usize {
        self.n - self.n_gold_failures
    }

    /// Exact accuracy in [0, 1]; 0 when nothing was scorable.
    pub fn accuracy_ratio(&self) -> f64 {
        match self.denominator() {
            0 => 0.0,
            d => self.n_correct as f64 / d as f64,
        }
    }

    pub fn accuracy_percent(&self) -> String {
        format_accuracy(self.n_correct, self.denominator())
    }

    pub fn csv_header() -> &'static str {
        "n,n_correct,n_invalid,accuracy_percent"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{}\n",
            Self::csv_header(),
            self.n,
            self.n_correct,
            self.n_invalid,
            self.accuracy_percent()
        )
    }
}

impl Serialize for SplitReport {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("SplitReport", 5)?;
        st.serialize_field("n", &self.n)?;
        st.serialize_field("n_correct", &self.n_correct)?;
        st.serialize_field("n_invalid", &self.n_invalid)?;
        st.serialize_field("n_gold_failures", &self.n_gold_failures)?;
        st.serialize_field("accuracy_percent", &self.accuracy_percent())?;
        st.end()
    }
}

/// Outcome for one datapoint of a split.
#[derive(Debug, Clone)]
pub struct ItemResult {
    pub question_id: i64,
    pub result: Result<RewardRecord, GoldExecutionError>,
}

impl ItemResult {
    pub fn reward(&self) -> Option<i8> {
        self.result.as_ref().ok().map(|r| r.reward)
    }
}

impl Serialize for ItemResult {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("ItemResult", 6)?;
        st.serialize_field("question_id", &self.question_id)?;
        match &self.result {
            Ok(r) => {
                st.serialize_field("reward", &r.reward)?;
                st.serialize_field("match", &r.matched)?;
                st.serialize_field("pred_status", r.pred_status_label())?;
                st.serialize_field("gold_status", r.gold_outcome.status.as_str())?;
                st.serialize_field("elapsed_ms", &r.elapsed_ms())?;
            }
            Err(g) => {
                st.serialize_field("reward", &None::<i8>)?;
                st.serialize_field("match", &false)?;
                st.serialize_field("pred_status", &None::<&str>)?;
                st.serialize_field("gold_status", g.outcome.status.as_str())?;
                st.serialize_field("elapsed_ms", &g.outcome.elapsed_ms)?;
            }
        }
        st.end()
    }
}

#[derive(Debug, Clone)]
pub struct SplitEvaluation {
    pub report: SplitReport,
    pub items: Vec<ItemResult>,
}

/// Scores aligned datapoints and traces, fanning out across threads.
pub fn evaluate_split(
    dps: &[Datapoint],
    traces: &[GenerationTrace],
    catalog: &DatabaseCatalog,
    cfg: &SandboxConfig,
    mode: ExecMode,
) -> Result<SplitEvaluation, RewardError> {
    if dps.len() != traces.len() {
        return Err(RewardError::Usage(format!(
            "{} datapoints but {} traces",
            dps.len(),
            traces.len()
        )));
    }
    let pairs: Vec<(&Datapoint, &GenerationTrace)> = dps.iter().zip(traces).collect();
    let results = map_indexed(&pairs, mode, |_, (dp, trace)| {
        let db = catalog
            .get(&dp.db_id)
            .ok_or_else(|| RewardError::UnknownDb(dp.db_id.clone()))?;
        match score(dp, trace, db, cfg) {
            Ok(r) => Ok(ItemResult {
                question_id: dp.question_id,
                result: Ok(r),
            }),
            Err(RewardError::GoldExecution(g)) => {
                tracing::warn!(question_id = dp.question_id, status = %g.outcome.status, "gold SQL failed");
                Ok(ItemResult {
                    question_id: dp.question_id,
                    result: Err(g),
                })
            }
            Err(e) => Err(e),
        }
    });
    let items = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = SplitReport::from_rewards(items.iter().map(ItemResult::reward));
    Ok(SplitEvaluation { report, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::fence;
    use proptest::prelude::*;
    use rusqlite::Connection;

    fn db(dir: &Path) -> std::path::PathBuf {
        let p = dir.join("t.sqlite");
        Connection::open(&p)
            .unwrap()
            .execute_batch(
                "CREATE TABLE t(id INTEGER PRIMARY KEY, name TEXT, score REAL);
                 INSERT INTO t VALUES (1, 'a', 1.0), (2, 'b', 2.5), (3, 'c', 2.5);",
            )
            .unwrap();
        p
    }

    fn sc(gold: &str, trace: &str, p: &Path) -> RewardRecord {
        score_sql(gold, &GenerationTrace::new(trace), p, &SandboxConfig::default().with_timeout_ms(300)).unwrap()
    }

    #[test]
    fn reward_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = db(dir.path());
        let gold = "SELECT name FROM t WHERE score > 2";
        let r = sc(gold, &fence("SELECT name FROM t WHERE score >= 2.5 ORDER BY name DESC"), &p);
        assert_eq!((r.reward, r.matched), (1, true));
        assert_eq!(sc(gold, &fence("SELECT name FROM t"), &p).reward, 0);
        assert_eq!(sc(gold, &fence("SELECT abs(-9223372036854775808)"), &p).reward, 0);
        assert_eq!(sc(gold, &fence("DROP TABLE t"), &p).reward, 0);
        let slow = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c";
        let r = sc(gold, &fence(slow), &p);
        assert_eq!((r.reward, r.pred_status()), (0, Some(ExecStatus::Timeout)));
        assert_eq!(sc(gold, &fence("SELEC * FROM t"), &p).reward, -1);
        let r = sc(gold, "I could not figure it out", &p);
        assert_eq!((r.reward, r.pred_outcome.is_none()), (-1, true));
        assert_eq!(r.pred_status_label(), "extraction_failed");
    }

    #[test]
    fn gold_failure_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = db(dir.path());
        let err = score_sql("SELECT nope FROM missing", &GenerationTrace::new(fence("SELECT 1")), &p, &SandboxConfig::default())
            .unwrap_err();
        match err {
            RewardError::GoldExecution(g) => assert_eq!(g.outcome.status, ExecStatus::SyntaxError),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mapping_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let p = db(dir.path());
        for pred in ["SELECT 1", "SELEC", "SELECT name FROM t WHERE score > 2", "DELETE FROM t", ""] {
            let r = sc("SELECT name FROM t WHERE score > 2", &fence(pred), &p);
            assert_eq!(r.reward == 1, r.matched);
            if r.reward == -1 {
                assert!(r.pred_outcome.is_none() || r.pred_status() == Some(ExecStatus::SyntaxError));
            }
            if r.matched {
                assert!(r.gold_outcome.is_success() && r.pred_outcome.as_ref().unwrap().is_success());
            }
        }
    }

    #[test]
    fn accuracy_rendering() {
        assert_eq!(format_accuracy(1086, 1534), "70.80");
        assert_eq!(format_accuracy(7, 10), "70.00");
        assert_eq!(format_accuracy(5, 5), "100.00");
        assert_eq!(format_accuracy(0, 0), "0.00");
        // 1/8 = 12.5% exactly; 1/800 = 0.125% rounds half up
        assert_eq!(format_accuracy(1, 8), "12.50");
        assert_eq!(format_accuracy(1, 800), "0.13");
        assert_eq!(format_accuracy(2, 3), "66.67");
    }

    #[test]
    fn report_counts_and_csv() {
        let rewards = [1, 1, 1, 1, 1, 1, 1, 0, 0, -1].map(Some);
        let r = SplitReport::from_rewards(rewards);
        assert_eq!((r.n, r.n_correct, r.n_invalid), (10, 7, 1));
        assert_eq!(r.accuracy_percent(), "70.00");
        assert_eq!(r.to_csv(), "n,n_correct,n_invalid,accuracy_percent\n10,7,1,70.00\n");
        let with_gold_fail = SplitReport::from_rewards([Some(1), None]);
        assert_eq!(with_gold_fail.accuracy_percent(), "100.00");
        assert_eq!(with_gold_fail.n_gold_failures, 1);
        let j = serde_json::to_value(&with_gold_fail).unwrap();
        assert_eq!(j["accuracy_percent"], "100.00");
    }

    proptest! {
        #[test]
        fn monotone_aggregation(rewards in prop::collection::vec(prop_oneof![Just(-1i8), Just(0), Just(1)], 1..60), pick in any::<prop::sample::Index>()) {
            let zeros: Vec<usize> = rewards.iter().enumerate().filter(|(_, r)| **r == 0).map(|(i, _)| i).collect();
            prop_assume!(!zeros.is_empty());
            let i = zeros[pick.index(zeros.len())];
            let before = SplitReport::from_rewards(rewards.iter().map(|r| Some(*r)));
            let mut bumped = rewards.clone();
            bumped[i] = 1;
            let after = SplitReport::from_rewards(bumped.iter().map(|r| Some(*r)));
            prop_assert!(after.accuracy_ratio() > before.accuracy_ratio());
            prop_assert!(after.n_correct + after.n_invalid <= after.n);
        }

        #[test]
        fn percent_in_range(c in 0usize..5000, extra in 0usize..5000) {
            let s = format_accuracy(c, c + extra);
            let v: f64 = s.parse().unwrap();
            prop_assert!((0.0..=100.0).contains(&v));
            prop_assert_eq!(s.split('.').nth(1).unwrap().len(), 2);
        }
    }
}
