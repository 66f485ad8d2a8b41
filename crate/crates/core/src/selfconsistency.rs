//! Execution-equivalence majority vote over sampled candidates.
//!
//! Candidates whose SQL runs successfully are grouped by canonical result
//! set. Every member contributes weight 1, clusters are ranked by
//! (weight desc, earliest member asc) and the earliest member of the top
//! cluster is chosen.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::par::{map_indexed, ExecMode};
use crate::sqlexec::{execute, CanonicalResultSet, ExecError, ExecutionOutcome, SandboxConfig};
use crate::trace::GenerationTrace;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("usage: no candidates to select from")]
    Empty,
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster<K = CanonicalResultSet> {
    pub key: K,
    pub member_indices: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult<K = CanonicalResultSet> {
    pub chosen_index: usize,
    pub clusters: Vec<Cluster<K>>,
    pub n_failed: usize,
}

/// Groups candidate keys; `None` marks a candidate that did not execute.
pub fn cluster_keys<K: Ord + Clone>(keys: &[Option<K>]) -> Vec<Cluster<K>> {
    let mut groups: BTreeMap<&K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        if let Some(k) = k {
            groups.entry(k).or_default().push(i);
        }
    }
    let mut clusters: Vec<Cluster<K>> = groups
        .into_iter()
        .map(|(k, members)| Cluster {
            key: k.clone(),
            weight: members.len() as f64,
            member_indices: members,
        })
        .collect();
    clusters.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(a.member_indices[0].cmp(&b.member_indices[0]))
    });
    clusters
}

/// Selection over precomputed keys.
pub fn select_keys<K: Ord + Clone>(keys: &[Option<K>]) -> Result<SelectionResult<K>, SelectError> {
    if keys.is_empty() {
        return Err(SelectError::Empty);
    }
    let clusters = cluster_keys(keys);
    let n_failed = keys.iter().filter(|k| k.is_none()).count();
    let chosen_index = clusters.first().map_or(0, |c| c.member_indices[0]);
    Ok(SelectionResult {
        chosen_index,
        clusters,
        n_failed,
    })
}

/// Executes every candidate's extracted SQL. Candidates without SQL get `None`.
pub fn execute_candidates(
    candidates: &[GenerationTrace],
    db_path: &Path,
    cfg: &SandboxConfig,
    mode: ExecMode,
) -> Result<Vec<Option<ExecutionOutcome>>, ExecError> {
    map_indexed(candidates, mode, |_, c| match &c.extracted_sql {
        Some(sql) => execute(db_path, sql, cfg).map(Some),
        None => Ok(None),
    })
    .into_iter()
    .collect()
}

fn keys_of(outcomes: &[Option<ExecutionOutcome>]) -> Vec<Option<CanonicalResultSet>> {
    outcomes
        .iter()
        .map(|o| o.as_ref().filter(|o| o.is_success()).and_then(|o| o.rows.clone()))
        .collect()
}

pub fn cluster_by_execution(
    candidates: &[GenerationTrace],
    db_path: &Path,
    cfg: &SandboxConfig,
    mode: ExecMode,
) -> Result<(Vec<Cluster>, Vec<Option<ExecutionOutcome>>), SelectError> {
    let outcomes = execute_candidates(candidates, db_path, cfg, mode)?;
    Ok((cluster_keys(&keys_of(&outcomes)), outcomes))
}

pub fn select(
    candidates: &[GenerationTrace],
    db_path: &Path,
    cfg: &SandboxConfig,
    mode: ExecMode,
) -> Result<SelectionResult, SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::Empty);
    }
    let outcomes = execute_candidates(candidates, db_path, cfg, mode)?;
    select_keys(&keys_of(&outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::fence;
    use proptest::prelude::*;

    fn k(keys: &[Option<u8>]) -> SelectionResult<u8> {
        select_keys(keys).unwrap()
    }

    #[test]
    fn four_two_one() {
        // A at {0,2,3,5}, B at {1,4}, 6 failed
        let keys = [Some(b'A'), Some(b'B'), Some(b'A'), Some(b'A'), Some(b'B'), Some(b'A'), None];
        let r = k(&keys);
        assert_eq!(r.chosen_index, 0);
        assert_eq!(r.n_failed, 1);
        assert_eq!(r.clusters.len(), 2);
        assert_eq!((r.clusters[0].key, r.clusters[0].weight), (b'A', 4.0));
        assert_eq!(r.clusters[0].member_indices, vec![0, 2, 3, 5]);
        assert_eq!((r.clusters[1].key, r.clusters[1].weight), (b'B', 2.0));
    }

    #[test]
    fn singleton_and_all_failed() {
        assert_eq!(k(&[Some(1)]).chosen_index, 0);
        assert_eq!(k(&[Some(1)]).clusters[0].weight, 1.0);
        let r = k(&[None, None, None]);
        assert!(r.clusters.is_empty());
        assert_eq!((r.chosen_index, r.n_failed), (0, 3));
        assert!(matches!(select_keys::<u8>(&[]), Err(SelectError::Empty)));
    }

    #[test]
    fn tie_goes_to_earliest() {
        // A = {1,2,3}, B = {0,4,5}
        let keys = [Some(b'B'), Some(b'A'), Some(b'A'), Some(b'A'), Some(b'B'), Some(b'B')];
        let r = k(&keys);
        assert_eq!(r.chosen_index, 0);
        assert_eq!(r.clusters[0].key, b'B');
    }

    #[test]
    fn executes_real_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.sqlite");
        rusqlite::Connection::open(&p)
            .unwrap()
            .execute_batch("CREATE TABLE t(x); INSERT INTO t VALUES (1), (2);")
            .unwrap();
        let texts = [
            fence("SELECT max(x) FROM t"),
            fence("SELECT x FROM t"),
            fence("SELECT 2"),
            fence("SELECT max(x) FROM t;"),
            fence("SELECT x FROM t ORDER BY x DESC"),
            fence("SELECT 2.0"),
            fence("SELEC"),
        ];
        let cands: Vec<_> = texts.iter().map(GenerationTrace::new).collect();
        let cfg = SandboxConfig::default();
        for mode in [ExecMode::Parallel, ExecMode::Sequential] {
            let r = select(&cands, &p, &cfg, mode).unwrap();
            assert_eq!(r.chosen_index, 0);
            assert_eq!(r.clusters[0].member_indices, vec![0, 2, 3, 5]);
            assert_eq!(r.clusters[1].member_indices, vec![1, 4]);
            assert_eq!(r.n_failed, 1);
        }
        let (clusters, outcomes) = cluster_by_execution(&cands, &p, &cfg, ExecMode::Parallel).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(outcomes.len(), 7);
    }

    proptest! {
        #[test]
        fn failed_candidate_never_changes_winner(keys in prop::collection::vec(prop::option::of(0u8..4), 1..8), at in any::<prop::sample::Index>()) {
            let before = k(&keys);
            prop_assume!(!before.clusters.is_empty());
            let mut more = keys.clone();
            let pos = at.index(more.len() + 1);
            more.insert(pos, None);
            let after = k(&more);
            prop_assert_eq!(before.clusters[0].key, after.clusters[0].key);
        }
    }
}
