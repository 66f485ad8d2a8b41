//! Self-consistency inference over a split: sample `n` candidates per
//! question, pick one by execution-equivalence vote, score the pick.

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{render_prompt, DatabaseCatalog, Datapoint, PromptTemplate};
use crate::modelclient::{BackendError, GenerationRequest, ModelBackend};
use crate::par::{map_bounded, ExecMode};
use crate::reward::{score, RewardError, SplitReport};
use crate::rlcore::{schemas_for, RlError, SamplingParams};
use crate::selfconsistency::{select, SelectError};
use crate::sqlexec::SandboxConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("question {question_id}: {source}")]
    Select {
        question_id: i64,
        #[source]
        source: SelectError,
    },
    #[error("question {question_id}: {source}")]
    Reward {
        question_id: i64,
        #[source]
        source: RewardError,
    },
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineItem {
    pub question_id: i64,
    pub chosen_index: usize,
    /// `None` when the gold query itself failed to execute.
    pub reward: Option<i8>,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub n: usize,
    pub template: PromptTemplate,
    pub sample_rows: usize,
    pub max_in_flight: usize,
    pub mode: ExecMode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            n: 7,
            template: PromptTemplate::default(),
            sample_rows: crate::dataset::DEFAULT_SAMPLE_ROWS,
            max_in_flight: 8,
            mode: ExecMode::Parallel,
        }
    }
}

/// Runs the whole split. Any backend failure aborts the run.
pub fn run_pipeline(
    dps: &[Datapoint],
    backend: &dyn ModelBackend,
    catalog: &DatabaseCatalog,
    cfg: &SandboxConfig,
    sampling: &SamplingParams,
    opts: &PipelineOptions,
) -> Result<(Vec<PipelineItem>, SplitReport), PipelineError> {
    if opts.n == 0 {
        return Err(PipelineError::Setup("n must be at least 1".into()));
    }
    backend.probe()?;
    let schemas = schemas_for(dps, catalog, opts.sample_rows).map_err(|e| match e {
        RlError::Backend(b) => PipelineError::Backend(b),
        other => PipelineError::Setup(other.to_string()),
    })?;

    let results = map_bounded(dps, opts.mode, opts.max_in_flight.max(1), |_, dp| {
        let prompt = render_prompt(dp, &schemas[&dp.db_id], &opts.template)
            .map_err(|e| PipelineError::Setup(e.to_string()))?;
        let cands = backend.generate(&GenerationRequest {
            prompt,
            n: opts.n,
            temperature: sampling.temperature,
            max_tokens: sampling.max_tokens,
            seed: sampling.seed,
        })?;
        let db = catalog
            .get(&dp.db_id)
            .ok_or_else(|| PipelineError::Setup(format!("unknown db_id {:?}", dp.db_id)))?;
        // candidates of one question run sequentially; questions are the unit of parallelism
        let sel = select(&cands, db, cfg, ExecMode::Sequential).map_err(|source| PipelineError::Select {
            question_id: dp.question_id,
            source,
        })?;
        let reward = match score(dp, &cands[sel.chosen_index], db, cfg) {
            Ok(r) => Some(r.reward),
            Err(RewardError::GoldExecution(_)) => None,
            Err(source) => {
                return Err(PipelineError::Reward {
                    question_id: dp.question_id,
                    source,
                })
            }
        };
        Ok(PipelineItem {
            question_id: dp.question_id,
            chosen_index: sel.chosen_index,
            reward,
        })
    });
    let items = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = SplitReport::from_rewards(items.iter().map(|i| i.reward));
    Ok((items, report))
}
