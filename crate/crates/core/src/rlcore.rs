//! Group-relative advantages, saturation filtering, and offline rollout
//! collection/export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::{describe_schema_path, render_prompt, DatabaseCatalog, Datapoint, PromptTemplate, SchemaDescription};
use crate::modelclient::{BackendError, GenerationRequest, ModelBackend};
use crate::par::{map_bounded, ExecMode};
use crate::reward::{score, RewardError};
use crate::sqlexec::SandboxConfig;
use crate::trace::GenerationTrace;

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Only a zero KL coefficient is supported; there is no reference-policy term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub kl_coefficient: f64,
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.kl_coefficient != 0.0 {
            return Err(RlError::Usage(format!(
                "kl_coefficient must be 0 (got {}); no KL term is implemented",
                self.kl_coefficient
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: i64,
    pub traces: Vec<GenerationTrace>,
    pub rewards: Vec<i8>,
}

impl RolloutGroup {
    pub fn new(prompt_id: i64, traces: Vec<GenerationTrace>, rewards: Vec<i8>) -> Result<Self, RlError> {
        if traces.is_empty() || traces.len() != rewards.len() {
            return Err(RlError::Usage(format!(
                "group {prompt_id}: {} traces vs {} rewards (need k >= 1)",
                traces.len(),
                rewards.len()
            )));
        }
        Ok(RolloutGroup {
            prompt_id,
            traces,
            rewards,
        })
    }

    pub fn k(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_saturated(&self) -> bool {
        self.rewards.windows(2).all(|w| w[0] == w[1])
    }

    pub fn advantages(&self, eps: f64) -> AdvantageVector {
        let rewards: Vec<f64> = self.rewards.iter().map(|&r| f64::from(r)).collect();
        // k >= 1 and eps > 0 are guaranteed by construction
        group_advantages(&rewards, eps).expect("valid group")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub group_mean: f64,
    pub group_std: f64,
}

/// `(r_i - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<AdvantageVector, RlError> {
    if rewards.is_empty() {
        return Err(RlError::Usage("empty reward group".into()));
    }
    if !(eps > 0.0) {
        return Err(RlError::Usage("eps must be positive".into()));
    }
    let k = rewards.len() as f64;
    let total: f64 = rewards.iter().sum();
    // k * r_i - total is exact for integer-valued rewards, so a constant
    // shift of the group cancels bit-for-bit.
    let centered: Vec<f64> = rewards.iter().map(|r| (k * r - total) / k).collect();
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / k).sqrt();
    Ok(AdvantageVector {
        values: centered.iter().map(|c| c / (std + eps)).collect(),
        group_mean: total / k,
        group_std: std,
    })
}

/// Keeps groups whose rewards are not all equal, preserving order.
pub fn filter_saturated(groups: Vec<RolloutGroup>) -> Vec<RolloutGroup> {
    groups.into_iter().filter(|g| !g.is_saturated()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.7,
            max_tokens: 2048,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub trace_text: String,
    pub reward: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRecord {
    pub prompt_id: i64,
    pub prompt_text: String,
    pub responses: Vec<ScoredResponse>,
}

impl OfflineRecord {
    pub fn to_group(&self) -> Result<RolloutGroup, RlError> {
        RolloutGroup::new(
            self.prompt_id,
            self.responses.iter().map(|r| GenerationTrace::new(r.trace_text.clone())).collect(),
            self.responses.iter().map(|r| r.reward).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub sampling_params: SamplingParams,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub failed_prompts: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub records: Vec<OfflineRecord>,
    pub provenance: Provenance,
}

impl OfflineDataset {
    pub fn validate(&self) -> Result<(), RlError> {
        for r in &self.records {
            if r.responses.is_empty() {
                return Err(RlError::Dataset(format!("record {} has no responses", r.prompt_id)));
            }
            if let Some(bad) = r.responses.iter().find(|s| !(-1..=1).contains(&s.reward)) {
                return Err(RlError::Dataset(format!("record {} has reward {}", r.prompt_id, bad.reward)));
            }
        }
        Ok(())
    }

    /// Provenance header line followed by one record per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), RlError> {
        serde_json::to_writer(&mut w, &serde_json::json!({ "provenance": self.provenance }))
            .map_err(std::io::Error::from)?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, RlError> {
        let mut provenance = None;
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fmt = |message: String| RlError::Format { line: i + 1, message };
            let v: Value = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
            if let Some(p) = v.get("provenance") {
                provenance = Some(serde_json::from_value(p.clone()).map_err(|e| fmt(e.to_string()))?);
            } else {
                records.push(serde_json::from_value(v).map_err(|e| fmt(e.to_string()))?);
            }
        }
        let provenance = provenance.ok_or_else(|| RlError::Dataset("missing provenance header".into()))?;
        let ds = OfflineDataset { records, provenance };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone)]
pub struct CollectOptions {
    pub template: PromptTemplate,
    pub sample_rows: usize,
    /// Datapoints generated and scored concurrently.
    pub max_in_flight: usize,
    pub mode: ExecMode,
    pub timestamp: u64,
}

impl Default for CollectOptions {
    fn default() -> Self {
        CollectOptions {
            template: PromptTemplate::default(),
            sample_rows: crate::dataset::DEFAULT_SAMPLE_ROWS,
            max_in_flight: 8,
            mode: ExecMode::Parallel,
            timestamp: 0,
        }
    }
}

/// Schema descriptions for every database referenced by `dps`.
pub fn schemas_for(
    dps: &[Datapoint],
    catalog: &DatabaseCatalog,
    sample_rows: usize,
) -> Result<BTreeMap<String, SchemaDescription>, RlError> {
    let ids: BTreeSet<&str> = dps.iter().map(|d| d.db_id.as_str()).collect();
    let mut out = BTreeMap::new();
    for id in ids {
        let path = catalog
            .get(id)
            .ok_or_else(|| RlError::Dataset(format!("unknown db_id {id:?}")))?;
        let schema = describe_schema_path(path, sample_rows).map_err(|e| RlError::Dataset(e.to_string()))?;
        out.insert(id.to_string(), schema);
    }
    Ok(out)
}

/// Samples `k` responses per datapoint, scores each, and gathers the
/// results. Datapoints whose generation fails or whose gold SQL does not
/// execute are skipped and listed in the provenance.
pub fn collect_rollouts(
    dps: &[Datapoint],
    backend: &dyn ModelBackend,
    k: usize,
    catalog: &DatabaseCatalog,
    cfg: &SandboxConfig,
    sampling: &SamplingParams,
    opts: &CollectOptions,
) -> Result<OfflineDataset, RlError> {
    if k == 0 {
        return Err(RlError::Usage("k must be at least 1".into()));
    }
    backend.probe()?;
    let schemas = schemas_for(dps, catalog, opts.sample_rows)?;

    let results = map_bounded(dps, opts.mode, opts.max_in_flight.max(1), |_, dp| {
        collect_one(dp, backend, k, catalog, cfg, sampling, &schemas, &opts.template)
    });

    let mut records = Vec::with_capacity(dps.len());
    let mut failed_prompts = Vec::new();
    for (dp, r) in dps.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                tracing::warn!(question_id = dp.question_id, error = %e, "skipping datapoint");
                failed_prompts.push(dp.question_id);
            }
        }
    }
    Ok(OfflineDataset {
        records,
        provenance: Provenance {
            model_id: backend.model_id().to_string(),
            sampling_params: sampling.clone(),
            timestamp: opts.timestamp,
            k,
            failed_prompts,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn collect_one(
    dp: &Datapoint,
    backend: &dyn ModelBackend,
    k: usize,
    catalog: &DatabaseCatalog,
    cfg: &SandboxConfig,
    sampling: &SamplingParams,
    schemas: &BTreeMap<String, SchemaDescription>,
    template: &PromptTemplate,
) -> Result<OfflineRecord, RlError> {
    let schema = &schemas[&dp.db_id];
    let prompt = render_prompt(dp, schema, template).map_err(|e| RlError::Usage(e.to_string()))?;
    let traces = backend.generate(&GenerationRequest {
        prompt: prompt.clone(),
        n: k,
        temperature: sampling.temperature,
        max_tokens: sampling.max_tokens,
        seed: sampling.seed,
    })?;
    let db = catalog
        .get(&dp.db_id)
        .ok_or_else(|| RlError::Dataset(format!("unknown db_id {:?}", dp.db_id)))?;
    let mut responses = Vec::with_capacity(k);
    for t in traces {
        let rec = score(dp, &t, db, cfg).map_err(|e: RewardError| RlError::Dataset(e.to_string()))?;
        responses.push(ScoredResponse {
            trace_text: t.text,
            reward: rec.reward,
        });
    }
    Ok(OfflineRecord {
        prompt_id: dp.question_id,
        prompt_text: prompt,
        responses,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    pub prompt: String,
    pub response: String,
}

/// Best response per record with reward at least `threshold`; ties go to
/// the shortest trace, then the earliest. Records without a qualifying
/// response are dropped.
pub fn export_best_of_k(ds: &OfflineDataset, threshold: i8) -> Vec<SftPair> {
    ds.records
        .iter()
        .filter_map(|rec| {
            rec.responses
                .iter()
                .enumerate()
                .filter(|(_, r)| r.reward >= threshold)
                .min_by_key(|(i, r)| (std::cmp::Reverse(r.reward), r.trace_text.len(), *i))
                .map(|(_, r)| SftPair {
                    prompt: rec.prompt_text.clone(),
                    response: r.trace_text.clone(),
                })
        })
        .collect()
}
