//! Verifiable rewards for text-to-SQL.
//!
//! Model generations are scored by executing the extracted SQL next to the
//! gold query inside a read-only SQLite sandbox and comparing canonical
//! result sets. On top of the reward sit execution-equivalence
//! self-consistency selection, GRPO-style group advantages and offline
//! rollout collection/export.

pub mod dataset;
pub mod fixtures;
pub mod modelclient;
pub mod par;
pub mod pipeline;
pub mod reward;
pub mod rlcore;
pub mod selfconsistency;
pub mod sqlexec;
pub mod trace;

pub use dataset::{DatabaseCatalog, Datapoint, Difficulty, PromptTemplate, SchemaDescription};
pub use par::ExecMode;
pub use reward::{RewardRecord, SplitReport};
pub use sqlexec::{CanonicalResultSet, ExecStatus, ExecutionOutcome, SandboxConfig};
pub use trace::GenerationTrace;
