//! Run configuration: an optional JSON file overlaid by command-line flags,
//! resolved before any work starts.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use verisql_core::modelclient::{ModelBackend, RemoteBackend, RemoteConfig, StubBackend};
use verisql_core::rlcore::SamplingParams;
use verisql_core::{ExecMode, SandboxConfig};

use crate::exit::{backend_err, usage, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Stub { script_path: PathBuf },
    Remote(RemoteConfig),
}

impl BackendSpec {
    pub fn build(&self) -> CliResult<Box<dyn ModelBackend>> {
        Ok(match self {
            BackendSpec::Stub { script_path } => Box::new(StubBackend::load(script_path).map_err(usage)?),
            BackendSpec::Remote(cfg) => Box::new(RemoteBackend::new(cfg.clone()).map_err(backend_err)?),
        })
    }
}

/// Everything a subcommand may read. Unset fields fall back to defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub db_root: Option<PathBuf>,
    pub split_path: Option<PathBuf>,
    pub backend: Option<BackendSpec>,
    pub sandbox: SandboxConfig,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub sampling: SamplingParams,
    pub max_in_flight: Option<usize>,
    pub sequential: bool,
    pub output: Option<PathBuf>,
    pub log_level: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(usage)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(usage)
    }

    pub fn db_root(&self) -> CliResult<&Path> {
        self.db_root.as_deref().ok_or_else(|| usage(anyhow!("--db-root is required")))
    }

    pub fn split_path(&self) -> CliResult<&Path> {
        self.split_path.as_deref().ok_or_else(|| usage(anyhow!("--split is required")))
    }

    pub fn backend(&self) -> CliResult<&BackendSpec> {
        self.backend
            .as_ref()
            .ok_or_else(|| usage(anyhow!("--backend is required")))
    }

    pub fn mode(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }

    /// SHA-256 of the resolved configuration's JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.sandbox.validate().map_err(usage)?;
        if self.sampling.temperature < 0.0 || self.sampling.max_tokens == 0 {
            bail_usage("temperature must be non-negative and max_tokens positive")?;
        }
        if self.k == Some(0) || self.n == Some(0) || self.max_in_flight == Some(0) {
            bail_usage("k, n and max_in_flight must be at least 1")?;
        }
        Ok(())
    }
}

fn bail_usage(msg: &str) -> CliResult<()> {
    Err(usage(anyhow!("{msg}")))
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding <db_id>/<db_id>.sqlite.
    #[arg(long, global = true)]
    pub db_root: Option<PathBuf>,
    /// Split file in the benchmark JSON layout.
    #[arg(long, global = true)]
    pub split: Option<PathBuf>,
    /// Per-query execution timeout.
    #[arg(long, global = true)]
    pub timeout_ms: Option<u64>,
    #[arg(long, global = true)]
    pub max_rows: Option<usize>,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    /// Base URL of an OpenAI-compatible endpoint (http:// or https://),
    /// or the path of a stub script mapping prompt digests to traces.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub token_env: Option<String>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub request_timeout_ms: Option<u64>,
    /// Concurrent backend requests.
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
}

impl CommonArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.db_root {
            cfg.db_root = Some(v.clone());
        }
        if let Some(v) = &self.split {
            cfg.split_path = Some(v.clone());
        }
        if let Some(v) = self.timeout_ms {
            cfg.sandbox.timeout_ms = v;
        }
        if let Some(v) = self.max_rows {
            cfg.sandbox.max_rows = v;
        }
        if self.sequential {
            cfg.sequential = true;
        }
        if let Some(v) = self.seed {
            cfg.sampling.seed = Some(v);
        }
        if let Some(v) = &self.log_level {
            cfg.log_level = Some(v.clone());
        }
        Ok(cfg)
    }
}

impl BackendArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        match self.backend.as_deref() {
            Some(url) if url.starts_with("http://") || url.starts_with("https://") => {
                let mut rc = match cfg.backend.take() {
                    Some(BackendSpec::Remote(rc)) => rc,
                    _ => RemoteConfig::default(),
                };
                rc.base_url = url.to_string();
                cfg.backend = Some(BackendSpec::Remote(rc));
            }
            Some(path) => {
                cfg.backend = Some(BackendSpec::Stub {
                    script_path: PathBuf::from(path),
                })
            }
            None => {}
        }
        if let Some(BackendSpec::Remote(rc)) = &mut cfg.backend {
            if let Some(v) = &self.model {
                rc.model_id = v.clone();
            }
            if let Some(v) = &self.token_env {
                rc.auth_token_env_var = Some(v.clone());
            }
            if let Some(v) = self.max_retries {
                rc.max_retries = v;
            }
            if let Some(v) = self.request_timeout_ms {
                rc.request_timeout_ms = v;
            }
            if let Some(v) = self.max_in_flight {
                rc.max_in_flight = v;
            }
        }
        if let Some(v) = self.max_in_flight {
            cfg.max_in_flight = Some(v);
        }
        if let Some(v) = self.temperature {
            cfg.sampling.temperature = v;
        }
        if let Some(v) = self.max_tokens {
            cfg.sampling.max_tokens = v;
        }
    }
}

/// Header attached to every output artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunProvenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_digest: String,
    pub seed: Option<u64>,
}

impl RunProvenance {
    pub fn new(command: &'static str, cfg: &RunConfig) -> Self {
        RunProvenance {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_digest: cfg.digest(),
            seed: cfg.sampling.seed,
        }
    }
}
