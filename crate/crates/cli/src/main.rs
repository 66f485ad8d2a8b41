//! `verisql`: evaluation, scoring, rollout collection and serving for
//! execution-verified text-to-SQL.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{BackendArgs, CommonArgs};

#[derive(Debug, Parser)]
#[command(name = "verisql", version, about = "Execution-verified text-to-SQL rewards and evaluation")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the catalog and split, and run every gold query.
    ValidateData,
    /// Score aligned model outputs against a split.
    Evaluate {
        /// JSON array of model outputs, one per datapoint in split order.
        #[arg(long)]
        traces: PathBuf,
        /// Print the report as one CSV row with header.
        #[arg(long)]
        csv: bool,
        /// Per-datapoint records (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Treat traces as bare SQL instead of model output.
        #[arg(long)]
        bare_sql: bool,
    },
    /// Score one prediction.
    Score {
        #[arg(long)]
        db_id: String,
        #[arg(long)]
        gold_sql: String,
        #[arg(long, group = "pred", required = true)]
        sql: Option<String>,
        #[arg(long, group = "pred")]
        trace: Option<String>,
        #[arg(long, group = "pred")]
        trace_file: Option<PathBuf>,
    },
    /// Pick one of several candidates by execution-equivalence vote.
    Select {
        #[arg(long)]
        db_id: String,
        /// JSON array of candidate model outputs.
        #[arg(long)]
        candidates: PathBuf,
        /// Also score the chosen candidate against this query.
        #[arg(long)]
        gold_sql: Option<String>,
    },
    /// Sample k responses per datapoint, score them, write rollouts.
    Collect {
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Provenance timestamp in Unix seconds; defaults to
        /// SOURCE_DATE_EPOCH, then the current time.
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Group-relative advantages for non-saturated rollout groups.
    Advantages {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = verisql_core::rlcore::DEFAULT_EPS)]
        eps: f64,
        /// Keep groups whose rewards are all equal.
        #[arg(long)]
        keep_saturated: bool,
    },
    /// Best response per rollout group as prompt/response pairs.
    ExportSft {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
        threshold: i8,
    },
    /// Generate n candidates per datapoint, select, score, report.
    Pipeline {
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        n: Option<usize>,
        /// Per-datapoint lines go here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Run the HTTP scoring service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Concurrently executing requests.
        #[arg(long)]
        pool: Option<usize>,
        /// Requests allowed to wait for the pool before 429.
        #[arg(long)]
        queue: Option<usize>,
        #[arg(long, default_value_t = verisql_service::DEFAULT_MAX_BATCH)]
        max_batch: usize,
    },
    /// Write the bundled fixture benchmark and stub scripts.
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
        /// Datapoint indices whose scripted majority is wrong.
        #[arg(long, value_delimiter = ',')]
        wrong_majority: Vec<usize>,
    },
}

fn init_logging(level: Option<&str>) {
    let level = level
        .and_then(|l| l.parse::<tracing::Level>().ok())
        .unwrap_or(tracing::Level::WARN);
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli
        .common
        .resolve()
        .and_then(|cfg| {
            init_logging(cfg.log_level.as_deref());
            commands::run(cli.cmd, cfg)
        });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
