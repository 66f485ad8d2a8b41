use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};
use verisql_core::dataset::load_split;
use verisql_core::fixtures::{build_benchmark, datapoints, stub_script};
use verisql_core::par::map_indexed;
use verisql_core::pipeline::{run_pipeline, PipelineError, PipelineOptions};
use verisql_core::reward::{evaluate_split, RewardError, SplitReport};
use verisql_core::rlcore::{collect_rollouts, export_best_of_k, filter_saturated, CollectOptions, OfflineDataset, RlError};
use verisql_core::sqlexec::execute;
use verisql_core::{DatabaseCatalog, Datapoint, GenerationTrace};
use verisql_service::{score_request, select_request, ApiError, ScoreRequest, SelectRequest, ServiceConfig};

use crate::config::{RunConfig, RunProvenance};
use crate::exit::{backend_err, data, usage, CliError, CliResult, EXIT_DATA, EXIT_OK};
use crate::Command;

pub fn run(cmd: Command, mut cfg: RunConfig) -> CliResult<u8> {
    match cmd {
        Command::ValidateData => validate_data(&cfg),
        Command::Evaluate {
            traces,
            csv,
            out,
            bare_sql,
        } => {
            set_output(&mut cfg, out);
            evaluate(&cfg, &traces, csv, bare_sql)
        }
        Command::Score {
            db_id,
            gold_sql,
            sql,
            trace,
            trace_file,
        } => {
            let trace = match trace_file {
                Some(p) => Some(read_to_string(&p)?),
                None => trace,
            };
            score(&cfg, ScoreRequest {
                db_id,
                gold_sql,
                trace,
                sql,
                timeout_ms: None,
            })
        }
        Command::Select {
            db_id,
            candidates,
            gold_sql,
        } => {
            let candidates: Vec<String> = read_json(&candidates)?;
            select(&cfg, SelectRequest {
                db_id,
                gold_sql,
                candidates,
                timeout_ms: None,
            })
        }
        Command::Collect {
            backend,
            k,
            out,
            timestamp,
        } => {
            backend.apply(&mut cfg);
            if k.is_some() {
                cfg.k = k;
            }
            set_output(&mut cfg, out);
            collect(&cfg, timestamp)
        }
        Command::Advantages {
            input,
            out,
            eps,
            keep_saturated,
        } => {
            set_output(&mut cfg, out);
            advantages(&cfg, &input, eps, keep_saturated)
        }
        Command::ExportSft { input, out, threshold } => {
            set_output(&mut cfg, out);
            export_sft(&cfg, &input, threshold)
        }
        Command::Pipeline { backend, n, out, csv } => {
            backend.apply(&mut cfg);
            if n.is_some() {
                cfg.n = n;
            }
            set_output(&mut cfg, out);
            pipeline(&cfg, csv)
        }
        Command::Serve {
            host,
            port,
            pool,
            queue,
            max_batch,
        } => serve(&cfg, &host, port, pool, queue, max_batch),
        Command::MakeFixtures { out, wrong_majority } => make_fixtures(&out, &wrong_majority),
    }
}

fn set_output(cfg: &mut RunConfig, out: Option<PathBuf>) {
    if out.is_some() {
        cfg.output = out;
    }
}

fn read_to_string(p: &Path) -> CliResult<String> {
    std::fs::read_to_string(p)
        .with_context(|| format!("reading {}", p.display()))
        .map_err(usage)
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> CliResult<T> {
    serde_json::from_str(&read_to_string(p)?)
        .with_context(|| format!("parsing {}", p.display()))
        .map_err(usage)
}

/// JSON-lines sink: the configured output file, or stdout.
struct Lines(Box<dyn Write>);

impl Lines {
    fn open(path: Option<&Path>) -> CliResult<Lines> {
        Ok(Lines(match path {
            Some(p) => Box::new(BufWriter::new(
                File::create(p)
                    .with_context(|| format!("creating {}", p.display()))
                    .map_err(usage)?,
            )),
            None => Box::new(BufWriter::new(io::stdout())),
        }))
    }

    fn stdout() -> Lines {
        Lines(Box::new(BufWriter::new(io::stdout())))
    }

    fn put(&mut self, v: &impl Serialize) -> CliResult<()> {
        serde_json::to_writer(&mut self.0, v).map_err(|e| usage(anyhow!(e)))?;
        writeln!(self.0).map_err(usage)
    }

    fn raw(&mut self, s: &str) -> CliResult<()> {
        writeln!(self.0, "{s}").map_err(usage)
    }

    fn finish(mut self) -> CliResult<()> {
        self.0.flush().map_err(usage)
    }
}

fn load(cfg: &RunConfig) -> CliResult<(DatabaseCatalog, Vec<Datapoint>)> {
    cfg.validate()?;
    let catalog = DatabaseCatalog::discover(cfg.db_root()?).map_err(usage)?;
    let dps = load_split(cfg.split_path()?, &catalog).map_err(usage)?;
    Ok((catalog, dps))
}

fn report_exit(report: &SplitReport) -> u8 {
    if report.n_gold_failures > 0 {
        EXIT_DATA
    } else {
        EXIT_OK
    }
}

fn validate_data(cfg: &RunConfig) -> CliResult<u8> {
    let (catalog, dps) = load(cfg)?;
    let failures: Vec<Value> = map_indexed(&dps, cfg.mode(), |_, dp| {
        let db = catalog.get(&dp.db_id).expect("resolved by load_split");
        execute(db, &dp.gold_sql, &cfg.sandbox).map(|o| (dp.question_id, o))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .map_err(usage)?
    .into_iter()
    .filter(|(_, o)| !o.is_success())
    .map(|(qid, o)| json!({"question_id": qid, "gold_status": o.status.as_str(), "message": o.message}))
    .collect();
    let mut out = Lines::stdout();
    out.put(&json!({
        "provenance": RunProvenance::new("validate-data", cfg),
        "n_datapoints": dps.len(),
        "n_databases": catalog.len(),
        "gold_failures": failures,
    }))?;
    out.finish()?;
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_DATA })
}

fn evaluate(cfg: &RunConfig, traces: &Path, csv: bool, bare_sql: bool) -> CliResult<u8> {
    let (catalog, dps) = load(cfg)?;
    let texts: Vec<String> = read_json(traces)?;
    if texts.len() != dps.len() {
        return Err(usage(anyhow!(
            "traces file has {} entries but the split has {} datapoints",
            texts.len(),
            dps.len()
        )));
    }
    let traces: Vec<GenerationTrace> = texts
        .into_iter()
        .map(|t| if bare_sql { GenerationTrace::from_sql(t) } else { GenerationTrace::new(t) })
        .collect();
    let eval = evaluate_split(&dps, &traces, &catalog, &cfg.sandbox, cfg.mode()).map_err(|e| match e {
        RewardError::Usage(_) | RewardError::UnknownDb(_) => usage(e),
        other => data(other),
    })?;
    let prov = RunProvenance::new("evaluate", cfg);
    if let Some(p) = &cfg.output {
        let mut f = Lines::open(Some(p))?;
        f.put(&json!({ "provenance": prov }))?;
        for item in &eval.items {
            f.put(item)?;
        }
        f.finish()?;
    }
    print_report(&prov, &eval.report, csv)?;
    Ok(report_exit(&eval.report))
}

fn print_report(prov: &RunProvenance, report: &SplitReport, csv: bool) -> CliResult<()> {
    let mut out = Lines::stdout();
    if csv {
        out.raw(report.to_csv().trim_end())?;
    } else {
        out.put(&json!({ "provenance": prov, "report": report }))?;
    }
    out.finish()
}

fn api_error(e: ApiError) -> CliError {
    let msg = anyhow!("{}", e.body);
    if e.status.as_u16() == 422 {
        data(msg)
    } else if e.status.is_server_error() {
        backend_err(msg)
    } else {
        usage(msg)
    }
}

fn score(cfg: &RunConfig, req: ScoreRequest) -> CliResult<u8> {
    cfg.validate()?;
    let catalog = DatabaseCatalog::discover(cfg.db_root()?).map_err(usage)?;
    let resp = score_request(&catalog, &cfg.sandbox, &req).map_err(api_error)?;
    let mut out = Lines::stdout();
    out.put(&json!({ "provenance": RunProvenance::new("score", cfg), "result": resp }))?;
    out.finish()?;
    Ok(EXIT_OK)
}

fn select(cfg: &RunConfig, req: SelectRequest) -> CliResult<u8> {
    cfg.validate()?;
    let catalog = DatabaseCatalog::discover(cfg.db_root()?).map_err(usage)?;
    let sel = select_request(&catalog, &cfg.sandbox, &req).map_err(api_error)?;
    let mut out = Lines::stdout();
    out.put(&json!({ "provenance": RunProvenance::new("select", cfg), "selection": sel }))?;
    out.finish()?;
    Ok(EXIT_OK)
}

fn default_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

fn collect(cfg: &RunConfig, timestamp: Option<u64>) -> CliResult<u8> {
    let (catalog, dps) = load(cfg)?;
    let k = cfg.k.ok_or_else(|| usage(anyhow!("--k is required")))?;
    let backend = cfg.backend()?.build()?;
    let opts = CollectOptions {
        max_in_flight: cfg.max_in_flight.unwrap_or(CollectOptions::default().max_in_flight),
        mode: cfg.mode(),
        timestamp: timestamp.unwrap_or_else(default_timestamp),
        ..CollectOptions::default()
    };
    let ds = collect_rollouts(&dps, backend.as_ref(), k, &catalog, &cfg.sandbox, &cfg.sampling, &opts).map_err(|e| match e {
        RlError::Backend(_) => backend_err(e),
        other => usage(other),
    })?;
    let mut out = Lines::open(cfg.output.as_deref())?;
    ds.write_jsonl(&mut out.0).map_err(usage)?;
    out.finish()?;
    let failed = ds.provenance.failed_prompts.len();
    if failed > 0 {
        tracing::warn!(failed, "some datapoints were skipped");
        return Ok(EXIT_DATA);
    }
    Ok(EXIT_OK)
}

fn read_dataset(p: &Path) -> CliResult<OfflineDataset> {
    let f = File::open(p).with_context(|| format!("opening {}", p.display())).map_err(usage)?;
    OfflineDataset::read_jsonl(BufReader::new(f)).map_err(usage)
}

fn advantages(cfg: &RunConfig, input: &Path, eps: f64, keep_saturated: bool) -> CliResult<u8> {
    if !(eps > 0.0) {
        return Err(usage(anyhow!("eps must be positive")));
    }
    let ds = read_dataset(input)?;
    let groups = ds
        .records
        .iter()
        .map(|r| r.to_group())
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    let total = groups.len();
    let groups = if keep_saturated { groups } else { filter_saturated(groups) };
    let mut out = Lines::open(cfg.output.as_deref())?;
    out.put(&json!({
        "provenance": RunProvenance::new("advantages", cfg),
        "source": ds.provenance,
        "eps": eps,
        "n_groups": total,
        "n_kept": groups.len(),
    }))?;
    for g in &groups {
        let adv = g.advantages(eps);
        out.put(&json!({
            "prompt_id": g.prompt_id,
            "rewards": g.rewards,
            "advantages": adv.values,
            "group_mean": adv.group_mean,
            "group_std": adv.group_std,
        }))?;
    }
    out.finish()?;
    Ok(EXIT_OK)
}

fn export_sft(cfg: &RunConfig, input: &Path, threshold: i8) -> CliResult<u8> {
    let ds = read_dataset(input)?;
    let pairs = export_best_of_k(&ds, threshold);
    let mut out = Lines::open(cfg.output.as_deref())?;
    out.put(&json!({
        "provenance": RunProvenance::new("export-sft", cfg),
        "source": ds.provenance,
        "threshold": threshold,
    }))?;
    for p in &pairs {
        out.put(p)?;
    }
    out.finish()?;
    Ok(EXIT_OK)
}

fn pipeline(cfg: &RunConfig, csv: bool) -> CliResult<u8> {
    let (catalog, dps) = load(cfg)?;
    let backend = cfg.backend()?.build()?;
    let defaults = PipelineOptions::default();
    let opts = PipelineOptions {
        n: cfg.n.unwrap_or(defaults.n),
        max_in_flight: cfg.max_in_flight.unwrap_or(defaults.max_in_flight),
        mode: cfg.mode(),
        ..defaults
    };
    let (items, report) =
        run_pipeline(&dps, backend.as_ref(), &catalog, &cfg.sandbox, &cfg.sampling, &opts).map_err(|e| match e {
            PipelineError::Backend(_) => backend_err(e),
            PipelineError::Setup(_) => usage(e),
            other => data(other),
        })?;
    let prov = RunProvenance::new("pipeline", cfg);
    match &cfg.output {
        Some(p) => {
            let mut f = Lines::open(Some(p))?;
            f.put(&json!({ "provenance": prov }))?;
            for it in &items {
                f.put(it)?;
            }
            f.finish()?;
            print_report(&prov, &report, csv)?;
        }
        None if csv => print_report(&prov, &report, true)?,
        None => {
            let mut out = Lines::stdout();
            out.put(&json!({ "provenance": prov }))?;
            for it in &items {
                out.put(it)?;
            }
            out.put(&json!({ "report": report }))?;
            out.finish()?;
        }
    }
    Ok(report_exit(&report))
}

fn serve(
    cfg: &RunConfig,
    host: &str,
    port: u16,
    pool: Option<usize>,
    queue: Option<usize>,
    max_batch: usize,
) -> CliResult<u8> {
    cfg.validate()?;
    let db_root = cfg.db_root()?.to_path_buf();
    let mut scfg = ServiceConfig {
        max_batch,
        sandbox: cfg.sandbox,
        ..ServiceConfig::default()
    };
    if let Some(p) = pool {
        scfg.pool = p;
        scfg.queue = p * 4;
    }
    if let Some(q) = queue {
        scfg.queue = q;
    }
    scfg.validate().map_err(|e| usage(anyhow!(e)))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(usage)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))
            .map_err(usage)?;
        eprintln!("listening on {}", listener.local_addr().map_err(usage)?);
        verisql_service::serve(listener, db_root, scfg).await.map_err(usage)
    })?;
    Ok(EXIT_OK)
}

fn make_fixtures(out: &Path, wrong_majority: &[usize]) -> CliResult<u8> {
    let n = datapoints().len();
    if let Some(bad) = wrong_majority.iter().find(|&&i| i >= n) {
        return Err(usage(anyhow!("index {bad} is out of range; the fixture split has {n} datapoints")));
    }
    std::fs::create_dir_all(out).map_err(usage)?;
    let bench = build_benchmark(out).map_err(usage)?;
    let (script, correct) = stub_script(&bench, |i| wrong_majority.contains(&i)).map_err(usage)?;
    let write = |name: &str, v: &Value| -> CliResult<()> {
        std::fs::write(out.join(name), serde_json::to_vec_pretty(v).map_err(|e| usage(anyhow!(e)))?).map_err(usage)
    };
    // BTreeMap for stable key order on disk
    let script: std::collections::BTreeMap<_, _> = script.into_iter().collect();
    write("stub.json", &json!(script))?;
    let gold: Vec<String> = bench.datapoints.iter().map(|d| verisql_core::fixtures::as_trace(&d.gold_sql)).collect();
    write("gold_traces.json", &json!(gold))?;
    let report = SplitReport {
        n,
        n_correct: correct,
        n_invalid: 0,
        n_gold_failures: 0,
    };
    let mut o = Lines::stdout();
    o.put(&json!({
        "db_root": bench.db_root,
        "split": bench.split_path,
        "stub_script": out.join("stub.json"),
        "gold_traces": out.join("gold_traces.json"),
        "expected_pipeline_accuracy": report.accuracy_percent(),
    }))?;
    o.finish()?;
    Ok(EXIT_OK)
}
