use std::net::SocketAddr;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use verisql_core::fixtures::{build_benchmark, FixtureBenchmark};
use verisql_core::selfconsistency::select;
use verisql_core::{DatabaseCatalog, ExecMode, GenerationTrace, SandboxConfig};
use verisql_service::{router, AppState, ServiceConfig};

const SLOW_SQL: &str = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c";

struct Server {
    addr: SocketAddr,
    state: AppState,
    bench: FixtureBenchmark,
    _dir: tempfile::TempDir,
    client: reqwest::Client,
}

impl Server {
    async fn start(cfg: ServiceConfig, boot: bool) -> Server {
        let dir = tempfile::tempdir().unwrap();
        let bench = build_benchmark(dir.path()).unwrap();
        let state = AppState::booting(cfg);
        if boot {
            state.finish_boot(DatabaseCatalog::discover(&bench.db_root).unwrap());
        }
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let app = router(state.clone());
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        Server {
            addr,
            state,
            bench,
            _dir: dir,
            client: reqwest::Client::new(),
        }
    }

    async fn post(&self, path: &str, body: impl Into<reqwest::Body>) -> (u16, Value) {
        let r = self
            .client
            .post(format!("http://{}{path}", self.addr))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap())
    }

    async fn post_json(&self, path: &str, v: &Value) -> (u16, Value) {
        self.post(path, v.to_string()).await
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("http://{}{path}", self.addr)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap())
    }
}

fn cfg(pool: usize, queue: usize) -> ServiceConfig {
    ServiceConfig {
        pool,
        queue,
        ..ServiceConfig::default()
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn healthz_reports_boot_then_catalog() {
    let s = Server::start(cfg(2, 2), false).await;
    assert_eq!(s.get("/healthz").await.0, 503);
    let (st, _) = s.post_json("/v1/score", &json!({"db_id": "retail", "gold_sql": "SELECT 1", "sql": "SELECT 1"})).await;
    assert_eq!(st, 503);
    s.state.finish_boot(DatabaseCatalog::discover(&s.bench.db_root).unwrap());
    for _ in 0..3 {
        assert_eq!(s.get("/healthz").await, (200, json!({"status": "ok", "catalog_dbs": 5})));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn score_basic_cases() {
    let s = Server::start(cfg(2, 4), true).await;
    let (st, v) = s.post_json("/v1/score", &json!({"db_id": "retail", "gold_sql": "SELECT 1", "sql": "SELECT 1"})).await;
    assert_eq!(st, 200);
    assert_eq!((v["reward"].clone(), v["match"].clone()), (json!(1), json!(true)));
    assert_eq!(v["pred_status"], "success");
    assert_eq!(v["gold_status"], "success");

    let (_, v) = s.post_json("/v1/score", &json!({"db_id": "retail", "gold_sql": "SELECT 1", "sql": "SELEC 1"})).await;
    assert_eq!(v["reward"], -1);
    assert_eq!(v["pred_status"], "syntax_error");

    let (_, v) = s
        .post_json("/v1/score", &json!({"db_id": "retail", "gold_sql": "SELECT 1", "trace": "no query in here"}))
        .await;
    assert_eq!((v["reward"].clone(), v["pred_status"].clone()), (json!(-1), json!("extraction_failed")));

    let (st, v) = s.post_json("/v1/score", &json!({"db_id": "nope", "gold_sql": "SELECT 1", "sql": "SELECT 1"})).await;
    assert_eq!((st, v["error"].clone()), (404, json!("unknown_db")));

    let (st, v) = s.post_json("/v1/score", &json!({"db_id": "retail", "gold_sql": "SELECT nope", "sql": "SELECT 1"})).await;
    assert_eq!((st, v["error"].clone()), (422, json!("gold_execution_failed")));
    assert_eq!(v["gold_status"], "syntax_error");

    assert_eq!(s.post("/v1/score", "{not json").await.0, 400);
    let both = json!({"db_id": "retail", "gold_sql": "SELECT 1", "sql": "SELECT 1", "trace": "x"});
    assert_eq!(s.post_json("/v1/score", &both).await.0, 400);
    let neither = json!({"db_id": "retail", "gold_sql": "SELECT 1"});
    assert_eq!(s.post_json("/v1/score", &neither).await.0, 400);
}

#[tokio::test(flavor = "multi_thread")]
async fn batch_preserves_order_and_embeds_errors() {
    let s = Server::start(ServiceConfig { max_batch: 4, ..cfg(2, 4) }, true).await;
    let batch = json!([
        {"db_id": "retail", "gold_sql": "SELECT 1", "sql": "SELECT 1"},
        {"db_id": "nope", "gold_sql": "SELECT 1", "sql": "SELECT 1"},
        {"db_id": "retail", "gold_sql": "SELECT 1", "sql": "SELEC 1"},
        {"db_id": "retail"}
    ]);
    let (st, v) = s.post_json("/v1/score_batch", &batch).await;
    assert_eq!(st, 200);
    let v = v.as_array().unwrap();
    assert_eq!(v.len(), 4);
    assert_eq!(v[0]["reward"], 1);
    assert_eq!(v[1]["error"], "unknown_db");
    assert_eq!(v[2]["reward"], -1);
    assert_eq!(v[3]["error"], "bad_request");

    assert_eq!(s.post_json("/v1/score_batch", &json!([])).await, (200, json!([])));
    let big: Vec<Value> = (0..5).map(|_| json!({"db_id": "retail", "gold_sql": "SELECT 1", "sql": "SELECT 1"})).collect();
    assert_eq!(s.post_json("/v1/score_batch", &json!(big)).await.0, 413);
}

#[tokio::test(flavor = "multi_thread")]
async fn select_matches_in_process() {
    let s = Server::start(cfg(2, 4), true).await;
    let dp = &s.bench.datapoints[3];
    let texts = verisql_core::fixtures::candidate_texts(&dp.gold_sql, true);
    let (st, v) = s
        .post_json("/v1/select", &json!({"db_id": dp.db_id, "gold_sql": dp.gold_sql, "candidates": texts}))
        .await;
    assert_eq!(st, 200);
    let cands: Vec<_> = texts.iter().map(GenerationTrace::new).collect();
    let local = select(&cands, &s.bench.db_path(&dp.db_id), &SandboxConfig::default(), ExecMode::Parallel).unwrap();
    let mut expected = serde_json::to_value(&local).unwrap();
    expected["chosen_reward"] = json!(1);
    assert_eq!(v, expected);

    let (st, v) = s.post_json("/v1/select", &json!({"db_id": dp.db_id, "candidates": texts})).await;
    assert_eq!(st, 200);
    assert!(v.get("chosen_reward").is_none());

    let (st, _) = s.post_json("/v1/select", &json!({"db_id": dp.db_id, "candidates": []})).await;
    assert_eq!(st, 400);
}

#[tokio::test(flavor = "multi_thread")]
async fn saturation_returns_429() {
    let s = std::sync::Arc::new(Server::start(cfg(1, 0), true).await);
    let slow = json!({"db_id": "retail", "gold_sql": "SELECT 1", "sql": SLOW_SQL, "timeout_ms": 1500});
    let bg = {
        let s = s.clone();
        let slow = slow.clone();
        tokio::spawn(async move { s.post_json("/v1/score", &slow).await })
    };
    tokio::time::sleep(Duration::from_millis(300)).await;
    let (st, v) = s.post_json("/v1/score", &json!({"db_id": "retail", "gold_sql": "SELECT 1", "sql": "SELECT 1"})).await;
    assert_eq!((st, v["error"].clone()), (429, json!("saturated")));
    let (st, v) = bg.await.unwrap();
    assert_eq!((st, v["pred_status"].clone(), v["reward"].clone()), (200, json!("timeout"), json!(0)));
}

#[tokio::test(flavor = "multi_thread")]
async fn slow_request_does_not_block_independent_one() {
    let s = std::sync::Arc::new(Server::start(cfg(2, 2), true).await);
    let slow = json!({"db_id": "retail", "gold_sql": "SELECT 1", "sql": SLOW_SQL, "timeout_ms": 2000});
    let bg = {
        let s = s.clone();
        tokio::spawn(async move { s.post_json("/v1/score", &slow).await })
    };
    tokio::time::sleep(Duration::from_millis(200)).await;
    let t = Instant::now();
    let (st, _) = s.post_json("/v1/score", &json!({"db_id": "retail", "gold_sql": "SELECT 1", "sql": "SELECT 1"})).await;
    assert_eq!(st, 200);
    assert!(t.elapsed() < Duration::from_millis(1000), "fast request took {:?}", t.elapsed());
    assert_eq!(bg.await.unwrap().1["pred_status"], "timeout");
}
