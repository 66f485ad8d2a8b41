//! HTTP front end for the execution reward, so rollout workers can score
//! generations without a local copy of the databases.
//!
//! Endpoints: `POST /v1/score`, `POST /v1/score_batch`, `POST /v1/select`
//! and `GET /healthz`. Handlers are stateless; the catalog is shared
//! read-only. Work runs on the blocking pool behind two semaphores: one
//! bounds admitted requests (pool plus queue, excess gets 429) and one
//! bounds concurrently executing requests (pool).

use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};
use verisql_core::reward::{score_sql, RewardError, RewardRecord};
use verisql_core::selfconsistency::{select, SelectError};
use verisql_core::{DatabaseCatalog, ExecMode, GenerationTrace, SandboxConfig};

pub const DEFAULT_MAX_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Requests executing SQL at once.
    pub pool: usize,
    /// Admitted requests allowed to wait for a pool slot.
    pub queue: usize,
    pub max_batch: usize,
    pub sandbox: SandboxConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let pool = std::thread::available_parallelism().map_or(4, |n| n.get());
        ServiceConfig {
            pool,
            queue: pool * 4,
            max_batch: DEFAULT_MAX_BATCH,
            sandbox: SandboxConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.pool == 0 {
            return Err("pool must be at least 1".into());
        }
        if self.max_batch == 0 {
            return Err("max_batch must be at least 1".into());
        }
        self.sandbox.validate().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub db_id: String,
    pub gold_sql: String,
    #[serde(default)]
    pub trace: Option<String>,
    #[serde(default)]
    pub sql: Option<String>,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub reward: i8,
    #[serde(rename = "match")]
    pub matched: bool,
    pub pred_status: String,
    pub gold_status: String,
    pub elapsed_ms: u64,
}

impl From<&RewardRecord> for ScoreResponse {
    fn from(r: &RewardRecord) -> Self {
        ScoreResponse {
            reward: r.reward,
            matched: r.matched,
            pred_status: r.pred_status_label().to_string(),
            gold_status: r.gold_outcome.status.as_str().to_string(),
            elapsed_ms: r.elapsed_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectRequest {
    pub db_id: String,
    #[serde(default)]
    pub gold_sql: Option<String>,
    pub candidates: Vec<String>,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

/// An error with its HTTP status and JSON body.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({"error": code, "message": message.into()}),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unknown_db(db_id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_db", format!("unknown db_id {db_id:?}"))
    }

    fn from_reward(e: RewardError) -> Self {
        match e {
            RewardError::GoldExecution(g) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({
                    "error": "gold_execution_failed",
                    "gold_status": g.outcome.status.as_str(),
                    "message": g.outcome.message,
                }),
            },
            RewardError::UnknownDb(id) => Self::unknown_db(&id),
            RewardError::Usage(m) => Self::bad_request(m),
            RewardError::Exec(e) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn sandbox_for(base: &SandboxConfig, timeout_ms: Option<u64>) -> Result<SandboxConfig, ApiError> {
    match timeout_ms {
        Some(0) => Err(ApiError::bad_request("timeout_ms must be positive")),
        Some(t) => Ok(base.with_timeout_ms(t)),
        None => Ok(*base),
    }
}

/// Scores one request synchronously. Shared by the handlers and usable
/// in-process.
pub fn score_request(catalog: &DatabaseCatalog, base: &SandboxConfig, req: &ScoreRequest) -> Result<ScoreResponse, ApiError> {
    let trace = match (&req.trace, &req.sql) {
        (Some(t), None) => GenerationTrace::new(t.as_str()),
        (None, Some(s)) => GenerationTrace::from_sql(s.as_str()),
        _ => return Err(ApiError::bad_request("exactly one of trace or sql is required")),
    };
    let db = catalog.get(&req.db_id).ok_or_else(|| ApiError::unknown_db(&req.db_id))?;
    let cfg = sandbox_for(base, req.timeout_ms)?;
    let rec = score_sql(&req.gold_sql, &trace, db, &cfg).map_err(ApiError::from_reward)?;
    Ok(ScoreResponse::from(&rec))
}

/// Runs execution-equivalence selection; adds `chosen_reward` when a gold
/// query is supplied.
pub fn select_request(catalog: &DatabaseCatalog, base: &SandboxConfig, req: &SelectRequest) -> Result<Value, ApiError> {
    if req.candidates.is_empty() {
        return Err(ApiError::bad_request("candidates must not be empty"));
    }
    let db = catalog.get(&req.db_id).ok_or_else(|| ApiError::unknown_db(&req.db_id))?;
    let cfg = sandbox_for(base, req.timeout_ms)?;
    let cands: Vec<GenerationTrace> = req.candidates.iter().map(GenerationTrace::new).collect();
    let sel = select(&cands, db, &cfg, ExecMode::Sequential).map_err(|e| match e {
        SelectError::Empty => ApiError::bad_request(e.to_string()),
        SelectError::Exec(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    })?;
    let mut out = serde_json::to_value(&sel).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    if let Some(gold) = &req.gold_sql {
        let rec = score_sql(gold, &cands[sel.chosen_index], db, &cfg).map_err(ApiError::from_reward)?;
        out["chosen_reward"] = json!(rec.reward);
    }
    Ok(out)
}

struct Inner {
    cfg: ServiceConfig,
    catalog: OnceLock<DatabaseCatalog>,
    admission: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// State that answers 503 until [`AppState::finish_boot`] is called.
    pub fn booting(cfg: ServiceConfig) -> Self {
        AppState(Arc::new(Inner {
            admission: Arc::new(Semaphore::new(cfg.pool + cfg.queue)),
            workers: Arc::new(Semaphore::new(cfg.pool)),
            catalog: OnceLock::new(),
            cfg,
        }))
    }

    pub fn ready(cfg: ServiceConfig, catalog: DatabaseCatalog) -> Self {
        let s = Self::booting(cfg);
        s.finish_boot(catalog);
        s
    }

    pub fn finish_boot(&self, catalog: DatabaseCatalog) {
        if self.0.catalog.set(catalog).is_err() {
            tracing::warn!("catalog already set; ignoring second boot");
        }
    }

    fn catalog(&self) -> Result<&DatabaseCatalog, ApiError> {
        self.0
            .catalog
            .get()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "booting", "catalog validation in progress"))
    }

    fn admit(&self) -> Result<OwnedSemaphorePermit, ApiError> {
        self.0
            .admission
            .clone()
            .try_acquire_owned()
            .map_err(|_| ApiError::new(StatusCode::TOO_MANY_REQUESTS, "saturated", "sandbox pool and queue are full"))
    }

    /// Runs `f` on the blocking pool once a worker slot is free.
    async fn run<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&DatabaseCatalog, &SandboxConfig) -> Result<T, ApiError> + Send + 'static,
    {
        self.catalog()?;
        let permit = self
            .0
            .workers
            .clone()
            .acquire_owned()
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let _permit = permit;
            let catalog = state.0.catalog.get().expect("checked above");
            f(catalog, &state.0.cfg.sandbox)
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn healthz(State(state): State<AppState>) -> Response {
    match state.0.catalog.get() {
        Some(c) => Json(json!({"status": "ok", "catalog_dbs": c.len()})).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "booting"}))).into_response(),
    }
}

async fn score(State(state): State<AppState>, body: Bytes) -> Result<Json<ScoreResponse>, ApiError> {
    state.catalog()?;
    let req: ScoreRequest = parse(&body)?;
    let _admitted = state.admit()?;
    state.run(move |cat, cfg| score_request(cat, cfg, &req)).await.map(Json)
}

async fn score_batch(State(state): State<AppState>, body: Bytes) -> Result<Json<Vec<Value>>, ApiError> {
    state.catalog()?;
    let items: Vec<Value> = parse(&body)?;
    if items.len() > state.0.cfg.max_batch {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "batch_too_large",
            format!("batch of {} exceeds limit {}", items.len(), state.0.cfg.max_batch),
        ));
    }
    let _admitted = state.admit()?;
    let handles: Vec<_> = items
        .into_iter()
        .map(|item| {
            let state = state.clone();
            tokio::spawn(async move {
                let req: ScoreRequest = serde_json::from_value(item).map_err(|e| ApiError::bad_request(e.to_string()))?;
                state.run(move |cat, cfg| score_request(cat, cfg, &req)).await
            })
        })
        .collect();
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        let v = match h.await {
            Ok(Ok(resp)) => serde_json::to_value(resp).unwrap_or(Value::Null),
            Ok(Err(e)) => e.body,
            Err(e) => json!({"error": "internal", "message": e.to_string()}),
        };
        out.push(v);
    }
    Ok(Json(out))
}

async fn select_handler(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    state.catalog()?;
    let req: SelectRequest = parse(&body)?;
    if req.candidates.is_empty() {
        return Err(ApiError::bad_request("candidates must not be empty"));
    }
    let _admitted = state.admit()?;
    state.run(move |cat, cfg| select_request(cat, cfg, &req)).await.map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/score", post(score))
        .route("/v1/score_batch", post(score_batch))
        .route("/v1/select", post(select_handler))
        .with_state(state)
}

/// Starts answering on `listener` immediately (503 while booting), validates
/// the catalog under `db_root`, then serves until the task is dropped.
/// Returns early if the catalog is invalid.
pub async fn serve(listener: TcpListener, db_root: PathBuf, cfg: ServiceConfig) -> io::Result<()> {
    cfg.validate().map_err(io::Error::other)?;
    let state = AppState::booting(cfg);
    let addr: SocketAddr = listener.local_addr()?;
    let server = tokio::spawn(std::future::IntoFuture::into_future(axum::serve(listener, router(state.clone()))));
    tracing::info!(%addr, "listening; validating catalog");
    let catalog = tokio::task::spawn_blocking(move || DatabaseCatalog::discover(&db_root))
        .await
        .map_err(io::Error::other)?;
    match catalog {
        Ok(c) => {
            tracing::info!(dbs = c.len(), "catalog ready");
            state.finish_boot(c);
        }
        Err(e) => {
            server.abort();
            return Err(io::Error::other(e));
        }
    }
    server.await.map_err(io::Error::other)?
}
