//! Generation backends: an OpenAI-compatible chat-completions client and a
//! scripted stub keyed by prompt digest.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::{ExtractOptions, GenerationTrace};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("credential error: {0}")]
    Credential(String),
    #[error("backend unreachable: {0}")]
    Connectivity(String),
    #[error("backend failed after {attempts} attempt(s), last status {}: {message}", fmt_status(.last_status))]
    Exhausted {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("backend rejected request with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("stub script has no entry for prompt digest {digest}")]
    Fixture { digest: String },
    #[error("invalid backend config: {0}")]
    Config(String),
}

fn fmt_status(s: &Option<u16>) -> String {
    s.map_or_else(|| "none".to_string(), |s| s.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.n == 0 {
            return Err(BackendError::Config("n must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Config("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

pub trait ModelBackend: Send + Sync {
    /// Returns exactly `req.n` traces in completion order.
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GenerationTrace>, BackendError>;

    /// Fails fast when the backend cannot be reached at all.
    fn probe(&self) -> Result<(), BackendError> {
        Ok(())
    }

    fn model_id(&self) -> &str;
}

/// Hex SHA-256 of the prompt text.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Scripted backend. The script maps a prompt digest (or `"*"`) to trace
/// texts; a request for `n` traces takes the first `n`, cycling if the
/// entry is shorter.
#[derive(Debug, Clone, Default)]
pub struct StubBackend {
    entries: HashMap<String, Vec<String>>,
    wildcard: Option<Vec<String>>,
    extract: ExtractOptions,
}

impl StubBackend {
    pub fn from_map(mut script: HashMap<String, Vec<String>>) -> Result<Self, BackendError> {
        if let Some((k, _)) = script.iter().find(|(_, v)| v.is_empty()) {
            return Err(BackendError::Config(format!("stub entry {k} has no traces")));
        }
        let wildcard = script.remove("*");
        Ok(StubBackend {
            entries: script,
            wildcard,
            extract: ExtractOptions::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read stub script {}: {e}", path.display())))?;
        let map: HashMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("stub script {}: {e}", path.display())))?;
        Self::from_map(map)
    }

    pub fn with_extract_options(mut self, extract: ExtractOptions) -> Self {
        self.extract = extract;
        self
    }
}

impl ModelBackend for StubBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GenerationTrace>, BackendError> {
        req.validate()?;
        let digest = prompt_digest(&req.prompt);
        let entry = self
            .entries
            .get(&digest)
            .or(self.wildcard.as_ref())
            .ok_or(BackendError::Fixture { digest })?;
        Ok((0..req.n)
            .map(|i| GenerationTrace::with_options(entry[i % entry.len()].clone(), self.extract))
            .collect())
    }

    fn model_id(&self) -> &str {
        "stub"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Backoff {
    pub base_ms: u64,
    pub factor: f64,
    pub jitter: f64,
    pub cap_ms: u64,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base_ms: 500,
            factor: 2.0,
            jitter: 0.2,
            cap_ms: 8_000,
        }
    }
}

impl Backoff {
    /// Delay before retry number `attempt` (0-based), jitter included.
    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let raw = (self.base_ms as f64) * self.factor.powi(attempt as i32);
        let capped = raw.min(self.cap_ms as f64);
        let j = if self.jitter > 0.0 {
            rng.random_range(-self.jitter..=self.jitter)
        } else {
            0.0
        };
        Duration::from_millis((capped * (1.0 + j)).max(0.0) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env_var: Option<String>,
    pub request_timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub backoff: Backoff,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://localhost:8000/v1".into(),
            model_id: "default".into(),
            auth_token_env_var: None,
            request_timeout_ms: 120_000,
            max_retries: 3,
            max_in_flight: 8,
            backoff: Backoff::default(),
        }
    }
}

struct Secret(String);

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}

/// Counting semaphore shared by all callers of one backend.
#[derive(Debug)]
struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max,
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    token: Option<Arc<Secret>>,
    limiter: Arc<Limiter>,
    extract: ExtractOptions,
}

enum Attempt {
    Done(Vec<String>),
    Retry { status: Option<u16>, message: String },
    Fatal(BackendError),
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<Self, BackendError> {
        if cfg.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        let token = match &cfg.auth_token_env_var {
            Some(var) => match std::env::var(var) {
                Ok(t) if !t.is_empty() => Some(Arc::new(Secret(t))),
                _ => return Err(BackendError::Credential(format!("environment variable {var} is not set"))),
            },
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.request_timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(RemoteBackend {
            limiter: Arc::new(Limiter::new(cfg.max_in_flight)),
            cfg,
            client,
            token,
            extract: ExtractOptions::default(),
        })
    }

    pub fn with_extract_options(mut self, extract: ExtractOptions) -> Self {
        self.extract = extract;
        self
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{path}", self.cfg.base_url.trim_end_matches('/'))
    }

    fn body(&self, req: &GenerationRequest, n: usize) -> Value {
        let mut body = json!({
            "model": self.cfg.model_id,
            "messages": [{"role": "user", "content": req.prompt}],
            "n": n,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let _permit = self.limiter.acquire();
        let mut rb = self.client.post(self.endpoint("chat/completions")).json(body);
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(&t.0);
        }
        let resp = match rb.send() {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    status: None,
                    message: e.without_url().to_string(),
                }
            }
        };
        let status = resp.status();
        if status.is_success() {
            return match resp.json::<Value>() {
                Ok(v) => match parse_choices(&v) {
                    Ok(c) => Attempt::Done(c),
                    Err(e) => Attempt::Fatal(e),
                },
                Err(e) => Attempt::Retry {
                    status: Some(status.as_u16()),
                    message: e.without_url().to_string(),
                },
            };
        }
        let code = status.as_u16();
        let text: String = resp.text().unwrap_or_default().chars().take(200).collect();
        match code {
            401 | 403 => Attempt::Fatal(BackendError::Credential(format!("status {code}"))),
            429 | 500..=599 => Attempt::Retry {
                status: Some(code),
                message: text,
            },
            _ => Attempt::Fatal(BackendError::Rejected { status: code, message: text }),
        }
    }

    fn request_with_retries(&self, body: &Value) -> Result<Vec<String>, BackendError> {
        let mut rng = rand::rng();
        let mut last: (Option<u16>, String) = (None, String::new());
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let d = self.cfg.backoff.delay(attempt - 1, &mut rng);
                tracing::debug!(attempt, delay_ms = d.as_millis() as u64, "retrying chat completion");
                std::thread::sleep(d);
            }
            match self.attempt(body) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry { status, message } => {
                    tracing::warn!(attempt, status = ?status, "transient backend failure");
                    last = (status, message);
                }
            }
        }
        Err(BackendError::Exhausted {
            attempts: self.cfg.max_retries + 1,
            last_status: last.0,
            message: last.1,
        })
    }
}

fn parse_choices(v: &Value) -> Result<Vec<String>, BackendError> {
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("missing choices array".into()))?;
    let mut indexed: Vec<(u64, String)> = Vec::with_capacity(choices.len());
    for (pos, c) in choices.iter().enumerate() {
        let content = c
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol(format!("choice {pos} has no message content")))?;
        let idx = c.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
        indexed.push((idx, content.to_string()));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, c)| c).collect())
}

impl ModelBackend for RemoteBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GenerationTrace>, BackendError> {
        req.validate()?;
        let mut texts: Vec<String> = Vec::with_capacity(req.n);
        // some servers ignore `n`; keep asking for the remainder
        while texts.len() < req.n {
            let got = self.request_with_retries(&self.body(req, req.n - texts.len()))?;
            if got.is_empty() {
                return Err(BackendError::Protocol("response contained no choices".into()));
            }
            texts.extend(got);
        }
        texts.truncate(req.n);
        Ok(texts
            .into_iter()
            .map(|t| GenerationTrace::with_options(t, self.extract))
            .collect())
    }

    fn probe(&self) -> Result<(), BackendError> {
        let mut rb = self.client.get(self.endpoint("models"));
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(&t.0);
        }
        match rb.send() {
            Ok(r) if matches!(r.status().as_u16(), 401 | 403) => {
                Err(BackendError::Credential(format!("status {}", r.status().as_u16())))
            }
            Ok(_) => Ok(()),
            Err(e) => Err(BackendError::Connectivity(e.without_url().to_string())),
        }
    }

    fn model_id(&self) -> &str {
        &self.cfg.model_id
    }
}
