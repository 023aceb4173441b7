//! LLM gateway: text completion and embeddings behind one trait.
//!
//! Two backends exist. [`MockGateway`] is pure and deterministic: completions
//! come from a fixture table keyed by a stable prompt hash (falling back to an
//! echo transform) and embeddings come from a hashed-unigram embedder.
//! [`HttpGateway`] talks to any OpenAI-compatible `/chat/completions` and
//! `/embeddings` endpoint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::text::{fnv1a64, sha256_hex};

pub const DEFAULT_EMBED_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("credentials rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("fixture file {path}: {message}")]
    Fixture { path: String, message: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

/// A single chat-style completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_tokens: u32,
    pub temperature: f32,
}

impl CompletionRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            max_tokens: 256,
            temperature: 0.0,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.user_prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("user_prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Stable fixture key: SHA-256 over `system \x1f user`.
    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.system_prompt, &self.user_prompt)
    }
}

pub fn prompt_hash(system_prompt: &str, user_prompt: &str) -> String {
    let mut buf = Vec::with_capacity(system_prompt.len() + user_prompt.len() + 1);
    buf.extend_from_slice(system_prompt.as_bytes());
    buf.push(0x1f);
    buf.extend_from_slice(user_prompt.as_bytes());
    sha256_hex(&buf)
}

/// Dense unit-norm embedding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Wrap values that are already normalized. No check is made.
    pub fn from_normalized(values: Vec<f32>) -> Self {
        Self { values }
    }

    /// L2-normalize `values`. Returns `None` for zero, empty or non-finite input.
    pub fn normalized(values: &[f64]) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        Some(Self {
            values: values.iter().map(|v| (v / norm) as f32).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        self.values.iter().all(|v| v.is_finite()) && (self.l2_norm() - 1.0).abs() <= tol
    }

    /// Cosine similarity of two unit vectors, i.e. their dot product.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// Sums in f64. A zero result is always +0.0 so score ordering is not
/// affected by the sign of zero.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum::<f64>()
        + 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mock" => Ok(Self::Mock),
            "http" => Ok(Self::Http),
            other => Err(format!("unknown backend kind {other:?} (expected mock|http)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub api_key_env_var: Option<String>,
    pub model_name: Option<String>,
    pub embed_model_name: Option<String>,
    pub embed_dim: usize,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    pub retry_backoff: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            api_key_env_var: None,
            model_name: None,
            embed_model_name: None,
            embed_dim: DEFAULT_EMBED_DIM,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            retry_backoff: Duration::from_millis(500),
        }
    }
}

/// Completion + embedding backend. Implementations are immutable after
/// construction and safe to share across threads.
pub trait Gateway: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError>;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
    fn embed_dim(&self) -> usize;
    fn kind(&self) -> BackendKind;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        self.embed(&[text.to_string()])?
            .pop()
            .ok_or(GatewayError::EmptyResponse)
    }
}

pub fn build_gateway(
    cfg: &BackendConfig,
    fixtures: Option<&Path>,
) -> Result<Arc<dyn Gateway>, GatewayError> {
    match cfg.kind {
        BackendKind::Mock => {
            let mut mock = MockGateway::new(cfg.embed_dim);
            if let Some(path) = fixtures {
                mock.load_fixtures(path)?;
            }
            Ok(Arc::new(mock))
        }
        BackendKind::Http => Ok(Arc::new(HttpGateway::new(cfg.clone())?)),
    }
}

fn check_texts(texts: &[String]) -> Result<(), GatewayError> {
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(GatewayError::InvalidRequest(format!(
            "embedding input {i} is empty"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mock backend

#[derive(Debug, Deserialize)]
struct FixtureRecord {
    #[serde(default)]
    prompt_hash: Option<String>,
    #[serde(default)]
    system_prompt: Option<String>,
    #[serde(default)]
    user_prompt: Option<String>,
    response: String,
}

/// Deterministic offline backend.
#[derive(Debug, Clone)]
pub struct MockGateway {
    fixtures: HashMap<String, String>,
    embed_dim: usize,
}

impl Default for MockGateway {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

impl MockGateway {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            fixtures: HashMap::new(),
            embed_dim: embed_dim.max(1),
        }
    }

    pub fn with_fixture(
        mut self,
        system_prompt: &str,
        user_prompt: &str,
        response: impl Into<String>,
    ) -> Self {
        self.insert_fixture(system_prompt, user_prompt, response);
        self
    }

    pub fn insert_fixture(
        &mut self,
        system_prompt: &str,
        user_prompt: &str,
        response: impl Into<String>,
    ) {
        self.fixtures
            .insert(prompt_hash(system_prompt, user_prompt), response.into());
    }

    pub fn insert_hashed(&mut self, prompt_hash: impl Into<String>, response: impl Into<String>) {
        self.fixtures.insert(prompt_hash.into(), response.into());
    }

    pub fn fixture_count(&self) -> usize {
        self.fixtures.len()
    }

    /// Load JSONL fixtures. Each line is either `{prompt_hash, response}` or
    /// `{system_prompt, user_prompt, response}`.
    pub fn load_fixtures(&mut self, path: &Path) -> Result<usize, GatewayError> {
        let fixture_err = |message: String| GatewayError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let raw = fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        let mut n = 0;
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(line)
                .map_err(|e| fixture_err(format!("line {}: {e}", lineno + 1)))?;
            let key = match (rec.prompt_hash, rec.system_prompt, rec.user_prompt) {
                (Some(h), _, _) => h,
                (None, Some(s), Some(u)) => prompt_hash(&s, &u),
                _ => {
                    return Err(fixture_err(format!(
                        "line {}: needs prompt_hash or system_prompt+user_prompt",
                        lineno + 1
                    )))
                }
            };
            self.fixtures.insert(key, rec.response);
            n += 1;
        }
        Ok(n)
    }

    /// Echo transform used when no fixture matches: an `echo:` prefix is
    /// stripped, anything else is returned as-is.
    pub fn echo(user_prompt: &str) -> String {
        match user_prompt.strip_prefix("echo:") {
            Some(rest) => rest.to_string(),
            None => user_prompt.to_string(),
        }
    }

    /// Hashed-unigram embedding of one text.
    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        hashed_unigram_embedding(text, self.embed_dim)
    }
}

/// Each lowercased whitespace token (edge punctuation trimmed) lands in slot
/// `hash % dim` with sign taken from the top hash bit. The accumulator is
/// then L2-normalized.
pub fn hashed_unigram_embedding(text: &str, dim: usize) -> EmbeddingVector {
    let lowered = text.to_lowercase();
    let mut tokens: Vec<&str> = lowered
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        tokens = lowered.split_whitespace().collect();
    }
    let mut acc = vec![0.0f64; dim];
    for tok in &tokens {
        let h = fnv1a64(tok.as_bytes());
        let slot = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[slot] += sign;
    }
    EmbeddingVector::normalized(&acc).unwrap_or_else(|| {
        // Colliding tokens cancelled out; use a one-hot on the whole text.
        let mut one_hot = vec![0.0f64; dim];
        one_hot[(fnv1a64(lowered.as_bytes()) % dim as u64) as usize] = 1.0;
        EmbeddingVector::normalized(&one_hot).expect("one-hot is non-zero")
    })
}

impl Gateway for MockGateway {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let out = match self.fixtures.get(&req.prompt_hash()) {
            Some(text) => text.clone(),
            None => Self::echo(&req.user_prompt),
        };
        if out.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(out)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        check_texts(texts)?;
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }
}

// ---------------------------------------------------------------------------
// HTTP backend

/// Blocking JSON-over-HTTP client with bounded retries.
///
/// Retries happen only on transport failures and 5xx responses; at most
/// `max_retries + 1` requests are sent per call.
#[derive(Debug, Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    max_retries: u32,
    retry_backoff: Duration,
}

impl HttpClient {
    pub fn new(
        timeout: Duration,
        api_key: Option<String>,
        max_retries: u32,
        retry_backoff: Duration,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            api_key,
            max_retries,
            retry_backoff,
        }
    }

    pub fn post_json(
        &self,
        url: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, GatewayError> {
        self.with_retries(|| {
            let mut req = self.agent.post(url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            req.send_json(body)
        })
    }

    pub fn get_json(
        &self,
        url: &str,
        query: &[(&str, &str)],
    ) -> Result<serde_json::Value, GatewayError> {
        self.with_retries(|| {
            let mut req = self.agent.get(url);
            for (k, v) in query {
                req = req.query(*k, *v);
            }
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            req.call()
        })
    }

    fn with_retries<F>(&self, send: F) -> Result<serde_json::Value, GatewayError>
    where
        F: Fn() -> Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    {
        let mut attempts = 0u32;
        let mut delay = self.retry_backoff;
        loop {
            attempts += 1;
            let retryable = match send() {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let body = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| GatewayError::Malformed(e.to_string()))?;
                    match status {
                        200..=299 => {
                            return serde_json::from_str(&body)
                                .map_err(|e| GatewayError::Malformed(e.to_string()))
                        }
                        401 | 403 => return Err(GatewayError::Auth { status }),
                        500..=599 => format!("HTTP {status}: {body}"),
                        _ => return Err(GatewayError::Http { status, body }),
                    }
                }
                Err(e) => e.to_string(),
            };
            if attempts > self.max_retries {
                return Err(GatewayError::Transport {
                    attempts,
                    message: retryable,
                });
            }
            tracing::warn!(attempt = attempts, error = %retryable, "retrying request");
            std::thread::sleep(delay);
            delay *= 2;
        }
    }
}

/// OpenAI-compatible chat-completions and embeddings backend.
#[derive(Debug, Clone)]
pub struct HttpGateway {
    cfg: BackendConfig,
    base_url: String,
    client: HttpClient,
}

impl HttpGateway {
    pub fn new(cfg: BackendConfig) -> Result<Self, GatewayError> {
        let base_url = cfg
            .endpoint_url
            .clone()
            .ok_or_else(|| GatewayError::InvalidRequest("http backend needs endpoint_url".into()))?
            .trim_end_matches('/')
            .to_string();
        let api_key = cfg
            .api_key_env_var
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        let client = HttpClient::new(cfg.timeout, api_key, cfg.max_retries, cfg.retry_backoff);
        Ok(Self {
            cfg,
            base_url,
            client,
        })
    }
}

impl Gateway for HttpGateway {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let mut messages = Vec::new();
        if !req.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": req.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": req.user_prompt}));
        let body = json!({
            "model": self.cfg.model_name.as_deref().unwrap_or("gpt-4"),
            "messages": messages,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        let resp = self
            .client
            .post_json(&format!("{}/chat/completions", self.base_url), &body)?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string();
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(text)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        check_texts(texts)?;
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({
            "model": self.cfg.embed_model_name.as_deref().unwrap_or("text-embedding-3-small"),
            "input": texts,
        });
        let resp = self
            .client
            .post_json(&format!("{}/embeddings", self.base_url), &body)?;
        let data = resp
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| GatewayError::Malformed("missing data array".into()))?;
        let mut indexed: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let idx = item
                .get("index")
                .and_then(|v| v.as_u64())
                .map_or(pos, |v| v as usize);
            let values: Vec<f64> = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| GatewayError::Malformed("missing embedding".into()))?
                .iter()
                .map(|v| v.as_f64().unwrap_or(f64::NAN))
                .collect();
            if values.len() != self.cfg.embed_dim {
                return Err(GatewayError::DimensionMismatch {
                    expected: self.cfg.embed_dim,
                    actual: values.len(),
                });
            }
            indexed.push((idx, values));
        }
        if indexed.len() != texts.len() {
            return Err(GatewayError::Malformed(format!(
                "{} embeddings for {} inputs",
                indexed.len(),
                texts.len()
            )));
        }
        indexed.sort_by_key(|(i, _)| *i);
        indexed
            .into_iter()
            .map(|(_, v)| {
                EmbeddingVector::normalized(&v)
                    .ok_or_else(|| GatewayError::Malformed("zero or non-finite embedding".into()))
            })
            .collect()
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }
}
