//! Run settings: defaults, a flat `key = value` file, and per-key
//! overrides applied in that order. Also builds the runtime objects the
//! settings describe.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AcronymTable, AliasStore, AugmentError, Augmenter};
use crate::gateway::{build_gateway, BackendConfig, BackendKind, Gateway, GatewayError, HttpClient};
use crate::ingest::{ChunkingConfig, Stores};
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError, PromptStrategy, RetrievalMode};
use crate::router::{HttpRemoteArticles, HttpWebSearch, MockRemoteArticles, MockWebSearch, RemoteArticleSource, RouteError, WebSearchClient};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_CURRENT_YEAR: i32 = 2025;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{origin}: line {line}: expected key = value")]
    Syntax { origin: String, line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {message}")]
    BadValue {
        key: String,
        value: String,
        message: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub k: usize,
    pub sim_threshold: f64,
    pub hops: usize,
    pub retrieval: RetrievalMode,
    pub prompt_strategy: PromptStrategy,
    pub trace: bool,
    pub llm_dedup: bool,
    pub parallel: bool,
    pub chunk_chars: usize,
    pub overlap_chars: usize,
    pub web_max_results: usize,
    pub seed: u64,
    pub current_year: i32,

    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub model: Option<String>,
    pub embed_model: Option<String>,
    pub embed_dim: usize,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,

    /// Mock completion fixtures (JSONL).
    pub fixtures: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
    pub acronyms: Option<PathBuf>,
    /// Web search: fixture file for the mock client, or an HTTP endpoint.
    pub web_fixtures: Option<PathBuf>,
    pub web_endpoint: Option<String>,
    /// Remote article API: fixture file or HTTP endpoint.
    pub remote_fixtures: Option<PathBuf>,
    pub remote_endpoint: Option<String>,
}

impl Default for Settings {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let b = BackendConfig::default();
        Self {
            k: p.k,
            sim_threshold: p.sim_threshold,
            hops: p.hops,
            retrieval: p.retrieval,
            prompt_strategy: p.prompt_strategy,
            trace: p.trace,
            llm_dedup: p.llm_dedup,
            parallel: p.parallel,
            chunk_chars: p.chunking.chunk_chars,
            overlap_chars: p.chunking.overlap_chars,
            web_max_results: p.web_max_results,
            seed: DEFAULT_SEED,
            current_year: DEFAULT_CURRENT_YEAR,
            backend: b.kind,
            endpoint: None,
            api_key_env: None,
            model: None,
            embed_model: None,
            embed_dim: b.embed_dim,
            timeout_secs: b.timeout.as_secs(),
            max_retries: b.max_retries,
            retry_backoff_ms: b.retry_backoff.as_millis() as u64,
            fixtures: None,
            aliases: None,
            acronyms: None,
            web_fixtures: None,
            web_endpoint: None,
            remote_fixtures: None,
            remote_endpoint: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        message: e.to_string(),
    })
}

fn opt_string(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty()).then(|| v.to_string())
}

impl Settings {
    /// Set one key. Keys accept `-` or `_` as separator.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = key.trim().replace('-', "_");
        let v = value.trim();
        match k.as_str() {
            "k" => self.k = parse(&k, v)?,
            "sim_threshold" => self.sim_threshold = parse(&k, v)?,
            "hops" => self.hops = parse(&k, v)?,
            "retrieval" => self.retrieval = parse(&k, v)?,
            "prompt_strategy" => self.prompt_strategy = parse(&k, v)?,
            "trace" => self.trace = parse(&k, v)?,
            "llm_dedup" => self.llm_dedup = parse(&k, v)?,
            "parallel" => self.parallel = parse(&k, v)?,
            "chunk_chars" => self.chunk_chars = parse(&k, v)?,
            "overlap_chars" => self.overlap_chars = parse(&k, v)?,
            "web_max_results" => self.web_max_results = parse(&k, v)?,
            "seed" => self.seed = parse(&k, v)?,
            "current_year" => self.current_year = parse(&k, v)?,
            "backend" => self.backend = parse(&k, v)?,
            "endpoint" => self.endpoint = opt_string(v),
            "api_key_env" => self.api_key_env = opt_string(v),
            "model" => self.model = opt_string(v),
            "embed_model" => self.embed_model = opt_string(v),
            "embed_dim" => self.embed_dim = parse(&k, v)?,
            "timeout_secs" => self.timeout_secs = parse(&k, v)?,
            "max_retries" => self.max_retries = parse(&k, v)?,
            "retry_backoff_ms" => self.retry_backoff_ms = parse(&k, v)?,
            "fixtures" => self.fixtures = opt_string(v).map(PathBuf::from),
            "aliases" => self.aliases = opt_string(v).map(PathBuf::from),
            "acronyms" => self.acronyms = opt_string(v).map(PathBuf::from),
            "web_fixtures" => self.web_fixtures = opt_string(v).map(PathBuf::from),
            "web_endpoint" => self.web_endpoint = opt_string(v),
            "remote_fixtures" => self.remote_fixtures = opt_string(v).map(PathBuf::from),
            "remote_endpoint" => self.remote_endpoint = opt_string(v),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Apply `key = value` lines. `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.to_string(),
                line: i + 1,
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self, ConfigError> {
        let mut s = Self::default();
        if let Some(f) = file {
            s.apply_file(f)?;
        }
        for (k, v) in overrides {
            s.set(k, v)?;
        }
        Ok(s)
    }

    pub fn chunking(&self) -> ChunkingConfig {
        ChunkingConfig {
            chunk_chars: self.chunk_chars,
            overlap_chars: self.overlap_chars,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            k: self.k,
            sim_threshold: self.sim_threshold,
            hops: self.hops,
            retrieval: self.retrieval,
            prompt_strategy: self.prompt_strategy,
            trace: self.trace,
            llm_dedup: self.llm_dedup,
            chunking: self.chunking(),
            web_max_results: self.web_max_results,
            parallel: self.parallel,
        }
    }

    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            kind: self.backend,
            endpoint_url: self.endpoint.clone(),
            api_key_env_var: self.api_key_env.clone(),
            model_name: self.model.clone(),
            embed_model_name: self.embed_model.clone(),
            embed_dim: self.embed_dim,
            timeout: Duration::from_secs(self.timeout_secs),
            max_retries: self.max_retries,
            retry_backoff: Duration::from_millis(self.retry_backoff_ms),
        }
    }

    pub fn gateway(&self) -> Result<Arc<dyn Gateway>, ConfigError> {
        Ok(build_gateway(&self.backend_config(), self.fixtures.as_deref())?)
    }

    pub fn augmenter(&self) -> Result<Augmenter, ConfigError> {
        let aliases = match &self.aliases {
            Some(p) => AliasStore::load(p)?,
            None => AliasStore::default(),
        };
        let acronyms = match &self.acronyms {
            Some(p) => AcronymTable::load(p)?,
            None => AcronymTable::default(),
        };
        Ok(Augmenter::new(aliases, acronyms, self.current_year))
    }

    fn http_client(&self) -> HttpClient {
        let key = self.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
        HttpClient::new(
            Duration::from_secs(self.timeout_secs),
            key,
            self.max_retries,
            Duration::from_millis(self.retry_backoff_ms),
        )
    }

    /// Endpoint wins over fixtures; with neither, search returns nothing.
    pub fn web_search(&self) -> Result<Arc<dyn WebSearchClient>, ConfigError> {
        if let Some(url) = &self.web_endpoint {
            return Ok(Arc::new(HttpWebSearch::new(url, self.http_client())));
        }
        Ok(Arc::new(match &self.web_fixtures {
            Some(p) => MockWebSearch::load(p)?,
            None => MockWebSearch::new(),
        }))
    }

    pub fn remote_articles(&self) -> Result<Option<Arc<dyn RemoteArticleSource>>, ConfigError> {
        if let Some(url) = &self.remote_endpoint {
            return Ok(Some(Arc::new(HttpRemoteArticles::new(url, self.http_client()))));
        }
        match &self.remote_fixtures {
            Some(p) => Ok(Some(Arc::new(MockRemoteArticles::load(p)?))),
            None => Ok(None),
        }
    }
}

impl Settings {
    /// Pipeline over `stores` with every client these settings describe.
    pub fn build_pipeline(&self, stores: Stores) -> Result<Pipeline, ConfigError> {
        let mut p = Pipeline::new(
            self.pipeline_config(),
            self.augmenter()?,
            self.gateway()?,
            self.web_search()?,
            stores,
        )?;
        if let Some(remote) = self.remote_articles()? {
            p = p.with_remote(remote);
        }
        Ok(p)
    }
}
