//! Agentic query routing: TEMPORAL queries go to web search, FACTUAL
//! queries to the local corpus, then the remote article API, then web search
//! as the last resort.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentedQuery;
use crate::gateway::{CompletionRequest, Gateway, GatewayError, HttpClient};

pub const CLASSIFY_SYSTEM: &str = "Decide if this user query is time-sensitive (temporal) or not \
(factual). Respond with exactly one token: TEMPORAL or FACTUAL.";

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("classifier returned {0:?}, expected TEMPORAL or FACTUAL")]
    UnparseableLabel(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("fixture file {path}: {message}")]
    Fixture { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RouteLabel {
    Temporal,
    Factual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteSource {
    WebSearch,
    LocalCorpus,
    LocalAPIFetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecidedBy {
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub label: RouteLabel,
    pub source: RouteSource,
    pub reason: String,
    pub decided_by: DecidedBy,
}

/// A fetched article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub title: String,
    pub text: String,
}

/// Decision plus any articles pulled from the remote API on the way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteOutcome {
    pub decision: RouteDecision,
    pub fetched: Vec<Article>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

pub trait WebSearchClient: Send + Sync {
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<SearchResult>, GatewayError>;
}

pub trait FactLookupClient: Send + Sync {
    /// Local ingested corpus only.
    fn lookup(&self, canonical: &str) -> Result<Option<Article>, GatewayError>;
    /// Remote article API fallback.
    fn fetch_remote(&self, canonical: &str) -> Result<Option<Article>, GatewayError>;
}

/// Strict single-token label parse (trim + case-fold only).
pub fn parse_label(raw: &str) -> Result<RouteLabel, RouteError> {
    match raw.trim().to_lowercase().as_str() {
        "temporal" => Ok(RouteLabel::Temporal),
        "factual" => Ok(RouteLabel::Factual),
        _ => Err(RouteError::UnparseableLabel(raw.to_string())),
    }
}

pub fn classify_request(aq: &AugmentedQuery) -> CompletionRequest {
    CompletionRequest::new(CLASSIFY_SYSTEM, aq.text.clone()).with_max_tokens(2)
}

/// Rules first: a temporal cue forces TEMPORAL; a factual cue with an
/// explicit interrogative forces FACTUAL. Anything else (no cues, or a
/// timeline-ambiguous query such as a bare noun phrase) asks the model.
pub fn classify(
    aq: &AugmentedQuery,
    gateway: &dyn Gateway,
) -> Result<(RouteLabel, DecidedBy), RouteError> {
    if aq.cues.temporal {
        return Ok((RouteLabel::Temporal, DecidedBy::Rule));
    }
    if aq.cues.factual && !aq.cues.timeline_ambiguous() {
        return Ok((RouteLabel::Factual, DecidedBy::Rule));
    }
    let raw = gateway.complete(&classify_request(aq))?;
    Ok((parse_label(&raw)?, DecidedBy::Llm))
}

pub fn route(
    aq: &AugmentedQuery,
    facts: &dyn FactLookupClient,
    gateway: &dyn Gateway,
) -> Result<RouteOutcome, RouteError> {
    let (label, decided_by) = classify(aq, gateway)?;
    let decide = |source, reason: String, fetched| RouteOutcome {
        decision: RouteDecision {
            label,
            source,
            reason,
            decided_by,
        },
        fetched,
    };
    if label == RouteLabel::Temporal {
        let why = if decided_by == DecidedBy::Rule {
            "temporal cue"
        } else {
            "classified temporal"
        };
        return Ok(decide(RouteSource::WebSearch, why.to_string(), Vec::new()));
    }
    if aq.entities.is_empty() {
        return Ok(decide(
            RouteSource::WebSearch,
            "no entities; local miss".to_string(),
            Vec::new(),
        ));
    }

    let mut trace = Vec::new();
    for e in &aq.entities {
        let hit = facts.lookup(&e.canonical)?;
        trace.push(format!(
            "lookup({})={}",
            e.canonical,
            if hit.is_some() { "hit" } else { "miss" }
        ));
        if hit.is_some() {
            return Ok(decide(RouteSource::LocalCorpus, trace.join("; "), Vec::new()));
        }
    }
    let mut fetched = Vec::new();
    for e in &aq.entities {
        let hit = facts.fetch_remote(&e.canonical)?;
        trace.push(format!(
            "fetch_remote({})={}",
            e.canonical,
            if hit.is_some() { "hit" } else { "miss" }
        ));
        fetched.extend(hit);
    }
    if !fetched.is_empty() {
        return Ok(decide(RouteSource::LocalAPIFetch, trace.join("; "), fetched));
    }
    trace.push("local miss".to_string());
    Ok(decide(RouteSource::WebSearch, trace.join("; "), Vec::new()))
}

// ---------------------------------------------------------------------------
// Clients

/// Looks entities up by case-insensitive title, then through a title-alias
/// table. Remote fetches are delegated to an optional second source.
#[derive(Clone, Default)]
pub struct CorpusFactLookup {
    titles: HashMap<String, Article>,
    title_aliases: HashMap<String, String>,
    remote: Option<Arc<dyn RemoteArticleSource>>,
}

impl std::fmt::Debug for CorpusFactLookup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorpusFactLookup")
            .field("titles", &self.titles.len())
            .field("title_aliases", &self.title_aliases.len())
            .field("remote", &self.remote.is_some())
            .finish()
    }
}

impl CorpusFactLookup {
    pub fn new<I: IntoIterator<Item = Article>>(articles: I) -> Self {
        Self {
            titles: articles
                .into_iter()
                .map(|a| (a.title.to_lowercase(), a))
                .collect(),
            ..Self::default()
        }
    }

    pub fn with_title_alias(mut self, alias: &str, title: &str) -> Self {
        self.title_aliases
            .insert(alias.to_lowercase(), title.to_lowercase());
        self
    }

    pub fn with_remote(mut self, remote: Arc<dyn RemoteArticleSource>) -> Self {
        self.remote = Some(remote);
        self
    }
}

impl FactLookupClient for CorpusFactLookup {
    fn lookup(&self, canonical: &str) -> Result<Option<Article>, GatewayError> {
        let key = canonical.to_lowercase();
        if let Some(a) = self.titles.get(&key) {
            return Ok(Some(a.clone()));
        }
        Ok(self
            .title_aliases
            .get(&key)
            .and_then(|t| self.titles.get(t))
            .cloned())
    }

    fn fetch_remote(&self, canonical: &str) -> Result<Option<Article>, GatewayError> {
        match &self.remote {
            Some(r) => r.fetch(canonical),
            None => Ok(None),
        }
    }
}

pub trait RemoteArticleSource: Send + Sync {
    fn fetch(&self, title: &str) -> Result<Option<Article>, GatewayError>;
}

/// Remote articles served from a fixture table (JSONL `{title, text}`).
#[derive(Debug, Clone, Default)]
pub struct MockRemoteArticles {
    by_title: HashMap<String, Article>,
}

impl MockRemoteArticles {
    pub fn new<I: IntoIterator<Item = Article>>(articles: I) -> Self {
        Self {
            by_title: articles
                .into_iter()
                .map(|a| (a.title.to_lowercase(), a))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, RouteError> {
        let recs: Vec<Article> = read_jsonl(path)?;
        Ok(Self::new(recs))
    }
}

impl RemoteArticleSource for MockRemoteArticles {
    fn fetch(&self, title: &str) -> Result<Option<Article>, GatewayError> {
        Ok(self.by_title.get(&title.to_lowercase()).cloned())
    }
}

/// Fetches `{endpoint}/{title}` and reads a summary-style JSON body with
/// `title` and `extract` fields. 404 means "no article".
#[derive(Debug, Clone)]
pub struct HttpRemoteArticles {
    endpoint: String,
    client: HttpClient,
}

impl HttpRemoteArticles {
    pub fn new(endpoint: &str, client: HttpClient) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            client,
        }
    }
}

impl RemoteArticleSource for HttpRemoteArticles {
    fn fetch(&self, title: &str) -> Result<Option<Article>, GatewayError> {
        let path: String = title.replace(' ', "_");
        let url = format!("{}/{}", self.endpoint, path);
        match self.client.get_json(&url, &[]) {
            Ok(v) => {
                let text = v.get("extract").and_then(|t| t.as_str()).unwrap_or("");
                if text.trim().is_empty() {
                    return Ok(None);
                }
                Ok(Some(Article {
                    title: v
                        .get("title")
                        .and_then(|t| t.as_str())
                        .unwrap_or(title)
                        .to_string(),
                    text: text.to_string(),
                }))
            }
            Err(GatewayError::Http { status: 404, .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Deserialize)]
struct SearchFixture {
    query: String,
    results: Vec<SearchResult>,
}

/// Web search served from JSONL `{query, results:[{title,url,snippet}]}`.
/// Unknown queries return no results.
#[derive(Debug, Clone, Default)]
pub struct MockWebSearch {
    by_query: HashMap<String, Vec<SearchResult>>,
}

impl MockWebSearch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_results(mut self, query: &str, results: Vec<SearchResult>) -> Self {
        self.by_query.insert(query.trim().to_lowercase(), results);
        self
    }

    pub fn load(path: &Path) -> Result<Self, RouteError> {
        let recs: Vec<SearchFixture> = read_jsonl(path)?;
        let mut s = Self::new();
        for r in recs {
            s = s.with_results(&r.query, r.results);
        }
        Ok(s)
    }
}

impl WebSearchClient for MockWebSearch {
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<SearchResult>, GatewayError> {
        Ok(self
            .by_query
            .get(&query.trim().to_lowercase())
            .map(|r| r.iter().take(max_results).cloned().collect())
            .unwrap_or_default())
    }
}

/// `GET {endpoint}?q=..&num=..`, reading an `items` array of
/// `{title, link, snippet}` (the custom-search JSON shape).
#[derive(Debug, Clone)]
pub struct HttpWebSearch {
    endpoint: String,
    client: HttpClient,
}

impl HttpWebSearch {
    pub fn new(endpoint: &str, client: HttpClient) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            client,
        }
    }
}

impl WebSearchClient for HttpWebSearch {
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<SearchResult>, GatewayError> {
        let num = max_results.to_string();
        let v = self
            .client
            .get_json(&self.endpoint, &[("q", query), ("num", &num)])?;
        let items = v.get("items").and_then(|i| i.as_array()).cloned().unwrap_or_default();
        Ok(items
            .iter()
            .filter_map(|it| {
                let snippet = it.get("snippet")?.as_str()?.to_string();
                Some(SearchResult {
                    title: it.get("title").and_then(|t| t.as_str()).unwrap_or("").to_string(),
                    url: it
                        .get("link")
                        .or_else(|| it.get("url"))
                        .and_then(|t| t.as_str())
                        .unwrap_or("")
                        .to_string(),
                    snippet,
                })
            })
            .take(max_results)
            .collect())
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RouteError> {
    let err = |message: String| RouteError::Fixture {
        path: path.display().to_string(),
        message,
    };
    let raw = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AcronymTable, AliasStore, Augmenter, EntityKind, RawQuery};
    use crate::gateway::MockGateway;

    fn augmenter() -> Augmenter {
        Augmenter::new(
            AliasStore::from_pairs([("Albert Einstein", "Albert Einstein", Some(EntityKind::Person))]),
            AcronymTable::default(),
            2025,
        )
    }

    fn aq(text: &str) -> AugmentedQuery {
        augmenter()
            .augment(&RawQuery::new("q", text).unwrap(), &MockGateway::default())
            .unwrap()
    }

    fn einstein_corpus() -> CorpusFactLookup {
        CorpusFactLookup::new([Article {
            title: "Albert Einstein".into(),
            text: "Albert Einstein was born in Ulm.".into(),
        }])
    }

    #[test]
    fn temporal_query_goes_to_web_by_rule() {
        let q = aq("What are the latest breakthroughs in AI?");
        let out = route(&q, &einstein_corpus(), &MockGateway::default()).unwrap();
        assert_eq!(out.decision.label, RouteLabel::Temporal);
        assert_eq!(out.decision.source, RouteSource::WebSearch);
        assert_eq!(out.decision.decided_by, DecidedBy::Rule);
    }

    #[test]
    fn factual_query_hits_local_corpus() {
        let q = aq("Where was Albert Einstein born?");
        let out = route(&q, &einstein_corpus(), &MockGateway::default()).unwrap();
        assert_eq!(out.decision.label, RouteLabel::Factual);
        assert_eq!(out.decision.source, RouteSource::LocalCorpus);
        assert_eq!(out.decision.decided_by, DecidedBy::Rule);
    }

    #[test]
    fn ambiguous_query_asks_the_model() {
        let q = aq("Modi visit to US");
        let gw = MockGateway::default().with_fixture(CLASSIFY_SYSTEM, &q.text, "FACTUAL");
        let (label, by) = classify(&q, &gw).unwrap();
        assert_eq!((label, by), (RouteLabel::Factual, DecidedBy::Llm));
    }

    #[test]
    fn unparseable_model_label_is_an_error() {
        let q = aq("Modi visit to US");
        let gw = MockGateway::default().with_fixture(CLASSIFY_SYSTEM, &q.text, "FACTUAL.");
        assert!(matches!(classify(&q, &gw), Err(RouteError::UnparseableLabel(_))));
        assert_eq!(parse_label("  temporal \n").unwrap(), RouteLabel::Temporal);
    }

    #[test]
    fn local_and_remote_miss_falls_back_to_web() {
        let q = aq("Where was Albert Einstein born?");
        let out = route(&q, &CorpusFactLookup::default(), &MockGateway::default()).unwrap();
        assert_eq!(out.decision.label, RouteLabel::Factual);
        assert_eq!(out.decision.source, RouteSource::WebSearch);
        assert!(out.decision.reason.ends_with("local miss"));
        assert_eq!(
            out.decision.reason,
            "lookup(Albert Einstein)=miss; fetch_remote(Albert Einstein)=miss; local miss"
        );
    }

    #[test]
    fn remote_hit_routes_to_api_fetch() {
        let q = aq("Where was Albert Einstein born?");
        let facts = CorpusFactLookup::default().with_remote(Arc::new(MockRemoteArticles::new([
            Article {
                title: "albert einstein".into(),
                text: "Albert Einstein was born in Ulm.".into(),
            },
        ])));
        let out = route(&q, &facts, &MockGateway::default()).unwrap();
        assert_eq!(out.decision.source, RouteSource::LocalAPIFetch);
        assert_eq!(out.fetched.len(), 1);
    }

    #[test]
    fn title_alias_lookup() {
        let facts = einstein_corpus().with_title_alias("Einstein", "Albert Einstein");
        assert!(facts.lookup("einstein").unwrap().is_some());
        assert!(facts.lookup("Ulm").unwrap().is_none());
    }

    #[test]
    fn factual_without_entities_records_reason() {
        let q = aq("what is entropy?");
        assert!(q.entities.is_empty());
        let out = route(&q, &einstein_corpus(), &MockGateway::default()).unwrap();
        assert_eq!(out.decision.source, RouteSource::WebSearch);
        assert_eq!(out.decision.reason, "no entities; local miss");
    }

    #[test]
    fn mock_web_search_honors_max_results() {
        let r = |i: usize| SearchResult {
            title: format!("t{i}"),
            url: format!("u{i}"),
            snippet: format!("s{i}"),
        };
        let ws = MockWebSearch::new().with_results("q", (0..5).map(r).collect());
        assert_eq!(ws.search("Q ", 3).unwrap().len(), 3);
        assert!(ws.search("other", 3).unwrap().is_empty());
    }
}
