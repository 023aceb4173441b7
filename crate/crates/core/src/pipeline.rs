//! End-to-end question answering: augment → route → (vector ∥ graph)
//! retrieval → unify → generate.

use std::error::Error as StdError;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AliasStore, AugmentedQuery, Augmenter, RawQuery};
use crate::gateway::{CompletionRequest, EmbeddingVector, Gateway, GatewayError};
use crate::graph_store::{linearize, NodeText};
use crate::ingest::{ChunkingConfig, DocSource, Document, SharedStores, Stores};
use crate::router::{
    route, Article, FactLookupClient, RemoteArticleSource, RouteDecision, RouteSource, WebSearchClient,
};
use crate::text::sha256_hex;
use crate::unify::{unify, EvidenceCandidate, UnifiedContext, UnifyConfig, DEFAULT_K, DEFAULT_SIM_THRESHOLD};
use crate::vector_index::Origin;

pub const NO_EVIDENCE_MARKER: &str = "[no evidence found]";

pub const ANSWER_SYSTEM: &str = "Answer the question using only the numbered evidence. \
If the evidence does not contain the answer, say that it is not known.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    Direct,
    ChainOfThought,
    ChainOfVerification,
}

impl FromStr for PromptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "direct" => Ok(Self::Direct),
            "cot" | "chain_of_thought" => Ok(Self::ChainOfThought),
            "cove" | "chain_of_verification" => Ok(Self::ChainOfVerification),
            other => Err(format!("unknown prompt strategy {other:?}")),
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Direct => "direct",
            Self::ChainOfThought => "chain_of_thought",
            Self::ChainOfVerification => "chain_of_verification",
        })
    }
}

/// Which retrieval branches feed unification. `Vector` and `Graph` are the
/// single-source baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Hybrid,
    Vector,
    Graph,
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hybrid" => Ok(Self::Hybrid),
            "vector" => Ok(Self::Vector),
            "graph" => Ok(Self::Graph),
            other => Err(format!("unknown retrieval mode {other:?}")),
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hybrid => "hybrid",
            Self::Vector => "vector",
            Self::Graph => "graph",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub sim_threshold: f64,
    pub hops: usize,
    pub retrieval: RetrievalMode,
    pub prompt_strategy: PromptStrategy,
    pub trace: bool,
    pub llm_dedup: bool,
    pub chunking: ChunkingConfig,
    pub web_max_results: usize,
    /// Run the vector and graph branches on separate threads.
    pub parallel: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            hops: 1,
            retrieval: RetrievalMode::Hybrid,
            prompt_strategy: PromptStrategy::Direct,
            trace: false,
            llm_dedup: false,
            chunking: ChunkingConfig::default(),
            web_max_results: 5,
            parallel: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.sim_threshold > 0.0 && self.sim_threshold <= 1.0) {
            return bad(format!("sim_threshold {} outside (0, 1]", self.sim_threshold));
        }
        if !(1..=2).contains(&self.hops) {
            return bad(format!("hops {} must be 1 or 2", self.hops));
        }
        if self.chunking.chunk_chars == 0 || self.chunking.overlap_chars >= self.chunking.chunk_chars {
            return bad(format!(
                "overlap_chars {} must be below chunk_chars {}",
                self.chunking.overlap_chars, self.chunking.chunk_chars
            ));
        }
        Ok(())
    }

    pub fn unify_config(&self) -> UnifyConfig {
        UnifyConfig {
            k: self.k,
            sim_threshold: self.sim_threshold,
            llm_dedup: self.llm_dedup,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("prompt strategy {0} is not implemented")]
    NotImplemented(PromptStrategy),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
}

fn at<T, E: Into<Box<dyn StdError + Send + Sync>>>(stage: &'static str, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::Stage {
        stage,
        source: e.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub duration_us: u64,
    pub input_digest: String,
    pub output_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub query_id: String,
    pub text: String,
    pub augmented: AugmentedQuery,
    pub route: RouteDecision,
    pub context: UnifiedContext,
    pub prompt_digest: String,
    pub trace: Vec<StageRecord>,
}

impl Answer {
    /// JSON with wall-clock durations zeroed, for byte comparisons.
    pub fn canonical_json(&self) -> String {
        let mut a = self.clone();
        for r in &mut a.trace {
            r.duration_us = 0;
        }
        serde_json::to_string_pretty(&a).expect("answer serializes")
    }
}

fn digest<T: Serialize + ?Sized>(v: &T) -> String {
    sha256_hex(serde_json::to_string(v).expect("serializable").as_bytes())
}

struct Tracer {
    on: bool,
    records: Vec<StageRecord>,
}

impl Tracer {
    fn record<I: Serialize + ?Sized, O: Serialize + ?Sized>(&mut self, stage: &str, start: Instant, input: &I, output: &O) {
        if self.on {
            self.records.push(StageRecord {
                stage: stage.to_string(),
                duration_us: start.elapsed().as_micros() as u64,
                input_digest: digest(input),
                output_digest: digest(output),
            });
        }
    }
}

/// Deterministic generation prompt: numbered evidence in context order,
/// then the augmented query.
pub fn build_prompt(aq: &AugmentedQuery, ctx: &UnifiedContext) -> CompletionRequest {
    let mut user = String::from("Evidence:\n");
    if ctx.items.is_empty() {
        user.push_str(NO_EVIDENCE_MARKER);
        user.push('\n');
    }
    for (i, c) in ctx.items.iter().enumerate() {
        let tag = match c.origin {
            Origin::Vector => "vector",
            Origin::Graph => "graph",
        };
        user.push_str(&format!("[{}] ({tag}) {}\n", i + 1, c.text));
    }
    user.push_str("\nQuestion: ");
    user.push_str(&aq.text);
    CompletionRequest::new(ANSWER_SYSTEM, user)
}

/// Title lookup over ingested documents. Document titles that are alias
/// surfaces of the requested canonical also count as hits.
pub struct StoreFactLookup<'a> {
    pub stores: &'a Stores,
    pub aliases: &'a AliasStore,
    pub remote: Option<&'a dyn RemoteArticleSource>,
}

impl FactLookupClient for StoreFactLookup<'_> {
    fn lookup(&self, canonical: &str) -> Result<Option<Article>, GatewayError> {
        let want = canonical.to_lowercase();
        let hit = self.stores.docs.values().find(|d| {
            d.title.to_lowercase() == want
                || self
                    .aliases
                    .canonicalize(&d.title)
                    .is_some_and(|c| c.to_lowercase() == want)
        });
        Ok(hit.map(|d| Article {
            title: d.title.clone(),
            text: d.body.clone(),
        }))
    }

    fn fetch_remote(&self, canonical: &str) -> Result<Option<Article>, GatewayError> {
        match self.remote {
            Some(r) => r.fetch(canonical),
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
struct RetrievalOutput {
    vector_hits: Vec<(String, f64)>,
    graph_texts: Vec<NodeText>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub augmenter: Augmenter,
    pub gateway: Arc<dyn Gateway>,
    pub web: Arc<dyn WebSearchClient>,
    pub remote: Option<Arc<dyn RemoteArticleSource>>,
    pub stores: SharedStores,
}

impl Pipeline {
    pub fn new(
        cfg: PipelineConfig,
        augmenter: Augmenter,
        gateway: Arc<dyn Gateway>,
        web: Arc<dyn WebSearchClient>,
        stores: Stores,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            augmenter,
            gateway,
            web,
            remote: None,
            stores: SharedStores::new(stores),
        })
    }

    pub fn with_remote(mut self, remote: Arc<dyn RemoteArticleSource>) -> Self {
        self.remote = Some(remote);
        self
    }

    pub fn answer(&self, q: &RawQuery) -> Result<Answer, PipelineError> {
        self.answer_with(q, &self.cfg)
    }

    /// Answer under `cfg` instead of the pipeline's own config.
    pub fn answer_with(&self, q: &RawQuery, cfg: &PipelineConfig) -> Result<Answer, PipelineError> {
        cfg.validate()?;
        if cfg.prompt_strategy != PromptStrategy::Direct {
            return Err(PipelineError::NotImplemented(cfg.prompt_strategy));
        }
        let gw = self.gateway.as_ref();
        let base = self.stores.snapshot();
        let mut tracer = Tracer {
            on: cfg.trace,
            records: Vec::new(),
        };

        let t = Instant::now();
        let aq = at("augment", self.augmenter.augment(q, gw))?;
        tracer.record("augment", t, &q.text, &aq);

        let t = Instant::now();
        let facts = StoreFactLookup {
            stores: &base,
            aliases: &self.augmenter.aliases,
            remote: self.remote.as_deref(),
        };
        let outcome = at("route", route(&aq, &facts, gw))?;
        tracer.record("route", t, &aq.text, &outcome);

        // Evidence sources other than the persistent corpus live only for
        // this query.
        let t = Instant::now();
        let ephemeral: Option<Stores> = match outcome.decision.source {
            RouteSource::LocalCorpus => None,
            RouteSource::LocalAPIFetch => {
                let mut overlay = (*base).clone();
                let docs: Vec<Document> = outcome
                    .fetched
                    .iter()
                    .filter(|a| !a.text.trim().is_empty())
                    .map(|a| Document {
                        doc_id: format!("remote:{}", a.title),
                        title: a.title.clone(),
                        body: a.text.clone(),
                        source: DocSource::RemoteFetch,
                    })
                    .collect();
                at(
                    "sources",
                    overlay.ingest_documents(&docs, cfg.chunking, &self.augmenter.aliases, gw),
                )?;
                Some(overlay)
            }
            RouteSource::WebSearch => {
                let results = at("sources", self.web.search(&aq.text, cfg.web_max_results))?;
                let docs: Vec<Document> = results
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| !r.snippet.trim().is_empty())
                    .map(|(i, r)| Document {
                        doc_id: format!("web:{i}"),
                        title: r.title.clone(),
                        body: r.snippet.clone(),
                        source: DocSource::WebSnippet,
                    })
                    .collect();
                let mut stores = Stores::new(gw.embed_dim());
                at(
                    "sources",
                    stores.ingest_documents(&docs, cfg.chunking, &self.augmenter.aliases, gw),
                )?;
                Some(stores)
            }
        };
        let stores: &Stores = ephemeral.as_ref().unwrap_or(&base);
        tracer.record(
            "sources",
            t,
            &outcome.decision.source,
            &(stores.vectors.len(), stores.graph.node_count(), stores.graph.edge_count()),
        );

        let t = Instant::now();
        let qv = at("embed_query", gw.embed_one(&aq.text))?;
        tracer.record("embed_query", t, &aq.text, &qv);

        let t = Instant::now();
        let (vector_hits, graph_texts) = self.retrieve(cfg, stores, &aq, &qv)?;
        let retrieval = RetrievalOutput {
            vector_hits: vector_hits.iter().map(|c| (c.text.clone(), c.score)).collect(),
            graph_texts: graph_texts.clone(),
        };
        tracer.record("retrieve", t, &aq.text, &retrieval);

        let t = Instant::now();
        let ctx = at(
            "unify",
            unify(&qv, vector_hits, &graph_texts, &cfg.unify_config(), gw),
        )?;
        tracer.record("unify", t, &retrieval, &ctx);

        let t = Instant::now();
        let req = build_prompt(&aq, &ctx);
        let prompt_digest = req.prompt_hash();
        let text = at("generate", gw.complete(&req))?;
        tracer.record("generate", t, &prompt_digest, &text);

        Ok(Answer {
            query_id: q.id.clone(),
            text,
            augmented: aq,
            route: outcome.decision,
            context: ctx,
            prompt_digest,
            trace: tracer.records,
        })
    }

    fn retrieve(
        &self,
        cfg: &PipelineConfig,
        stores: &Stores,
        aq: &AugmentedQuery,
        qv: &EmbeddingVector,
    ) -> Result<(Vec<EvidenceCandidate>, Vec<NodeText>), PipelineError> {
        let vector_branch = || {
            if cfg.retrieval == RetrievalMode::Graph {
                return Ok(Vec::new());
            }
            vector_candidates(stores, qv, 2 * cfg.k)
        };
        let graph_branch = || -> Result<Vec<NodeText>, PipelineError> {
            if cfg.retrieval == RetrievalMode::Vector {
                return Ok(Vec::new());
            }
            let sg = at("graph_retrieve", stores.graph.query_subgraph(&aq.entities, cfg.hops))?;
            at("graph_retrieve", linearize(&sg, self.gateway.as_ref()))
        };
        if cfg.parallel {
            std::thread::scope(|s| {
                let g = s.spawn(graph_branch);
                let v = vector_branch();
                let g = g.join().expect("graph retrieval thread panicked");
                Ok((v?, g?))
            })
        } else {
            Ok((vector_branch()?, graph_branch()?))
        }
    }
}

fn vector_candidates(stores: &Stores, qv: &EmbeddingVector, n: usize) -> Result<Vec<EvidenceCandidate>, PipelineError> {
    let hits = at("vector_retrieve", stores.vectors.search(qv, n))?;
    Ok(hits
        .into_iter()
        .filter_map(|h| {
            let chunk = stores.chunks.get(&h.chunk_id)?;
            let v = stores.vectors.get(&h.chunk_id)?.clone();
            let mut c = EvidenceCandidate::new(chunk.text.clone(), v, Origin::Vector)
                .with_provenance([h.chunk_id.clone()]);
            c.score = h.score;
            Some(c)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AcronymTable, Entity, EntityKind, IntentCues, WhIntent};
    use crate::gateway::MockGateway;
    use crate::router::MockWebSearch;

    fn aq(text: &str) -> AugmentedQuery {
        AugmentedQuery {
            original: RawQuery::new("q", text).unwrap(),
            text: text.into(),
            entities: vec![Entity {
                surface: "X".into(),
                canonical: "X".into(),
                kind: EntityKind::Other,
            }],
            cues: IntentCues {
                wh_intent: WhIntent::What,
                temporal: false,
                factual: true,
            },
        }
    }

    #[test]
    fn prompt_lists_evidence_in_order() {
        let mut a = EvidenceCandidate::new("first", EmbeddingVector::default(), Origin::Vector);
        a.score = 0.9;
        let mut b = EvidenceCandidate::new("second", EmbeddingVector::default(), Origin::Graph);
        b.score = 0.5;
        let ctx = UnifiedContext { items: vec![a, b], k: 2 };
        let req = build_prompt(&aq("What is X?"), &ctx);
        assert_eq!(
            req.user_prompt,
            "Evidence:\n[1] (vector) first\n[2] (graph) second\n\nQuestion: What is X?"
        );
    }

    #[test]
    fn empty_context_marker() {
        let req = build_prompt(&aq("What is X?"), &UnifiedContext::empty(3));
        assert!(req.user_prompt.contains(NO_EVIDENCE_MARKER));
    }

    #[test]
    fn config_validation() {
        let mut c = PipelineConfig::default();
        assert!(c.validate().is_ok());
        c.hops = 3;
        assert!(c.validate().is_err());
        c.hops = 1;
        c.sim_threshold = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn non_direct_strategy_errors() {
        let cfg = PipelineConfig {
            prompt_strategy: PromptStrategy::ChainOfThought,
            ..PipelineConfig::default()
        };
        let gw: Arc<dyn Gateway> = Arc::new(MockGateway::default());
        let p = Pipeline::new(
            cfg,
            Augmenter::new(AliasStore::default(), AcronymTable::default(), 2025),
            gw.clone(),
            Arc::new(MockWebSearch::new()),
            Stores::new(gw.embed_dim()),
        )
        .unwrap();
        let err = p.answer(&RawQuery::new("q", "What is X?").unwrap()).unwrap_err();
        assert!(matches!(err, PipelineError::NotImplemented(PromptStrategy::ChainOfThought)));
    }
}
