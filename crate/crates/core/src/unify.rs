//! Merges vector hits with embedded graph texts, reranks everything by
//! cosine against the query, keeps the top 2k, deduplicates and caps at k.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, EmbeddingVector, Gateway, GatewayError};
use crate::graph_store::NodeText;
use crate::text::normalize_for_dedup;
use crate::vector_index::Origin;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCandidate {
    pub text: String,
    #[serde(skip)]
    pub vector: EmbeddingVector,
    pub score: f64,
    pub origin: Origin,
    pub provenance: BTreeSet<String>,
}

impl EvidenceCandidate {
    pub fn new(text: impl Into<String>, vector: EmbeddingVector, origin: Origin) -> Self {
        Self {
            text: text.into(),
            vector,
            score: 0.0,
            origin,
            provenance: BTreeSet::new(),
        }
    }

    pub fn with_provenance<I: IntoIterator<Item = String>>(mut self, ids: I) -> Self {
        self.provenance.extend(ids);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedContext {
    pub items: Vec<EvidenceCandidate>,
    pub k: usize,
}

impl UnifiedContext {
    pub fn empty(k: usize) -> Self {
        Self { items: Vec::new(), k }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }
}

/// Score descending, then vector before graph, then text.
pub fn rank_order(a: &EvidenceCandidate, b: &EvidenceCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.origin.cmp(&b.origin))
        .then_with(|| a.text.cmp(&b.text))
}

/// Rescore every candidate against `qv` and keep the best `2k`.
pub fn get_top_2k(qv: &EmbeddingVector, candidates: Vec<EvidenceCandidate>, k: usize) -> Vec<EvidenceCandidate> {
    let mut scored: Vec<EvidenceCandidate> = candidates
        .into_iter()
        .map(|mut c| {
            c.score = qv.cosine(&c.vector);
            c
        })
        .collect();
    scored.sort_by(rank_order);
    scored.truncate(2 * k.max(1));
    scored
}

/// Drop exact duplicates after normalization, then near-duplicates whose
/// cosine to an already kept item reaches `sim_threshold`. Input order is
/// taken as priority, so the earlier (higher scored) copy survives.
pub fn text_dedup(items: Vec<EvidenceCandidate>, sim_threshold: f64) -> Vec<EvidenceCandidate> {
    let mut seen = HashSet::new();
    let exact: Vec<EvidenceCandidate> = items
        .into_iter()
        .filter(|c| seen.insert(normalize_for_dedup(&c.text)))
        .collect();

    let mut kept: Vec<EvidenceCandidate> = Vec::with_capacity(exact.len());
    for c in exact {
        if kept.iter().all(|k| k.vector.cosine(&c.vector) < sim_threshold) {
            kept.push(c);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnifyConfig {
    pub k: usize,
    pub sim_threshold: f64,
    pub llm_dedup: bool,
}

impl Default for UnifyConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            llm_dedup: false,
        }
    }
}

/// Build graph-origin candidates by embedding each linearized node text.
pub fn embed_graph_texts(
    graph_texts: &[NodeText],
    gateway: &dyn Gateway,
) -> Result<Vec<EvidenceCandidate>, GatewayError> {
    let texts: Vec<NodeText> = graph_texts
        .iter()
        .filter(|t| !t.text.trim().is_empty())
        .cloned()
        .collect();
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let batch: Vec<String> = texts.iter().map(|t| t.text.clone()).collect();
    let vectors = gateway.embed(&batch)?;
    Ok(texts
        .into_iter()
        .zip(vectors)
        .map(|(t, v)| EvidenceCandidate::new(t.text, v, Origin::Graph).with_provenance(t.provenance))
        .collect())
}

pub fn unify(
    qv: &EmbeddingVector,
    vector_hits: Vec<EvidenceCandidate>,
    graph_texts: &[NodeText],
    cfg: &UnifyConfig,
    gateway: &dyn Gateway,
) -> Result<UnifiedContext, GatewayError> {
    let mut all = vector_hits;
    all.extend(embed_graph_texts(graph_texts, gateway)?);
    let top = get_top_2k(qv, all, cfg.k);
    let mut kept = text_dedup(top, cfg.sim_threshold);
    if cfg.llm_dedup && kept.len() > 1 {
        kept = llm_redundancy_filter(kept, gateway)?;
    }
    kept.truncate(cfg.k);
    Ok(UnifiedContext { items: kept, k: cfg.k })
}

pub const REDUNDANCY_SYSTEM: &str = "You are given numbered context passages. \
List the numbers of passages that repeat information already stated by an earlier passage, \
as a comma-separated list. Respond with NONE if no passage is redundant.";

/// Ask the model which passages are redundant and drop them. An answer
/// that cannot be parsed removes nothing; the first passage is always kept.
pub fn llm_redundancy_filter(
    items: Vec<EvidenceCandidate>,
    gateway: &dyn Gateway,
) -> Result<Vec<EvidenceCandidate>, GatewayError> {
    let mut user = String::new();
    for (i, c) in items.iter().enumerate() {
        user.push_str(&format!("[{}] {}\n", i + 1, c.text));
    }
    let req = CompletionRequest::new(REDUNDANCY_SYSTEM, user.trim_end()).with_max_tokens(64);
    let reply = gateway.complete(&req)?;
    let drop = parse_redundant(&reply, items.len());
    Ok(items
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(&(i + 1)))
        .map(|(_, c)| c)
        .collect())
}

fn parse_redundant(reply: &str, n: usize) -> BTreeSet<usize> {
    let line = reply.lines().next().unwrap_or("").trim();
    if line.eq_ignore_ascii_case("none") {
        return BTreeSet::new();
    }
    let parsed: Option<BTreeSet<usize>> = line
        .split(',')
        .map(|p| p.trim().trim_matches(|c| c == '[' || c == ']').parse::<usize>().ok())
        .collect();
    parsed
        .unwrap_or_default()
        .into_iter()
        .filter(|&i| i >= 2 && i <= n)
        .collect()
}
