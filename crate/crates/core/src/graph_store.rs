//! In-memory entity-relationship graph.
//!
//! Node ids are the case-folded entity label, so a graph built from the same
//! triples is identical regardless of ingestion history. Relations are free
//! text. Subgraph queries expand breadth-first over edges in either
//! direction and return the induced subgraph in node-id order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{guess_kind, spot_entity_spans, AliasStore, Entity, EntityKind, SPAN_STOPWORDS};
use crate::gateway::{BackendKind, CompletionRequest, Gateway, GatewayError};
use crate::ingest::Chunk;

pub const GRAPH_FORMAT: &str = "hybridrag-graph";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("hops must be 1 or 2, got {0}")]
    InvalidHops(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported graph file (format {format:?}, version {version})")]
    VersionMismatch { format: String, version: u32 },
    #[error("checksum mismatch: graph file is truncated or corrupted")]
    ChecksumMismatch,
    #[error("malformed graph file: {0}")]
    Format(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: String,
    pub label: String,
    pub kind: EntityKind,
    pub provenance: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub relation: String,
    pub provenance: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub subject_kind: EntityKind,
    pub relation: String,
    pub object: String,
    pub object_kind: EntityKind,
}

impl Triple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        Self {
            subject: subject.to_string(),
            subject_kind: EntityKind::Other,
            relation: relation.to_string(),
            object: object.to_string(),
            object_kind: EntityKind::Other,
        }
    }

    pub fn as_tuple(&self) -> (&str, &str, &str) {
        (&self.subject, &self.relation, &self.object)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsertStats {
    pub nodes_added: usize,
    pub edges_added: usize,
    pub self_loops_rejected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl Subgraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// One linearized node: its text and the chunks supporting it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeText {
    pub node_id: String,
    pub text: String,
    pub provenance: BTreeSet<String>,
}

type EdgeKey = (String, String, String);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphStore {
    nodes: BTreeMap<String, Node>,
    edges: BTreeMap<EdgeKey, Edge>,
}

pub fn node_id_for(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl GraphStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.values()
    }

    pub fn node(&self, label: &str) -> Option<&Node> {
        self.nodes.get(&node_id_for(label))
    }

    fn touch_node(&mut self, label: &str, kind: EntityKind, chunk_id: &str) -> (String, bool) {
        let id = node_id_for(label);
        let mut added = false;
        let node = self.nodes.entry(id.clone()).or_insert_with(|| {
            added = true;
            Node {
                node_id: id.clone(),
                label: label.trim().to_string(),
                kind,
                provenance: BTreeSet::new(),
            }
        });
        if node.kind == EntityKind::Other && kind != EntityKind::Other {
            node.kind = kind;
        }
        node.provenance.insert(chunk_id.to_string());
        (id, added)
    }

    /// Merge triples observed in `chunk_id`. Self-loops are rejected and counted.
    pub fn upsert_triples(&mut self, chunk_id: &str, triples: &[Triple]) -> UpsertStats {
        let mut stats = UpsertStats::default();
        for t in triples {
            let relation = t.relation.trim();
            if relation.is_empty() || t.subject.trim().is_empty() || t.object.trim().is_empty() {
                continue;
            }
            if node_id_for(&t.subject) == node_id_for(&t.object) {
                stats.self_loops_rejected += 1;
                continue;
            }
            let (src, a) = self.touch_node(&t.subject, t.subject_kind, chunk_id);
            let (dst, b) = self.touch_node(&t.object, t.object_kind, chunk_id);
            stats.nodes_added += usize::from(a) + usize::from(b);
            let key = (src.clone(), dst.clone(), relation.to_string());
            let edge = self.edges.entry(key).or_insert_with(|| {
                stats.edges_added += 1;
                Edge {
                    src,
                    dst,
                    relation: relation.to_string(),
                    provenance: BTreeSet::new(),
                }
            });
            edge.provenance.insert(chunk_id.to_string());
        }
        stats
    }

    /// Drop the given chunks from every provenance set; nodes and edges left
    /// without support are removed.
    pub fn remove_chunks(&mut self, chunk_ids: &BTreeSet<String>) {
        if chunk_ids.is_empty() {
            return;
        }
        for n in self.nodes.values_mut() {
            n.provenance.retain(|c| !chunk_ids.contains(c));
        }
        self.nodes.retain(|_, n| !n.provenance.is_empty());
        for e in self.edges.values_mut() {
            e.provenance.retain(|c| !chunk_ids.contains(c));
        }
        let nodes = &self.nodes;
        self.edges.retain(|_, e| {
            !e.provenance.is_empty() && nodes.contains_key(&e.src) && nodes.contains_key(&e.dst)
        });
    }

    pub fn query_subgraph(&self, entities: &[Entity], hops: usize) -> Result<Subgraph, GraphError> {
        let labels: Vec<&str> = entities.iter().map(|e| e.canonical.as_str()).collect();
        self.query_labels(&labels, hops)
    }

    pub fn query_labels(&self, labels: &[&str], hops: usize) -> Result<Subgraph, GraphError> {
        if !(1..=2).contains(&hops) {
            return Err(GraphError::InvalidHops(hops));
        }
        let mut neighbours: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for e in self.edges.values() {
            neighbours.entry(&e.src).or_default().insert(&e.dst);
            neighbours.entry(&e.dst).or_default().insert(&e.src);
        }
        let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for l in labels {
            if let Some((id, _)) = self.nodes.get_key_value(&node_id_for(l)) {
                if depth.insert(id.as_str(), 0).is_none() {
                    queue.push_back(id.as_str());
                }
            }
        }
        while let Some(id) = queue.pop_front() {
            let d = depth[id];
            if d == hops {
                continue;
            }
            for &n in neighbours.get(id).into_iter().flatten() {
                if !depth.contains_key(n) {
                    depth.insert(n, d + 1);
                    queue.push_back(n);
                }
            }
        }
        let nodes: Vec<Node> = depth.keys().map(|id| self.nodes[*id].clone()).collect();
        let edges: Vec<Edge> = self
            .edges
            .values()
            .filter(|e| depth.contains_key(e.src.as_str()) && depth.contains_key(e.dst.as_str()))
            .cloned()
            .collect();
        Ok(Subgraph { nodes, edges })
    }

    // -- persistence -------------------------------------------------------

    pub fn to_jsonl(&self) -> String {
        let mut body = String::new();
        for n in self.nodes.values() {
            let rec = serde_json::json!({
                "type": "node",
                "node_id": n.node_id,
                "label": n.label,
                "kind": n.kind,
                "provenance": n.provenance,
            });
            body.push_str(&rec.to_string());
            body.push('\n');
        }
        for e in self.edges.values() {
            let rec = serde_json::json!({
                "type": "edge",
                "src": e.src,
                "dst": e.dst,
                "relation": e.relation,
                "provenance": e.provenance,
            });
            body.push_str(&rec.to_string());
            body.push('\n');
        }
        let header = serde_json::json!({
            "type": "header",
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "nodes": self.nodes.len(),
            "edges": self.edges.len(),
            "crc32": crc32fast::hash(body.as_bytes()),
        });
        format!("{header}\n{body}")
    }

    pub fn from_jsonl(raw: &str) -> Result<Self, GraphError> {
        let (head, body) = raw.split_once('\n').ok_or(GraphError::ChecksumMismatch)?;
        let header: serde_json::Value =
            serde_json::from_str(head).map_err(|_| GraphError::ChecksumMismatch)?;
        let crc = header.get("crc32").and_then(|v| v.as_u64());
        if crc != Some(u64::from(crc32fast::hash(body.as_bytes()))) {
            return Err(GraphError::ChecksumMismatch);
        }
        let format = header.get("format").and_then(|v| v.as_str()).unwrap_or("");
        let version = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if format != GRAPH_FORMAT || version != GRAPH_VERSION {
            return Err(GraphError::VersionMismatch {
                format: format.to_string(),
                version,
            });
        }
        #[derive(Deserialize)]
        #[serde(tag = "type", rename_all = "lowercase")]
        enum Record {
            Node(Node),
            Edge(Edge),
        }
        let mut g = GraphStore::new();
        for (i, line) in body.lines().enumerate() {
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| GraphError::Format(format!("record {}: {e}", i + 1)))?;
            match rec {
                Record::Node(n) => {
                    g.nodes.insert(n.node_id.clone(), n);
                }
                Record::Edge(e) => {
                    if !g.nodes.contains_key(&e.src) || !g.nodes.contains_key(&e.dst) {
                        return Err(GraphError::Format(format!(
                            "edge {} -> {} references a missing node",
                            e.src, e.dst
                        )));
                    }
                    g.edges
                        .insert((e.src.clone(), e.dst.clone(), e.relation.clone()), e);
                }
            }
        }
        let want = |k: &str| header.get(k).and_then(|v| v.as_u64()).unwrap_or(u64::MAX) as usize;
        if want("nodes") != g.nodes.len() || want("edges") != g.edges.len() {
            return Err(GraphError::Format("record counts disagree with header".into()));
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        fs::write(path, self.to_jsonl()).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let raw = fs::read_to_string(path).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&raw)
    }
}

// ---------------------------------------------------------------------------
// Triple extraction

pub const TRIPLE_SYSTEM: &str = "Extract (subject, relation, object) facts between named \
entities or key concepts in the text. Respond with a JSON array of objects with fields \
\"subject\", \"relation\" (snake_case verb phrase) and \"object\".";

pub const RELATED_TO: &str = "related_to";

static BORN_IN_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+was\s+born\s+in\s+").unwrap());
static IS_A_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+is\s+an?\s+").unwrap());
static PHRASE_END_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)[.,;:!?()]|\s(?:that|which|who|whose|where|when|and|but|with)\s").unwrap()
});

struct Mention {
    start: usize,
    end: usize,
    canonical: String,
    kind: EntityKind,
    from_alias: bool,
}

fn mentions(text: &str, aliases: &AliasStore) -> Vec<Mention> {
    let alias_spans: Vec<(usize, usize, String)> = aliases.find_matches(text);
    spot_entity_spans(text, aliases)
        .into_iter()
        .map(|(s, e)| {
            let alias = alias_spans.iter().find(|(a, b, _)| *a == s && *b == e);
            let canonical = match alias {
                Some((_, _, c)) => c.clone(),
                None => strip_leading_stopwords(&text[s..e]),
            };
            let kind = aliases
                .kind_of(&canonical)
                .unwrap_or_else(|| guess_kind(&canonical));
            Mention {
                start: s,
                end: e,
                canonical,
                kind,
                from_alias: alias.is_some(),
            }
        })
        .filter(|m| !m.canonical.is_empty())
        .collect()
}

fn strip_leading_stopwords(span: &str) -> String {
    let words: Vec<&str> = span.split_whitespace().collect();
    let skip = words
        .iter()
        .take_while(|w| SPAN_STOPWORDS.contains(&w.to_lowercase().as_str()))
        .count();
    words[skip..].join(" ")
}

/// Rule-based extraction used with the mock backend.
///
/// * `X was born in Y` → `(X, born_in, Y)`
/// * `X is a Y` → `(X, is_a, Y)` with `Y` the following noun phrase
/// * every other pair of alias-store entities in the chunk → `(A, related_to, B)`
///   in order of first appearance.
pub fn extract_triples_rules(text: &str, aliases: &AliasStore) -> Vec<Triple> {
    let ms = mentions(text, aliases);
    let ends_at = |pos: usize| {
        ms.iter()
            .filter(|m| m.end <= pos && text[m.end..pos].trim().is_empty())
            .max_by_key(|m| m.end)
    };
    let mut out: Vec<Triple> = Vec::new();
    for m in BORN_IN_RE.find_iter(text) {
        let subj = ends_at(m.start());
        let obj = ms.iter().find(|o| o.start == m.end());
        if let (Some(s), Some(o)) = (subj, obj) {
            let object_kind = match o.kind {
                EntityKind::Other => EntityKind::Location,
                k => k,
            };
            out.push(Triple {
                subject: s.canonical.clone(),
                subject_kind: s.kind,
                relation: "born_in".into(),
                object: o.canonical.clone(),
                object_kind,
            });
        }
    }
    for m in IS_A_RE.find_iter(text) {
        let Some(s) = ends_at(m.start()) else { continue };
        let rest = &text[m.end()..];
        let stop = PHRASE_END_RE.find(rest).map_or(rest.len(), |p| p.start());
        let phrase: Vec<&str> = rest[..stop].split_whitespace().take(5).collect();
        if phrase.is_empty() {
            continue;
        }
        let object = phrase.join(" ");
        let object_kind = aliases.kind_of(&object).unwrap_or(EntityKind::Concept);
        let object = aliases.canonicalize(&object).map(str::to_string).unwrap_or(object);
        out.push(Triple {
            subject: s.canonical.clone(),
            subject_kind: s.kind,
            relation: "is_a".into(),
            object,
            object_kind,
        });
    }

    let linked: BTreeSet<(String, String)> = out
        .iter()
        .flat_map(|t| {
            let (a, b) = (node_id_for(&t.subject), node_id_for(&t.object));
            [(a.clone(), b.clone()), (b, a)]
        })
        .collect();
    let mut seen = BTreeSet::new();
    let alias_entities: Vec<&Mention> = ms
        .iter()
        .filter(|m| m.from_alias && seen.insert(node_id_for(&m.canonical)))
        .collect();
    for (i, a) in alias_entities.iter().enumerate() {
        for b in &alias_entities[i + 1..] {
            if linked.contains(&(node_id_for(&a.canonical), node_id_for(&b.canonical))) {
                continue;
            }
            out.push(Triple {
                subject: a.canonical.clone(),
                subject_kind: a.kind,
                relation: RELATED_TO.into(),
                object: b.canonical.clone(),
                object_kind: b.kind,
            });
        }
    }
    out
}

#[derive(Deserialize)]
struct LlmTriple {
    subject: String,
    relation: String,
    object: String,
}

fn parse_llm_triples(raw: &str, aliases: &AliasStore) -> Option<Vec<Triple>> {
    let start = raw.find('[')?;
    let end = raw.rfind(']')?;
    let list: Vec<LlmTriple> = serde_json::from_str(raw.get(start..=end)?).ok()?;
    let canon = |s: &str| {
        aliases
            .canonicalize(s)
            .map(str::to_string)
            .unwrap_or_else(|| s.trim().to_string())
    };
    Some(
        list.into_iter()
            .map(|t| {
                let (subject, object) = (canon(&t.subject), canon(&t.object));
                Triple {
                    subject_kind: aliases.kind_of(&subject).unwrap_or_else(|| guess_kind(&subject)),
                    object_kind: aliases.kind_of(&object).unwrap_or_else(|| guess_kind(&object)),
                    subject,
                    object,
                    relation: t.relation.trim().replace(' ', "_"),
                }
            })
            .collect(),
    )
}

/// Triples for one chunk: rule-based with the mock backend, prompt-based
/// otherwise. Unparseable model output yields no triples.
pub fn extract_triples(
    chunk: &Chunk,
    aliases: &AliasStore,
    gateway: &dyn Gateway,
) -> Result<Vec<Triple>, GraphError> {
    if chunk.text.trim().is_empty() {
        return Ok(Vec::new());
    }
    if gateway.kind() == BackendKind::Mock {
        return Ok(extract_triples_rules(&chunk.text, aliases));
    }
    let raw = gateway.complete(
        &CompletionRequest::new(TRIPLE_SYSTEM, chunk.text.clone()).with_max_tokens(512),
    )?;
    match parse_llm_triples(&raw, aliases) {
        Some(t) => Ok(t),
        None => {
            tracing::warn!(chunk = %chunk.chunk_id, "unparseable triple extraction output");
            Ok(Vec::new())
        }
    }
}

// ---------------------------------------------------------------------------
// Linearization

pub const LINEARIZE_SYSTEM: &str = "Rewrite the following graph facts as one fluent, factual \
sentence. Do not add information.";

/// Deterministic template per node: each incident edge as
/// `"<src> <relation> <dst>."`, ordered by neighbour label; an isolated node
/// is just `"<label>."`.
pub fn linearize_template(sg: &Subgraph) -> Vec<NodeText> {
    let labels: BTreeMap<&str, &str> = sg
        .nodes
        .iter()
        .map(|n| (n.node_id.as_str(), n.label.as_str()))
        .collect();
    sg.nodes
        .iter()
        .map(|n| {
            let mut facts: Vec<(&str, &str, String, &Edge)> = sg
                .edges
                .iter()
                .filter_map(|e| {
                    let (src, dst) = (labels.get(e.src.as_str())?, labels.get(e.dst.as_str())?);
                    if e.src == n.node_id {
                        Some((*dst, e.relation.as_str(), format!("{src} {} {dst}.", e.relation), e))
                    } else if e.dst == n.node_id {
                        Some((*src, e.relation.as_str(), format!("{src} {} {dst}.", e.relation), e))
                    } else {
                        None
                    }
                })
                .collect();
            facts.sort_by(|a, b| (a.0, a.1, &a.2).cmp(&(b.0, b.1, &b.2)));
            let mut provenance = n.provenance.clone();
            let text = if facts.is_empty() {
                format!("{}.", n.label)
            } else {
                for f in &facts {
                    provenance.extend(f.3.provenance.iter().cloned());
                }
                facts.iter().map(|f| f.2.as_str()).collect::<Vec<_>>().join(" ")
            };
            NodeText {
                node_id: n.node_id.clone(),
                text,
                provenance,
            }
        })
        .collect()
}

pub fn linearize(sg: &Subgraph, gateway: &dyn Gateway) -> Result<Vec<NodeText>, GraphError> {
    let mut texts = linearize_template(sg);
    if gateway.kind() == BackendKind::Mock {
        return Ok(texts);
    }
    for t in &mut texts {
        let raw = gateway.complete(
            &CompletionRequest::new(LINEARIZE_SYSTEM, t.text.clone()).with_max_tokens(160),
        )?;
        let fluent = raw.trim();
        if !fluent.is_empty() {
            t.text = fluent.to_string();
        }
    }
    Ok(texts)
}
