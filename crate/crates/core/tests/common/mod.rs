//! Helpers shared by the integration tests: fixture loading and
//! brute-force reference implementations.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use hybridrag::augment::{AcronymTable, AliasStore, Augmenter, RawQuery};
use hybridrag::gateway::{EmbeddingVector, Gateway, MockGateway};
use hybridrag::graph_store::{GraphStore, NodeText, Triple};
use hybridrag::ingest::{ChunkingConfig, Stores};
use hybridrag::pipeline::{Pipeline, PipelineConfig, StoreFactLookup};
use hybridrag::router::{
    classify_request, route, MockRemoteArticles, MockWebSearch, RouteOutcome, CLASSIFY_SYSTEM,
};
use hybridrag::unify::{EvidenceCandidate, UnifyConfig};
use hybridrag::vector_index::{Origin, VectorIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;

pub const CURRENT_YEAR: i32 = 2025;

/// Questions with a frozen expected answer under the mock gateway.
pub const CANNED_QUESTIONS: [&str; 5] = [
    "Where was Einstein born?",
    "Who was Mme Curie?",
    "How does reinforcement learning apply to robotics?",
    "Who was Isaac Newton?",
    "What are the latest breakthroughs in AI?",
];

pub fn canned_pipeline(parallel: bool) -> Pipeline {
    let cfg = PipelineConfig {
        trace: true,
        parallel,
        ..PipelineConfig::default()
    };
    pipeline(&["corpus3.jsonl", "rl_corpus.jsonl"], cfg)
}

/// Canonical JSON of every canned answer, as one JSON array.
pub fn canned_answers_json(p: &Pipeline) -> String {
    let answers: Vec<serde_json::Value> = CANNED_QUESTIONS
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let a = p.answer(&RawQuery::new(format!("q{}", i + 1), *q).unwrap()).unwrap();
            serde_json::from_str(&a.canonical_json()).unwrap()
        })
        .collect();
    serde_json::to_string_pretty(&answers).unwrap() + "\n"
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn aliases() -> AliasStore {
    AliasStore::load(&fixture("aliases.tsv")).expect("alias fixture")
}

pub fn acronyms() -> AcronymTable {
    AcronymTable::load(&fixture("acronyms.tsv")).expect("acronym fixture")
}

pub fn augmenter() -> Augmenter {
    Augmenter::new(aliases(), acronyms(), CURRENT_YEAR)
}

pub fn remote_articles() -> MockRemoteArticles {
    MockRemoteArticles::load(&fixture("remote_articles.jsonl")).expect("remote fixture")
}

pub fn stores_from(corpus: &str, gw: &dyn Gateway) -> Stores {
    let mut s = Stores::new(gw.embed_dim());
    let report = s
        .ingest_corpus(&fixture(corpus), ChunkingConfig::default(), &aliases(), gw)
        .expect("ingest fixture corpus");
    assert!(report.skipped.is_empty());
    s
}

pub fn pipeline(corpora: &[&str], cfg: PipelineConfig) -> Pipeline {
    let gw: Arc<dyn Gateway> = Arc::new(MockGateway::default());
    let mut stores = Stores::new(gw.embed_dim());
    for c in corpora {
        stores
            .ingest_corpus(&fixture(c), ChunkingConfig::default(), &aliases(), gw.as_ref())
            .expect("ingest fixture corpus");
    }
    Pipeline::new(cfg, augmenter(), gw, Arc::new(MockWebSearch::new()), stores)
        .expect("pipeline")
        .with_remote(Arc::new(remote_articles()))
}

// ---------------------------------------------------------------------------
// Routing cases

#[derive(Debug, Clone, Deserialize)]
pub struct RoutingCase {
    pub id: String,
    pub query: String,
    /// Classifier reply served by the mock gateway, when the model is asked.
    pub llm: Option<String>,
    pub label: String,
    pub source: String,
    pub decided_by: String,
    pub reason: Option<String>,
}

pub fn routing_cases() -> Vec<RoutingCase> {
    std::fs::read_to_string(fixture("routing_cases.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Route one case against the three-document corpus plus the remote
/// article fixture. Returns the outcome or a description of the failure.
pub fn run_routing_case(case: &RoutingCase, stores: &Stores) -> Result<RouteOutcome, String> {
    let aug = augmenter();
    let mut gw = MockGateway::default();
    let aq = aug
        .augment(&RawQuery::new(&case.id, &case.query).unwrap(), &gw)
        .map_err(|e| e.to_string())?;
    if let Some(label) = &case.llm {
        let req = classify_request(&aq);
        assert_eq!(req.system_prompt, CLASSIFY_SYSTEM);
        gw.insert_fixture(&req.system_prompt, &req.user_prompt, label.clone());
    }
    let remote = remote_articles();
    let facts = StoreFactLookup {
        stores,
        aliases: &aug.aliases,
        remote: Some(&remote),
    };
    route(&aq, &facts, &gw).map_err(|e| e.to_string())
}

pub fn check_routing_case(case: &RoutingCase, out: &RouteOutcome) -> Result<(), String> {
    let d = &out.decision;
    let got = (
        serde_json::to_value(d.label).unwrap(),
        serde_json::to_value(d.source).unwrap(),
        serde_json::to_value(d.decided_by).unwrap(),
    );
    let want = (
        serde_json::Value::from(case.label.clone()),
        serde_json::Value::from(case.source.clone()),
        serde_json::Value::from(case.decided_by.clone()),
    );
    if got != want {
        return Err(format!("{}: got {got:?}, want {want:?} ({})", case.id, d.reason));
    }
    if let Some(r) = &case.reason {
        if &d.reason != r {
            return Err(format!("{}: reason {:?}, want {r:?}", case.id, d.reason));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reference implementations

pub fn oracle_dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Full sort of every entry: score descending, id ascending.
pub fn oracle_search(index: &VectorIndex, qv: &EmbeddingVector, k: usize) -> Vec<String> {
    let mut all: Vec<(f64, String)> = index
        .entries()
        .map(|(id, v)| (oracle_dot(qv.values(), v.values()), id.to_string()))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

fn oracle_normalize(text: &str) -> String {
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    let mut s = words.join(" ");
    while s.ends_with(|c: char| c.is_ascii_punctuation()) {
        s.pop();
        while s.ends_with(' ') {
            s.pop();
        }
    }
    s
}

/// Embed graph texts, merge, sort, cap 2k, dedup, cap k. Returns
/// `(text, origin, score)` triples.
pub fn oracle_unify(
    qv: &EmbeddingVector,
    vector_hits: &[EvidenceCandidate],
    graph_texts: &[NodeText],
    k: usize,
    sim_threshold: f64,
    gw: &dyn Gateway,
) -> Vec<(String, Origin, f64)> {
    let mut pool: Vec<(String, Origin, Vec<f32>)> = vector_hits
        .iter()
        .map(|c| (c.text.clone(), c.origin, c.vector.values().to_vec()))
        .collect();
    for t in graph_texts {
        let v = gw.embed_one(&t.text).unwrap();
        pool.push((t.text.clone(), Origin::Graph, v.values().to_vec()));
    }
    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .map(|(i, c)| (oracle_dot(qv.values(), &c.2), i))
        .collect();
    scored.sort_by(|a, b| {
        let (ca, cb) = (&pool[a.1], &pool[b.1]);
        let origin_rank = |o: Origin| if o == Origin::Vector { 0 } else { 1 };
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(origin_rank(ca.1).cmp(&origin_rank(cb.1)))
            .then_with(|| ca.0.cmp(&cb.0))
    });
    scored.truncate(2 * k);

    let mut seen = HashSet::new();
    let mut kept: Vec<(f64, usize)> = Vec::new();
    for (s, i) in scored {
        if !seen.insert(oracle_normalize(&pool[i].0)) {
            continue;
        }
        if kept.iter().any(|&(_, j)| oracle_dot(&pool[i].2, &pool[j].2) >= sim_threshold) {
            continue;
        }
        kept.push((s, i));
    }
    kept.truncate(k);
    kept.into_iter()
        .map(|(s, i)| (pool[i].0.clone(), pool[i].1, s))
        .collect()
}

// ---------------------------------------------------------------------------
// Query augmentation contracts

pub fn queries_100() -> Vec<String> {
    std::fs::read_to_string(fixture("queries_100.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

pub const CHURCHILL_SURFACES: [&str; 4] =
    ["Churchill", "Sir Winston", "Winston Churchill", "Sir Winston Churchill"];

/// Token budget and verbatim canonicals.
pub fn check_augment_contracts(aq: &hybridrag::AugmentedQuery) -> Result<(), String> {
    let n = aq.text.split_whitespace().count();
    if n > 40 {
        return Err(format!("{}: {n} tokens in {:?}", aq.original.id, aq.text));
    }
    for e in &aq.entities {
        if !aq.text.contains(&e.canonical) {
            return Err(format!(
                "{}: canonical {:?} missing from {:?}",
                aq.original.id, e.canonical, aq.text
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metric fixtures, worked out by hand. Tokens are lowercased with
// punctuation removed.

pub struct MetricCase {
    pub candidate: &'static str,
    pub references: &'static [&'static str],
    pub bleu1: f64,
    pub rouge1: f64,
}

pub fn metric_cases() -> Vec<MetricCase> {
    vec![
        // clipped 5 of 6, equal lengths
        MetricCase {
            candidate: "the cat sat on the mat",
            references: &["the cat is on the mat"],
            bleu1: 5.0 / 6.0,
            rouge1: 5.0 / 6.0,
        },
        // "the" clipped to 1 of 4; candidate longer so no penalty
        MetricCase {
            candidate: "the the the the",
            references: &["the cat"],
            bleu1: 1.0 / 4.0,
            rouge1: 1.0 / 2.0,
        },
        // c=1, r=6: bp = e^(1-6)
        MetricCase {
            candidate: "Paris",
            references: &["Paris is the capital of France"],
            bleu1: (-5.0f64).exp(),
            rouge1: 1.0 / 6.0,
        },
        MetricCase {
            candidate: "Hello, World!",
            references: &["hello world"],
            bleu1: 1.0,
            rouge1: 1.0,
        },
        // closest reference length is 2; best ROUGE reference is the first
        MetricCase {
            candidate: "a b c",
            references: &["a b", "a b c d e"],
            bleu1: 1.0,
            rouge1: 1.0,
        },
        // lengths 3 and 5 tie at distance 1 from c=4; shorter wins so bp = 1
        MetricCase {
            candidate: "x y z w",
            references: &["x y z", "x y z w v"],
            bleu1: 1.0,
            rouge1: 1.0,
        },
        MetricCase {
            candidate: "one two three",
            references: &["four five six"],
            bleu1: 0.0,
            rouge1: 0.0,
        },
        // c=3, r=4: bp = e^(1-4/3); ROUGE overlap apple 2 + banana 1 of 4
        MetricCase {
            candidate: "apple banana apple",
            references: &["apple apple apple banana"],
            bleu1: (-1.0f64 / 3.0).exp(),
            rouge1: 3.0 / 4.0,
        },
        // apostrophe dropped: "its"
        MetricCase {
            candidate: "It's 42 degrees",
            references: &["its 42 degrees today"],
            bleu1: (-1.0f64 / 3.0).exp(),
            rouge1: 3.0 / 4.0,
        },
        // "the" clip count comes from the second reference
        MetricCase {
            candidate: "the the cat",
            references: &["the cat", "the the dog"],
            bleu1: 1.0,
            rouge1: 1.0,
        },
    ]
}

// ---------------------------------------------------------------------------
// Random instances


pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> EmbeddingVector {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Some(v) = EmbeddingVector::normalized(&raw) {
            return v;
        }
    }
}

/// `n` random unit vectors with ids `c00000..`; every 50th vector repeats
/// an earlier one so score ties occur.
pub fn random_index<R: Rng>(rng: &mut R, n: usize, dim: usize) -> VectorIndex {
    let mut idx = VectorIndex::new(dim);
    let mut kept: Vec<EmbeddingVector> = Vec::new();
    for i in 0..n {
        let v = if i > 0 && i % 50 == 0 {
            kept[rng.gen_range(0..kept.len())].clone()
        } else {
            random_unit(rng, dim)
        };
        idx.upsert(&format!("c{i:05}"), v.clone()).unwrap();
        kept.push(v);
    }
    idx
}

const VOCAB: [&str; 24] = [
    "graph", "vector", "einstein", "ulm", "physics", "born", "nobel", "prize", "curie", "radium",
    "warsaw", "robot", "policy", "reward", "learning", "theory", "paper", "light", "energy",
    "mass", "quantum", "field", "atom", "wave",
];

fn random_sentence<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(1..8);
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Variant of `text` that is an exact duplicate after normalization.
fn restyle<R: Rng>(rng: &mut R, text: &str) -> String {
    let mut s = if rng.gen_bool(0.5) { text.to_uppercase() } else { format!("  {text} ") };
    if rng.gen_bool(0.5) {
        s.push('.');
    }
    s
}

pub struct UnifyInstance {
    pub qv: EmbeddingVector,
    pub vector_hits: Vec<EvidenceCandidate>,
    pub graph_texts: Vec<NodeText>,
    pub cfg: UnifyConfig,
}

/// Up to 200 candidates mixing hashed-text vectors (collisions, restyled
/// copies, reordered words) and dense random vectors.
pub fn random_unify_instance<R: Rng>(rng: &mut R, gw: &MockGateway) -> UnifyInstance {
    let dim = gw.embed_dim();
    let qv = gw.embed_one(&random_sentence(rng)).unwrap();
    let total = rng.gen_range(0..=200);
    let n_graph = rng.gen_range(0..=total);
    let mut texts: Vec<String> = Vec::new();
    let mut vector_hits = Vec::new();
    for i in 0..total - n_graph {
        let text = if !texts.is_empty() && rng.gen_bool(0.2) {
            let prev = texts.choose(rng).unwrap().clone();
            if rng.gen_bool(0.5) {
                restyle(rng, &prev)
            } else {
                let mut w: Vec<&str> = prev.split_whitespace().collect();
                w.reverse();
                w.join(" ")
            }
        } else {
            random_sentence(rng)
        };
        let v = if rng.gen_bool(0.15) {
            random_unit(rng, dim)
        } else {
            gw.embed_one(&text).unwrap()
        };
        texts.push(text.clone());
        vector_hits.push(
            EvidenceCandidate::new(text, v, Origin::Vector).with_provenance([format!("v{i}")]),
        );
    }
    let mut graph_texts = Vec::new();
    for i in 0..n_graph {
        let text = if !texts.is_empty() && rng.gen_bool(0.25) {
            let prev = texts.choose(rng).unwrap().clone();
            restyle(rng, &prev)
        } else {
            random_sentence(rng)
        };
        texts.push(text.clone());
        graph_texts.push(NodeText {
            node_id: format!("n{i}"),
            text,
            provenance: [format!("g{i}")].into_iter().collect(),
        });
    }
    let cfg = UnifyConfig {
        k: rng.gen_range(1..=25),
        sim_threshold: *[0.95, 0.9, 0.7, 1.0].choose(rng).unwrap(),
        llm_dedup: false,
    };
    UnifyInstance { qv, vector_hits, graph_texts, cfg }
}

pub fn random_graph<R: Rng>(rng: &mut R) -> GraphStore {
    let mut g = GraphStore::new();
    let n_chunks = rng.gen_range(1..12);
    for c in 0..n_chunks {
        let triples: Vec<Triple> = (0..rng.gen_range(0..8))
            .map(|_| {
                let s = VOCAB.choose(rng).unwrap();
                let o = VOCAB.choose(rng).unwrap();
                let r = ["born_in", "is_a", "related_to", "works_on"].choose(rng).unwrap();
                Triple::new(&capitalize(s), r, &capitalize(o))
            })
            .collect();
        g.upsert_triples(&format!("d{c}#{c:05}"), &triples);
    }
    g
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}
