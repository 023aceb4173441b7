//! Corpus ingestion: documents are split into overlapping chunks, every
//! chunk is embedded into the vector index and run through triple
//! extraction into the graph store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AliasStore;
use crate::gateway::{Gateway, GatewayError};
use crate::graph_store::{extract_triples, GraphError, GraphStore};
use crate::router::{Article, CorpusFactLookup};
use crate::vector_index::{IndexError, VectorIndex};

pub const DEFAULT_CHUNK_CHARS: usize = 512;
pub const DEFAULT_OVERLAP_CHARS: usize = 64;

pub const VECTORS_FILE: &str = "vectors.bin";
pub const GRAPH_FILE: &str = "graph.jsonl";
pub const DOCS_FILE: &str = "docs.jsonl";
pub const CHUNKS_FILE: &str = "chunks.jsonl";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid chunking config: chunk_chars={chunk_chars}, overlap_chars={overlap_chars}")]
    InvalidConfig {
        chunk_chars: usize,
        overlap_chars: usize,
    },
    #[error("document {0:?} has an empty body")]
    EmptyDocument(String),
    #[error("corpus {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corpus parse error at line {line}: {message}")]
    CorpusParse { line: usize, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocSource {
    CorpusFile,
    RemoteFetch,
    WebSnippet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub source: DocSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    /// Offsets in chars (Unicode scalar values) into the document body.
    pub char_start: usize,
    pub char_end: usize,
    pub seq: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub chunk_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            chunk_chars: DEFAULT_CHUNK_CHARS,
            overlap_chars: DEFAULT_OVERLAP_CHARS,
        }
    }
}

pub fn chunk_id(doc_id: &str, seq: usize) -> String {
    format!("{doc_id}#{seq:05}")
}

/// Sliding windows of `chunk_chars` chars overlapping by `overlap_chars`.
/// A window that would end mid-text is pulled back so it ends just after
/// the last whitespace char, provided it still advances past the overlap.
pub fn split(doc: &Document, chunk_chars: usize, overlap_chars: usize) -> Result<Vec<Chunk>, IngestError> {
    if chunk_chars == 0 || overlap_chars >= chunk_chars {
        return Err(IngestError::InvalidConfig {
            chunk_chars,
            overlap_chars,
        });
    }
    if doc.body.is_empty() {
        return Err(IngestError::EmptyDocument(doc.doc_id.clone()));
    }
    let chars: Vec<char> = doc.body.chars().collect();
    let byte_at: Vec<usize> = doc
        .body
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(doc.body.len()))
        .collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = if n - start <= chunk_chars {
            n
        } else {
            let hard = start + chunk_chars;
            (start + overlap_chars + 1..=hard)
                .rev()
                .find(|&j| chars[j - 1].is_whitespace())
                .unwrap_or(hard)
        };
        let seq = out.len();
        out.push(Chunk {
            chunk_id: chunk_id(&doc.doc_id, seq),
            doc_id: doc.doc_id.clone(),
            text: doc.body[byte_at[start]..byte_at[end]].to_string(),
            char_start: start,
            char_end: end,
            seq,
        });
        if end == n {
            return Ok(out);
        }
        start = end - overlap_chars;
    }
}

/// Rebuild the body from ordered chunks by dropping each chunk's overlap
/// with its predecessor.
pub fn reassemble(chunks: &[Chunk]) -> String {
    let mut out = String::new();
    let mut covered: usize = 0;
    for c in chunks {
        let skip = covered.saturating_sub(c.char_start);
        out.extend(c.text.chars().skip(skip));
        covered = c.char_end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocRecord {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub source: DocSource,
    pub chunk_ids: Vec<String>,
}

/// Everything retrieval reads: chunk texts, their vectors and the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Stores {
    pub docs: BTreeMap<String, DocRecord>,
    pub chunks: BTreeMap<String, Chunk>,
    pub vectors: VectorIndex,
    pub graph: GraphStore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedDoc {
    pub line: usize,
    pub doc_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub docs: usize,
    pub chunks: usize,
    pub nodes: usize,
    pub edges: usize,
    pub self_loops_rejected: usize,
    pub skipped: Vec<SkippedDoc>,
}

impl Stores {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            docs: BTreeMap::new(),
            chunks: BTreeMap::new(),
            vectors: VectorIndex::new(embed_dim),
            graph: GraphStore::new(),
        }
    }

    pub fn remove_doc(&mut self, doc_id: &str) {
        let Some(rec) = self.docs.remove(doc_id) else {
            return;
        };
        let ids: BTreeSet<String> = rec.chunk_ids.into_iter().collect();
        for id in &ids {
            self.chunks.remove(id);
            self.vectors.remove(id);
        }
        self.graph.remove_chunks(&ids);
    }

    /// Index one document, replacing any previous version with the same id.
    pub fn ingest_document(
        &mut self,
        doc: &Document,
        chunking: ChunkingConfig,
        aliases: &AliasStore,
        gateway: &dyn Gateway,
    ) -> Result<(usize, usize), IngestError> {
        let chunks = split(doc, chunking.chunk_chars, chunking.overlap_chars)?;
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        // Chunks that are pure whitespace carry nothing to embed.
        let embeddable: Vec<usize> = (0..texts.len()).filter(|&i| !texts[i].trim().is_empty()).collect();
        let batch: Vec<String> = embeddable.iter().map(|&i| texts[i].clone()).collect();
        let vectors = gateway.embed(&batch)?;
        let mut triples = Vec::with_capacity(chunks.len());
        for c in &chunks {
            triples.push(extract_triples(c, aliases, gateway)?);
        }

        self.remove_doc(&doc.doc_id);
        for (&i, v) in embeddable.iter().zip(vectors) {
            self.vectors.upsert(&chunks[i].chunk_id, v)?;
        }
        let mut self_loops = 0;
        for (c, ts) in chunks.iter().zip(&triples) {
            self_loops += self.graph.upsert_triples(&c.chunk_id, ts).self_loops_rejected;
        }
        self.docs.insert(
            doc.doc_id.clone(),
            DocRecord {
                doc_id: doc.doc_id.clone(),
                title: doc.title.clone(),
                body: doc.body.clone(),
                source: doc.source,
                chunk_ids: chunks.iter().map(|c| c.chunk_id.clone()).collect(),
            },
        );
        let n = chunks.len();
        for c in chunks {
            self.chunks.insert(c.chunk_id.clone(), c);
        }
        Ok((n, self_loops))
    }

    pub fn ingest_documents(
        &mut self,
        docs: &[Document],
        chunking: ChunkingConfig,
        aliases: &AliasStore,
        gateway: &dyn Gateway,
    ) -> Result<IngestReport, IngestError> {
        let mut report = IngestReport::default();
        for d in docs {
            let (chunks, loops) = self.ingest_document(d, chunking, aliases, gateway)?;
            report.docs += 1;
            report.chunks += chunks;
            report.self_loops_rejected += loops;
        }
        report.nodes = self.graph.node_count();
        report.edges = self.graph.edge_count();
        Ok(report)
    }

    /// Read a corpus JSONL file (`{doc_id, title, text}` per line) and index
    /// every well-formed document. Malformed lines are skipped and listed.
    pub fn ingest_corpus(
        &mut self,
        path: &Path,
        chunking: ChunkingConfig,
        aliases: &AliasStore,
        gateway: &dyn Gateway,
    ) -> Result<IngestReport, IngestError> {
        if chunking.chunk_chars == 0 || chunking.overlap_chars >= chunking.chunk_chars {
            return Err(IngestError::InvalidConfig {
                chunk_chars: chunking.chunk_chars,
                overlap_chars: chunking.overlap_chars,
            });
        }
        let (docs, skipped) = read_corpus(path)?;
        let mut report = self.ingest_documents(&docs, chunking, aliases, gateway)?;
        report.skipped = skipped;
        Ok(report)
    }

    pub fn fact_lookup(&self) -> CorpusFactLookup {
        CorpusFactLookup::new(self.docs.values().map(|d| Article {
            title: d.title.clone(),
            text: d.body.clone(),
        }))
    }

    /// Title + alias table lookup, with alias-store surfaces that resolve to
    /// a document title registered as title aliases.
    pub fn fact_lookup_with_aliases(&self, aliases: &AliasStore) -> CorpusFactLookup {
        let mut lookup = self.fact_lookup();
        for d in self.docs.values() {
            if let Some(c) = aliases.canonicalize(&d.title) {
                if !c.eq_ignore_ascii_case(&d.title) {
                    lookup = lookup.with_title_alias(c, &d.title);
                }
            }
        }
        lookup
    }

    pub fn save(&self, dir: &Path) -> Result<(), IngestError> {
        fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
        self.vectors.save(&dir.join(VECTORS_FILE))?;
        self.graph.save(&dir.join(GRAPH_FILE))?;
        write_jsonl(&dir.join(DOCS_FILE), self.docs.values())?;
        write_jsonl(&dir.join(CHUNKS_FILE), self.chunks.values())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, IngestError> {
        let vectors = VectorIndex::load(&dir.join(VECTORS_FILE))?;
        let graph = GraphStore::load(&dir.join(GRAPH_FILE))?;
        let docs: Vec<DocRecord> = read_jsonl(&dir.join(DOCS_FILE))?;
        let chunks: Vec<Chunk> = read_jsonl(&dir.join(CHUNKS_FILE))?;
        Ok(Self {
            docs: docs.into_iter().map(|d| (d.doc_id.clone(), d)).collect(),
            chunks: chunks.into_iter().map(|c| (c.chunk_id.clone(), c)).collect(),
            vectors,
            graph,
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl Iterator<Item = &'a T>,
) -> Result<(), IngestError> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("serializable record"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| io_err(path, source))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, IngestError> {
    let raw = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IngestError::CorpusParse {
                line: i + 1,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct CorpusLine {
    doc_id: serde_json::Value,
    #[serde(default)]
    title: String,
    text: String,
}

/// Parse a corpus file. Returns documents in file order plus the lines
/// that were skipped.
pub fn read_corpus(path: &Path) -> Result<(Vec<Document>, Vec<SkippedDoc>), IngestError> {
    let raw = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    let mut docs = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<CorpusLine, _> = serde_json::from_str(line);
        let rec = match parsed {
            Ok(r) => r,
            Err(e) => {
                let doc_id = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("doc_id").map(json_id));
                skipped.push(SkippedDoc {
                    line: i + 1,
                    doc_id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let doc_id = json_id(&rec.doc_id);
        if doc_id.is_empty() || rec.text.trim().is_empty() {
            skipped.push(SkippedDoc {
                line: i + 1,
                doc_id: Some(doc_id),
                reason: "empty doc_id or text".into(),
            });
            continue;
        }
        docs.push(Document {
            doc_id,
            title: rec.title,
            body: rec.text,
            source: DocSource::CorpusFile,
        });
    }
    Ok((docs, skipped))
}

fn json_id(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Stores behind an atomically swappable pointer: readers take a snapshot,
/// writers build a new `Stores` and swap it in.
#[derive(Debug)]
pub struct SharedStores {
    inner: RwLock<Arc<Stores>>,
}

impl SharedStores {
    pub fn new(stores: Stores) -> Self {
        Self {
            inner: RwLock::new(Arc::new(stores)),
        }
    }

    pub fn snapshot(&self) -> Arc<Stores> {
        self.inner.read().expect("stores lock poisoned").clone()
    }

    pub fn swap(&self, next: Stores) -> Arc<Stores> {
        std::mem::replace(
            &mut *self.inner.write().expect("stores lock poisoned"),
            Arc::new(next),
        )
    }

    /// Clone the current stores, apply `f`, and publish the result.
    pub fn update<F, T, E>(&self, f: F) -> Result<T, E>
    where
        F: FnOnce(&mut Stores) -> Result<T, E>,
    {
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        self.swap(next);
        Ok(out)
    }
}

/// Paths of the files a saved store directory contains.
pub fn store_files(dir: &Path) -> Vec<PathBuf> {
    [VECTORS_FILE, GRAPH_FILE, DOCS_FILE, CHUNKS_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}
