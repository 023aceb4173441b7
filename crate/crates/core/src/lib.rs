//! Hybrid retrieval-augmented QA: query augmentation, routing between a
//! local corpus and web search, vector + knowledge-graph retrieval and
//! evidence unification.

pub mod augment;
pub mod config;
pub mod evalkit;
pub mod gateway;
pub mod graph_store;
pub mod ingest;
pub mod pipeline;
pub mod router;
pub mod text;
pub mod unify;
pub mod vector_index;

pub use augment::{AugmentedQuery, Augmenter, RawQuery};
pub use gateway::{EmbeddingVector, Gateway, GatewayError, MockGateway};
pub use ingest::Stores;
pub use pipeline::{Answer, Pipeline, PipelineConfig, PipelineError};
pub use unify::{EvidenceCandidate, UnifiedContext};
