//! User-side semantic cache for LLM services.
//!
//! Queries are embedded, compared by cosine similarity against cached
//! queries, and answered locally when a verified duplicate exists. The
//! pieces: an embedding provider abstraction, a trainable linear adapter
//! (with federated averaging across clients), PCA storage compression, an
//! F_beta-tuned decision threshold, context-chain verification for
//! multi-turn conversations, evaluation tooling, and an OpenAI-compatible
//! caching proxy.

pub mod adapter;
pub mod cache;
pub mod compression;
pub mod config;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod federated;
pub mod proxy;
pub mod threshold;

pub use cache::{CacheEngine, CacheEntry, LookupConfig, LookupKind, LookupOutcome};
pub use embedding::{cosine_similarity, embed, EmbeddingProvider, EmbeddingVector, StubProvider};
pub use error::{Error, Result};
pub use threshold::ThresholdProfile;
