//! Embedding providers, vector normalization and cosine similarity.
//!
//! Vectors are stored as `f32`; every similarity and norm accumulates in
//! `f64` so results are reproducible across platforms at the tolerances the
//! rest of the crate asserts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed-dimension embedding, unit-norm by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ProviderFailure("non-finite embedding value".into()));
        }
        Ok(Self { values })
    }

    /// The all-zero vector of dimension `dim`. Used only as the flagged
    /// compressed-zero value produced by PCA projection of the mean.
    pub fn zero(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.l2_norm() < 1e-12
    }
}

/// Describes a provider: its name, output dimension, and whether identical
/// input always yields bit-identical output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingProviderDescriptor {
    pub name: String,
    pub output_dim: usize,
    pub deterministic: bool,
}

/// Source of raw embeddings. Implementations are stateless and safe for
/// unrestricted concurrent use.
pub trait EmbeddingProvider: Send + Sync {
    fn descriptor(&self) -> EmbeddingProviderDescriptor;

    /// Embed a raw (already validated non-empty) text. Output need not be
    /// normalized; [`embed`] normalizes.
    fn encode(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Embed `text` with `provider`, returning a normalized vector.
pub fn embed(provider: &dyn EmbeddingProvider, text: &str) -> Result<EmbeddingVector> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let raw = provider.encode(trimmed)?;
    let expected = provider.descriptor().output_dim;
    if raw.dim() != expected {
        return Err(Error::DimensionMismatch { expected, got: raw.dim() });
    }
    normalize(&raw)
}

/// Cosine similarity of two non-zero vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity with the compressed-zero rule: if either operand is the
/// flagged zero vector its similarity to anything is 0.
pub fn similarity_or_zero(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.is_zero() || b.is_zero() {
        return Ok(0.0);
    }
    cosine_similarity(a, b)
}

/// Scale `v` to unit L2 norm. Idempotent: an input already within 1e-6 of
/// unit norm is returned unchanged, bit for bit.
pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = v.l2_norm();
    if norm < 1e-12 {
        return Err(Error::ZeroVector);
    }
    if (norm - 1.0).abs() <= 1e-6 {
        return Ok(v.clone());
    }
    let values = v.values.iter().map(|&x| (x as f64 / norm) as f32).collect();
    Ok(EmbeddingVector { values })
}

/// Synonym groups shared by the stub provider and the workload paraphraser.
/// The first word of each group is the canonical form; the stub provider
/// rewrites every token to its canonical form before hashing, so paraphrases
/// built from the same groups embed identically.
pub const SYNONYM_GROUPS: &[&[&str]] = &[
    &["draw", "sketch", "plot", "render"],
    &["color", "colour", "hue", "shade"],
    &["big", "large", "huge"],
    &["small", "tiny", "little"],
    &["fast", "quick", "rapid"],
    &["slow", "sluggish"],
    &["buy", "purchase", "acquire"],
    &["start", "begin", "commence"],
    &["stop", "halt", "cease"],
    &["help", "assist", "aid"],
    &["image", "picture", "photo"],
    &["make", "create", "build"],
    &["show", "display", "present"],
    &["delete", "remove", "erase"],
    &["sort", "order", "arrange"],
    &["way", "method", "approach"],
    &["increase", "extend", "boost"],
    &["phone", "smartphone", "mobile"],
    &["battery", "power"],
];

fn canonical_token(token: &str) -> &str {
    for group in SYNONYM_GROUPS {
        if group.contains(&token) {
            return group[0];
        }
    }
    token
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic bag-of-tokens provider used for tests and offline runs.
///
/// Lowercases, splits on non-alphanumerics, canonicalizes each token through
/// [`SYNONYM_GROUPS`], hashes it to one of `dim` buckets with a sign taken
/// from the hash's top bit, accumulates counts, and L2-normalizes. Output
/// depends only on the token multiset of the input.
#[derive(Debug, Clone)]
pub struct StubProvider {
    dim: usize,
}

pub const STUB_DEFAULT_DIM: usize = 768;

impl StubProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "stub dimension must be positive");
        Self { dim }
    }

    pub fn tokenize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| canonical_token(t).to_string())
            .collect()
    }
}

impl Default for StubProvider {
    fn default() -> Self {
        Self::new(STUB_DEFAULT_DIM)
    }
}

impl EmbeddingProvider for StubProvider {
    fn descriptor(&self) -> EmbeddingProviderDescriptor {
        EmbeddingProviderDescriptor {
            name: "stub".into(),
            output_dim: self.dim,
            deterministic: true,
        }
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        let mut acc = vec![0.0f64; self.dim];
        for token in Self::tokenize(text) {
            let h = fnv1a(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ProviderFailure(format!(
                "no hashable tokens in query: {text:?}"
            )));
        }
        let values = acc.iter().map(|&v| (v / norm) as f32).collect();
        Ok(EmbeddingVector { values })
    }
}

/// Provider backed by an HTTP embedding service. Posts `{"input": "<text>"}`
/// and expects `{"embedding": [..]}`.
pub struct RemoteProvider {
    url: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl RemoteProvider {
    pub fn new(url: impl Into<String>, dim: usize) -> Self {
        Self {
            url: url.into(),
            dim,
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn descriptor(&self) -> EmbeddingProviderDescriptor {
        EmbeddingProviderDescriptor {
            name: "remote".into(),
            output_dim: self.dim,
            deterministic: false,
        }
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        #[derive(Deserialize)]
        struct Reply {
            embedding: Vec<f32>,
        }
        let reply: Reply = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "input": text }))
            .send()
            .map_err(|e| Error::ProviderFailure(e.to_string()))?
            .error_for_status()
            .map_err(|e| Error::ProviderFailure(e.to_string()))?
            .json()
            .map_err(|e| Error::ProviderFailure(e.to_string()))?;
        EmbeddingVector::new(reply.embedding)
    }
}
