//! Semantic lookup with context-chain verification, cache population,
//! feedback recording, and persistent storage.
//!
//! Candidate search is an exact linear scan over all entries; PCA keeps the
//! per-entry comparison cheap. Context chains are stored as parent links and
//! ancestors materialize by walking parents.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::adapter::{apply_adapter, AdapterModel, LabeledPair};
use crate::compression::{project, PcaModel};
use crate::embedding::{embed, similarity_or_zero, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::threshold::{tune, ThresholdProfile};

pub const CACHE_MAGIC: &[u8; 4] = b"MCCH";
pub const CACHE_VERSION: u16 = 1;
const FLAG_PCA_PRESENT: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub id: u64,
    pub query_text: String,
    /// Empty for context-only entries materialized to complete a chain.
    pub response_text: String,
    pub embedding: EmbeddingVector,
    /// 0 encodes "no parent".
    pub parent_id: u64,
    pub created_at: u64,
}

impl CacheEntry {
    /// Context-only entries complete a chain but are never served as hits.
    pub fn is_context_only(&self) -> bool {
        self.response_text.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookupConfig {
    pub tau: f64,
    pub top_k: usize,
    /// Chain depth compared during context verification; None is unlimited.
    pub context_depth: Option<usize>,
    /// Context-chain verification toggle; disabling reproduces the false
    /// hits of a context-blind cache.
    pub verify_context: bool,
}

impl Default for LookupConfig {
    fn default() -> Self {
        Self { tau: 0.83, top_k: 5, context_depth: None, verify_context: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupKind {
    Hit,
    Miss,
}

#[derive(Debug, Clone)]
pub struct LookupOutcome {
    pub kind: LookupKind,
    pub entry: Option<CacheEntry>,
    pub similarity: Option<f64>,
    pub candidates_examined: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Judgment {
    Accepted,
    Rejected,
}

/// One feedback event: the served query against the cached query it matched,
/// with the similarity the lookup saw. Feeds the threshold retune.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub pair: LabeledPair,
    pub similarity: f64,
}

pub struct CacheEngine {
    provider: Arc<dyn EmbeddingProvider>,
    adapter: Option<AdapterModel>,
    pca: Option<PcaModel>,
    threshold: ThresholdProfile,
    entries: Vec<CacheEntry>,
    next_id: u64,
    capacity: Option<usize>,
    feedback: Vec<FeedbackRecord>,
    /// entry id -> (query served, similarity) of the most recent lookup that
    /// returned it; consulted by record_feedback.
    last_served: HashMap<u64, (String, f64)>,
}

impl CacheEngine {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            adapter: None,
            pca: None,
            threshold: ThresholdProfile::default(),
            entries: Vec::new(),
            next_id: 1,
            capacity: None,
            feedback: Vec::new(),
            last_served: HashMap::new(),
        }
    }

    pub fn with_adapter(mut self, adapter: AdapterModel) -> Self {
        self.adapter = Some(adapter);
        self
    }

    pub fn with_pca(mut self, pca: PcaModel) -> Self {
        self.pca = Some(pca);
        self
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = Some(capacity);
        self
    }

    pub fn with_threshold(mut self, threshold: ThresholdProfile) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn threshold(&self) -> &ThresholdProfile {
        &self.threshold
    }

    pub fn set_threshold(&mut self, threshold: ThresholdProfile) {
        self.threshold = threshold;
    }

    pub fn pca(&self) -> Option<&PcaModel> {
        self.pca.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn feedback_log(&self) -> &[FeedbackRecord] {
        &self.feedback
    }

    /// Dimension of stored embeddings: PCA output when enabled, otherwise
    /// the adapter/provider output.
    pub fn stored_dim(&self) -> usize {
        if let Some(pca) = &self.pca {
            pca.k()
        } else if let Some(adapter) = &self.adapter {
            adapter.out_dim()
        } else {
            self.provider.descriptor().output_dim
        }
    }

    /// A lookup config seeded with the engine's tuned threshold.
    pub fn default_lookup_config(&self) -> LookupConfig {
        LookupConfig { tau: self.threshold.tau, ..LookupConfig::default() }
    }

    /// Full embedding pipeline: provider, then adapter, then PCA.
    pub fn embed_query(&self, text: &str) -> Result<EmbeddingVector> {
        let mut e = embed(self.provider.as_ref(), text)?;
        if let Some(adapter) = &self.adapter {
            e = apply_adapter(adapter, &e)?;
        }
        if let Some(pca) = &self.pca {
            e = project(pca, &e)?;
        }
        Ok(e)
    }

    fn entry_index(&self, id: u64) -> Option<usize> {
        // ids are monotonic and entries stay ordered, so binary search works
        // even after evictions
        self.entries.binary_search_by_key(&id, |e| e.id).ok()
    }

    pub fn entry(&self, id: u64) -> Option<&CacheEntry> {
        self.entry_index(id).map(|i| &self.entries[i])
    }

    /// Ancestor embeddings of `id`, newest first, excluding the entry itself.
    fn chain_embeddings(&self, id: u64) -> Vec<&EmbeddingVector> {
        let mut chain = Vec::new();
        let mut cursor = self.entry(id).map(|e| e.parent_id).unwrap_or(0);
        while cursor != 0 {
            match self.entry(cursor) {
                Some(parent) => {
                    chain.push(&parent.embedding);
                    cursor = parent.parent_id;
                }
                None => break, // parent evicted; treat chain as ending here
            }
        }
        chain
    }

    /// Semantic lookup. Embeds the query, scans all entries for candidates
    /// with similarity >= tau, and returns the best candidate whose context
    /// chain matches the conversation history. Never mutates cache entries.
    pub fn lookup(
        &mut self,
        query: &str,
        history: &[String],
        cfg: &LookupConfig,
    ) -> Result<LookupOutcome> {
        if query.trim().is_empty() {
            return Err(Error::EmptyQuery);
        }
        let query_embedding = self.embed_query(query)?;

        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for (idx, entry) in self.entries.iter().enumerate() {
            if entry.is_context_only() {
                continue;
            }
            let sim = similarity_or_zero(&query_embedding, &entry.embedding)?;
            if sim >= cfg.tau {
                candidates.push((sim, idx));
            }
        }
        // highest similarity first; equal similarity breaks toward lowest id
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(self.entries[a.1].id.cmp(&self.entries[b.1].id)));
        candidates.truncate(cfg.top_k);

        let history_embeddings: Vec<EmbeddingVector> = if cfg.verify_context
            && !candidates.is_empty()
        {
            history
                .iter()
                .rev() // newest first
                .map(|turn| self.embed_query(turn))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let mut examined = 0;
        for (sim, idx) in &candidates {
            examined += 1;
            let entry = &self.entries[*idx];
            if cfg.verify_context {
                let chain = self.chain_embeddings(entry.id);
                let history_refs: Vec<&EmbeddingVector> = history_embeddings.iter().collect();
                if !match_context(&chain, &history_refs, cfg.tau, cfg.context_depth) {
                    continue;
                }
            }
            debug_assert!(*sim >= cfg.tau);
            let entry = entry.clone();
            self.last_served.insert(entry.id, (query.to_string(), *sim));
            return Ok(LookupOutcome {
                kind: LookupKind::Hit,
                entry: Some(entry),
                similarity: Some(*sim),
                candidates_examined: examined,
            });
        }

        Ok(LookupOutcome {
            kind: LookupKind::Miss,
            entry: None,
            similarity: None,
            candidates_examined: examined,
        })
    }

    /// Insert a query/response with its conversation history. History turns
    /// not already cached are materialized as context-only entries so the
    /// stored chain is always complete. Returns the new entry id.
    pub fn insert(
        &mut self,
        query: &str,
        response: &str,
        history: &[String],
        precomputed_embedding: Option<EmbeddingVector>,
    ) -> Result<u64> {
        if query.trim().is_empty() {
            return Err(Error::EmptyQuery);
        }
        if response.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let embedding = match precomputed_embedding {
            Some(e) => {
                if e.dim() != self.stored_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.stored_dim(),
                        got: e.dim(),
                    });
                }
                e
            }
            None => self.embed_query(query)?,
        };

        // walk the history oldest-first, reusing entries whose text and
        // parent line up, creating context-only entries otherwise
        let mut chain_parent = 0u64;
        for turn in history {
            let existing = self
                .entries
                .iter()
                .find(|e| e.parent_id == chain_parent && e.query_text == *turn)
                .map(|e| e.id);
            chain_parent = match existing {
                Some(id) => id,
                None => {
                    let turn_embedding = self.embed_query(turn)?;
                    self.push_entry(turn.to_string(), String::new(), turn_embedding, chain_parent)
                }
            };
        }

        let id = self.push_entry(query.to_string(), response.to_string(), embedding, chain_parent);
        self.enforce_capacity();
        Ok(id)
    }

    fn push_entry(
        &mut self,
        query_text: String,
        response_text: String,
        embedding: EmbeddingVector,
        parent_id: u64,
    ) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        self.entries.push(CacheEntry { id, query_text, response_text, embedding, parent_id, created_at });
        id
    }

    fn enforce_capacity(&mut self) {
        let Some(capacity) = self.capacity else { return };
        while self.entries.len() > capacity {
            let parents: std::collections::HashSet<u64> =
                self.entries.iter().map(|e| e.parent_id).collect();
            // evict the oldest entry that is not some chain's parent
            let victim = self
                .entries
                .iter()
                .position(|e| !parents.contains(&e.id));
            match victim {
                Some(idx) => {
                    let gone = self.entries.remove(idx);
                    self.last_served.remove(&gone.id);
                }
                None => break, // every entry anchors a chain; stop evicting
            }
        }
    }

    /// Shrink to at most `capacity` entries, evicting oldest-first while
    /// keeping entries that anchor context chains. The limit persists.
    pub fn compact(&mut self, capacity: usize) {
        self.capacity = Some(capacity);
        self.enforce_capacity();
    }

    /// Record user feedback on a served hit. Appends a labeled pair to the
    /// feedback log for the next threshold retune.
    pub fn record_feedback(&mut self, entry_id: u64, judgment: Judgment) -> Result<()> {
        let entry = self.entry(entry_id).ok_or(Error::UnknownEntry(entry_id))?;
        let cached_query = entry.query_text.clone();
        let (query_served, similarity) = self
            .last_served
            .get(&entry_id)
            .cloned()
            .ok_or(Error::NoRecentLookup(entry_id))?;
        self.feedback.push(FeedbackRecord {
            pair: LabeledPair {
                q1: query_served,
                q2: cached_query,
                duplicate: judgment == Judgment::Accepted,
            },
            similarity,
        });
        Ok(())
    }

    /// Retune the threshold from the accumulated feedback log, optionally
    /// augmented with extra scored pairs.
    pub fn retune_threshold(&mut self, extra: &[(f64, bool)]) -> Result<ThresholdProfile> {
        let mut scored: Vec<(f64, bool)> = self
            .feedback
            .iter()
            .map(|r| (r.similarity, r.pair.duplicate))
            .collect();
        scored.extend_from_slice(extra);
        let profile = tune(&scored, self.threshold.beta, self.threshold.grid_step)?;
        self.threshold = profile;
        Ok(profile)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        let flags: u16 = if self.pca.is_some() { FLAG_PCA_PRESENT } else { 0 };
        buf.extend_from_slice(&flags.to_le_bytes());
        buf.extend_from_slice(&(self.stored_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        if let Some(pca) = &self.pca {
            pca.write_to(&mut buf)?;
        }
        buf.extend_from_slice(&(self.threshold.tau as f32).to_le_bytes());
        buf.extend_from_slice(&(self.threshold.f_beta_at_tau as f32).to_le_bytes());
        buf.extend_from_slice(&(self.threshold.beta as f32).to_le_bytes());
        for entry in &self.entries {
            buf.extend_from_slice(&entry.id.to_le_bytes());
            buf.extend_from_slice(&entry.parent_id.to_le_bytes());
            buf.extend_from_slice(&entry.created_at.to_le_bytes());
            buf.extend_from_slice(&(entry.query_text.len() as u32).to_le_bytes());
            buf.extend_from_slice(entry.query_text.as_bytes());
            buf.extend_from_slice(&(entry.response_text.len() as u32).to_le_bytes());
            buf.extend_from_slice(entry.response_text.as_bytes());
            for &v in entry.embedding.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, provider: Arc<dyn EmbeddingProvider>) -> Result<Self> {
        let data = fs::read(path)?;
        if data.len() < 4 + 2 + 2 + 4 + 8 + 12 + 4 {
            return Err(Error::CorruptFile("file too short".into()));
        }
        let (body, crc_bytes) = data.split_at(data.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return Err(Error::CorruptFile("checksum mismatch".into()));
        }

        let mut cursor = std::io::Cursor::new(body);
        use std::io::Read;
        let mut magic = [0u8; 4];
        cursor.read_exact(&mut magic).map_err(|_| Error::CorruptFile("truncated header".into()))?;
        if &magic != CACHE_MAGIC {
            return Err(Error::CorruptFile("bad magic".into()));
        }
        let version = read_u16(&mut cursor)?;
        if version != CACHE_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let flags = read_u16(&mut cursor)?;
        let dim = read_u32(&mut cursor)? as usize;
        let count = read_u64(&mut cursor)?;
        let pca = if flags & FLAG_PCA_PRESENT != 0 {
            Some(PcaModel::read_from(&mut cursor)?)
        } else {
            None
        };
        let tau = read_f32(&mut cursor)? as f64;
        let f_beta_at_tau = read_f32(&mut cursor)? as f64;
        let beta = read_f32(&mut cursor)? as f64;

        let mut entries = Vec::with_capacity(count as usize);
        let mut max_id = 0u64;
        for _ in 0..count {
            let id = read_u64(&mut cursor)?;
            let parent_id = read_u64(&mut cursor)?;
            let created_at = read_u64(&mut cursor)?;
            let query_text = read_string(&mut cursor)?;
            let response_text = read_string(&mut cursor)?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(read_f32(&mut cursor)?);
            }
            let embedding = EmbeddingVector::new(values)
                .map_err(|_| Error::CorruptFile("non-finite embedding".into()))?;
            max_id = max_id.max(id);
            entries.push(CacheEntry { id, query_text, response_text, embedding, parent_id, created_at });
        }
        if cursor.position() as usize != body.len() {
            return Err(Error::CorruptFile("trailing bytes".into()));
        }

        Ok(Self {
            provider,
            adapter: None,
            pca,
            threshold: ThresholdProfile {
                tau,
                beta,
                f_beta_at_tau,
                grid_step: crate::threshold::DEFAULT_GRID_STEP,
            },
            entries,
            next_id: max_id + 1,
            capacity: None,
            feedback: Vec::new(),
            last_served: HashMap::new(),
        })
    }
}

/// Context verification: truncate both chains to `depth` (newest first) and
/// require equal length with every aligned pair at similarity >= tau.
///
/// The equal-length rule is what makes a contextual query miss against an
/// entry whose ancestry differs, while standalone queries still match
/// standalone entries.
pub fn match_context(
    cached_chain: &[&EmbeddingVector],
    history: &[&EmbeddingVector],
    tau: f64,
    context_depth: Option<usize>,
) -> bool {
    let depth = context_depth.unwrap_or(usize::MAX);
    let chain = &cached_chain[..cached_chain.len().min(depth)];
    let hist = &history[..history.len().min(depth)];
    if chain.len() != hist.len() {
        return false;
    }
    chain
        .iter()
        .zip(hist)
        .all(|(c, h)| similarity_or_zero(c, h).map(|s| s >= tau).unwrap_or(false))
}

fn read_u16(r: &mut dyn std::io::Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut dyn std::io::Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut dyn std::io::Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut dyn std::io::Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
    Ok(f32::from_le_bytes(b))
}

fn read_string(r: &mut dyn std::io::Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes).map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
    String::from_utf8(bytes).map_err(|_| Error::CorruptFile("invalid UTF-8".into()))
}
