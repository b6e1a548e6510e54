//! Semantic-cache metrics, workload generation, and benchmark orchestration.
//!
//! A semantic cache needs four-way outcome accounting: a hit can return the
//! wrong entry (false hit) and a miss can overlook an existing duplicate
//! (false miss). Plain hit/miss rates hide both failure modes.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheEngine, LookupConfig, LookupKind};
use crate::error::{Error, Result};

/// One classified lookup outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TrueHit,
    FalseHit,
    TrueMiss,
    FalseMiss,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_hit: u64,
    pub false_hit: u64,
    pub true_miss: u64,
    pub false_miss: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_hit + self.false_hit + self.true_miss + self.false_miss
    }

    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::TrueHit => self.true_hit += 1,
            Outcome::FalseHit => self.false_hit += 1,
            Outcome::TrueMiss => self.true_miss += 1,
            Outcome::FalseMiss => self.false_miss += 1,
        }
    }
}

/// Classify a lookup against the labeled truth.
///
/// `returned` is the entry id the cache served (None on miss); `expected` is
/// the id of the labeled duplicate (None when no duplicate exists). A hit
/// returning the wrong entry counts as a false hit.
pub fn classify_outcome(returned: Option<u64>, expected: Option<u64>) -> Outcome {
    match (returned, expected) {
        (Some(got), Some(want)) if got == want => Outcome::TrueHit,
        (Some(_), _) => Outcome::FalseHit,
        (None, None) => Outcome::TrueMiss,
        (None, Some(_)) => Outcome::FalseMiss,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub accuracy: f64,
    pub beta: f64,
}

/// Precision, recall, F_beta and accuracy from confusion counts.
///
/// Precision with zero predicted positives is defined as 0; F_beta is 0 when
/// both precision and recall are 0.
pub fn compute_metrics(c: &ConfusionCounts, beta: f64) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    let (th, fh, tm, fm) = (
        c.true_hit as f64,
        c.false_hit as f64,
        c.true_miss as f64,
        c.false_miss as f64,
    );
    let precision = if th + fh > 0.0 { th / (th + fh) } else { 0.0 };
    let recall = if th + fm > 0.0 { th / (th + fm) } else { 0.0 };
    let f_beta = f_beta_score(precision, recall, beta);
    let accuracy = (th + tm) / total as f64;
    Ok(MetricsReport { precision, recall, f_beta, accuracy, beta })
}

/// Weighted harmonic mean of precision and recall; beta < 1 favors precision.
pub fn f_beta_score(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// Truth label of a workload item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Truth {
    /// No duplicate exists earlier in the stream.
    Unique,
    /// Paraphrase of the item at this stream index (always the first
    /// occurrence of its duplicate group).
    DuplicateOf(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadItem {
    pub query: String,
    pub truth: Truth,
    pub history: Vec<String>,
}

/// Rewrites a query into a paraphrase; seeded by the caller's RNG.
pub type Paraphraser<'a> = &'a dyn Fn(&str, &mut ChaCha8Rng) -> String;

/// Default paraphraser: swaps words for synonyms from the stub provider's
/// groups and shuffles word order. Canonicalization makes the paraphrase
/// embed identically to the original under the stub provider.
pub fn synonym_paraphrase(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = text
        .split_whitespace()
        .map(|w| {
            let lower = w.to_lowercase();
            for group in crate::embedding::SYNONYM_GROUPS {
                if group.contains(&lower.as_str()) {
                    return group[rng.gen_range(0..group.len())].to_string();
                }
            }
            w.to_string()
        })
        .collect();
    words.shuffle(rng);
    words.join(" ")
}

/// Generate a standalone-query stream of `count` items in which the expected
/// fraction of paraphrased repeats is `duplicate_ratio`.
///
/// Unique items consume `base_queries` in order and fall back to synthetic
/// disjoint-token queries once the base list is exhausted. Deterministic for
/// a given seed.
pub fn generate_workload(
    base_queries: &[String],
    count: usize,
    duplicate_ratio: f64,
    paraphraser: Paraphraser,
    seed: u64,
) -> Result<Vec<WorkloadItem>> {
    if base_queries.is_empty() {
        return Err(Error::EmptyBase);
    }
    assert!((0.0..=1.0).contains(&duplicate_ratio));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<WorkloadItem> = Vec::with_capacity(count);
    // stream index -> root index of its duplicate group
    let mut roots: Vec<usize> = Vec::with_capacity(count);
    let mut next_base = 0usize;
    for i in 0..count {
        let make_duplicate = i > 0 && rng.gen_bool(duplicate_ratio);
        if make_duplicate {
            let source = rng.gen_range(0..i);
            let root = roots[source];
            let query = paraphraser(&items[root].query, &mut rng);
            items.push(WorkloadItem { query, truth: Truth::DuplicateOf(root), history: vec![] });
            roots.push(root);
        } else {
            let query = if next_base < base_queries.len() {
                base_queries[next_base].clone()
            } else {
                // disjoint synthetic tokens keep uniques dissimilar
                format!(
                    "tok{:08x} tok{:08x} tok{:08x}",
                    rng.gen::<u32>(),
                    rng.gen::<u32>(),
                    rng.gen::<u32>()
                )
            };
            next_base += 1;
            items.push(WorkloadItem { query, truth: Truth::Unique, history: vec![] });
            roots.push(i);
        }
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub metrics: MetricsReport,
    pub confusion: ConfusionCounts,
    pub latency: LatencySummary,
    pub hit_rate: f64,
    pub queries: u64,
}

/// Play a labeled stream through the engine: look up every item, classify
/// the outcome, and insert misses with a response from `responder`.
pub fn run_benchmark(
    engine: &mut CacheEngine,
    stream: &[WorkloadItem],
    cfg: &LookupConfig,
    beta: f64,
    responder: &dyn Fn(&str) -> String,
) -> Result<BenchmarkResult> {
    let mut confusion = ConfusionCounts::default();
    let mut latencies_ms: Vec<f64> = Vec::with_capacity(stream.len());
    let mut entry_of_item: Vec<Option<u64>> = vec![None; stream.len()];
    let mut hits = 0u64;

    for (i, item) in stream.iter().enumerate() {
        let start = Instant::now();
        let outcome = engine.lookup(&item.query, &item.history, cfg)?;
        latencies_ms.push(start.elapsed().as_secs_f64() * 1000.0);

        let returned = match outcome.kind {
            LookupKind::Hit => outcome.entry.as_ref().map(|e| e.id),
            LookupKind::Miss => None,
        };
        let expected = match item.truth {
            Truth::Unique => None,
            Truth::DuplicateOf(root) => entry_of_item[root],
        };
        // A labeled duplicate whose root never made it into the cache still
        // counts against recall on a miss and as a false hit on any hit.
        let out = match (returned, item.truth) {
            (None, Truth::DuplicateOf(_)) => Outcome::FalseMiss,
            _ => classify_outcome(returned, expected),
        };
        confusion.add(out);

        match returned {
            Some(_) => {
                // Served from cache; the item itself is never inserted, so a
                // later duplicate of it resolves to its group root instead.
                hits += 1;
            }
            None => {
                let response = responder(&item.query);
                let id = engine.insert(&item.query, &response, &item.history, None)?;
                entry_of_item[i] = Some(id);
            }
        }
    }

    let metrics = compute_metrics(&confusion, beta)?;
    let latency = summarize_latency(&mut latencies_ms);
    let hit_rate = hits as f64 / stream.len().max(1) as f64;
    Ok(BenchmarkResult { metrics, confusion, latency, hit_rate, queries: stream.len() as u64 })
}

fn summarize_latency(samples: &mut [f64]) -> LatencySummary {
    if samples.is_empty() {
        return LatencySummary { mean_ms: 0.0, p50_ms: 0.0, p95_ms: 0.0 };
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let pct = |p: f64| {
        let idx = ((samples.len() as f64 - 1.0) * p).round() as usize;
        samples[idx]
    };
    LatencySummary { mean_ms: mean, p50_ms: pct(0.5), p95_ms: pct(0.95) }
}

/// One record of the contextual dataset JSONL format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextualRecord {
    pub id: u64,
    pub query: String,
    pub response: String,
    #[serde(default)]
    pub parent_id: Option<u64>,
    #[serde(default)]
    pub duplicate_of: Option<u64>,
}

/// Replay a contextual dataset (in record order) as a labeled stream.
/// History for each record is its parent chain, oldest first.
pub fn contextual_stream(records: &[ContextualRecord]) -> Result<Vec<WorkloadItem>> {
    let index_of = |id: u64| records.iter().position(|r| r.id == id);
    let mut items = Vec::with_capacity(records.len());
    for rec in records {
        let mut history = Vec::new();
        let mut cursor = rec.parent_id;
        while let Some(pid) = cursor {
            let idx = index_of(pid)
                .ok_or_else(|| Error::Config(format!("record {} has unknown parent {pid}", rec.id)))?;
            history.push(records[idx].query.clone());
            cursor = records[idx].parent_id;
        }
        history.reverse();
        let truth = match rec.duplicate_of {
            None => Truth::Unique,
            Some(dup) => Truth::DuplicateOf(
                index_of(dup)
                    .ok_or_else(|| Error::Config(format!("record {} duplicates unknown id {dup}", rec.id)))?,
            ),
        };
        items.push(WorkloadItem { query: rec.query.clone(), truth, history });
    }
    Ok(items)
}
