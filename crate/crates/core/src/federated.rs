//! Federated adapter training: sample-weighted weight averaging, unweighted
//! threshold averaging, and a multi-round simulation over partitioned data.

use std::collections::HashMap;
use std::io::Write;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{
    apply_adapter, AdapterModel, LabeledPair, TrainingHyperparams,
};
use crate::embedding::{cosine_similarity, embed, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::threshold::{evaluate_at, tune, ScoredPair, ThresholdProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: Vec<f64>,
    pub sample_count: usize,
    pub tau_local: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub round: usize,
    pub weights: Vec<f64>,
    pub tau_global: f64,
}

#[derive(Debug, Clone)]
pub struct FlConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub seed: u64,
    pub hyperparams: TrainingHyperparams,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            clients_per_round: 4,
            rounds: 50,
            seed: 0,
            hyperparams: TrainingHyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub tau_global: f64,
    pub metrics: MetricsReport,
}

/// Sample-weighted average of client weight vectors:
/// w = sum_k (n_k / n) * w_k.
pub fn fed_avg(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    let len = updates[0].weights.len();
    if updates.iter().any(|u| u.weights.len() != len) {
        return Err(Error::LengthMismatch);
    }
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::EmptyUpdates);
    }
    let mut avg = vec![0.0; len];
    for update in updates {
        let share = update.sample_count as f64 / total as f64;
        for (a, &w) in avg.iter_mut().zip(&update.weights) {
            *a += share * w;
        }
    }
    Ok(avg)
}

/// Thresholds aggregate as a plain unweighted mean, unlike the weights.
pub fn aggregate_tau(taus: &[f64]) -> Result<f64> {
    if taus.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(taus.iter().sum::<f64>() / taus.len() as f64)
}

/// One client's private data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub pairs: Vec<LabeledPair>,
}

/// Last 20% of the client's pairs after a seeded shuffle; the split is a
/// function of the seed only, so it is stable across rounds.
pub fn split_client_data(pairs: &[LabeledPair], seed: u64) -> (Vec<LabeledPair>, Vec<LabeledPair>) {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let val_len = pairs.len() / 5;
    let (train_idx, val_idx) = order.split_at(pairs.len() - val_len);
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect();
    (pick(train_idx), pick(val_idx))
}

fn score_pairs(
    provider: &dyn EmbeddingProvider,
    adapter: &AdapterModel,
    pairs: &[LabeledPair],
) -> Result<Vec<ScoredPair>> {
    pairs
        .iter()
        .map(|p| {
            let a = apply_adapter(adapter, &embed(provider, &p.q1)?)?;
            let b = apply_adapter(adapter, &embed(provider, &p.q2)?)?;
            Ok((cosine_similarity(&a, &b)?, p.duplicate))
        })
        .collect()
}

/// One federation round: sample clients, train each from the current global
/// weights, tune each client's tau on its validation split, aggregate.
///
/// Clients with no data (or whose tau tune fails for lack of labels) are
/// skipped; if every sampled client is skipped the global model is unchanged.
pub fn run_round(
    provider: &dyn EmbeddingProvider,
    clients: &[ClientData],
    global: &GlobalModel,
    cfg: &FlConfig,
    round_index: usize,
) -> Result<GlobalModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ round_index as u64);
    let mut ids: Vec<usize> = (0..clients.len()).collect();
    ids.shuffle(&mut rng);
    ids.truncate(cfg.clients_per_round.min(clients.len()));

    let dim = (global.weights.len() as f64).sqrt().round() as usize;
    let mut updates: Vec<ClientUpdate> = Vec::new();
    for client_id in ids {
        let data = &clients[client_id];
        if data.pairs.is_empty() {
            log::warn!("client {client_id} has no data; skipping this round");
            continue;
        }
        let (train, val) = split_client_data(&data.pairs, cfg.seed ^ client_id as u64);
        let base = AdapterModel::from_flat(dim, dim, global.weights.clone())?;
        let mut hp = cfg.hyperparams;
        hp.seed = cfg.seed ^ ((round_index as u64) << 16) ^ client_id as u64;
        let (adapter, _metrics) = crate::adapter::train_local(&base, &train, provider, &hp)?;

        let eval_set = if val.is_empty() { &train } else { &val };
        let scored = score_pairs(provider, &adapter, eval_set)?;
        let tau_local = match tune(&scored, crate::threshold::DEFAULT_BETA, 0.01) {
            Ok(profile) => profile.tau,
            Err(_) => {
                log::warn!("client {client_id}: tau tune failed; reusing global tau");
                global.tau_global
            }
        };
        updates.push(ClientUpdate {
            client_id,
            weights: adapter.flat_weights().to_vec(),
            sample_count: train.len(),
            tau_local,
        });
    }

    if updates.is_empty() {
        log::warn!("round {round_index}: no usable clients; global model unchanged");
        return Ok(GlobalModel { round: global.round + 1, ..global.clone() });
    }

    // deterministic reduce order regardless of sampling order
    updates.sort_by_key(|u| u.client_id);
    let weights = fed_avg(&updates)?;
    let taus: Vec<f64> = updates.iter().map(|u| u.tau_local).collect();
    let tau_global = aggregate_tau(&taus)?;
    Ok(GlobalModel { round: global.round + 1, weights, tau_global })
}

/// Run the full simulation, evaluating the global model on `held_out` after
/// each round and optionally appending one CSV row per round to `csv_out`.
pub fn run_simulation(
    provider: &dyn EmbeddingProvider,
    clients: &[ClientData],
    held_out: &[LabeledPair],
    cfg: &FlConfig,
    dim: usize,
    mut csv_out: Option<&mut dyn Write>,
) -> Result<(GlobalModel, Vec<RoundReport>)> {
    if clients.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut global = GlobalModel {
        round: 0,
        weights: AdapterModel::identity(dim, dim).flat_weights().to_vec(),
        tau_global: ThresholdProfile::default().tau,
    };
    if let Some(out) = csv_out.as_deref_mut() {
        writeln!(out, "round,f_beta,precision,recall,accuracy,tau_global")?;
    }
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round_index in 0..cfg.rounds {
        global = run_round(provider, clients, &global, cfg, round_index)?;
        let metrics = evaluate_global(provider, &global, held_out, dim)?;
        let report = RoundReport { round: global.round, tau_global: global.tau_global, metrics };
        if let Some(out) = csv_out.as_deref_mut() {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                report.round,
                metrics.f_beta,
                metrics.precision,
                metrics.recall,
                metrics.accuracy,
                report.tau_global
            )?;
        }
        reports.push(report);
    }
    Ok((global, reports))
}

/// Held-out metrics of the global adapter at the global tau.
pub fn evaluate_global(
    provider: &dyn EmbeddingProvider,
    global: &GlobalModel,
    held_out: &[LabeledPair],
    dim: usize,
) -> Result<MetricsReport> {
    let adapter = AdapterModel::from_flat(dim, dim, global.weights.clone())?;
    let scored = score_pairs(provider, &adapter, held_out)?;
    let (_, metrics) = evaluate_at(&scored, global.tau_global, crate::threshold::DEFAULT_BETA)?;
    Ok(metrics)
}

/// Partition labeled pairs across `num_clients` round-robin. Useful for
/// building simulations from a single pool.
pub fn partition_pairs(pairs: &[LabeledPair], num_clients: usize) -> Vec<ClientData> {
    let mut clients: Vec<ClientData> =
        (0..num_clients).map(|_| ClientData { pairs: Vec::new() }).collect();
    for (i, pair) in pairs.iter().enumerate() {
        clients[i % num_clients].pairs.push(pair.clone());
    }
    clients
}

/// Deduplicate by client id keeping the last update; guards against a client
/// reporting twice in one round.
pub fn dedup_updates(updates: Vec<ClientUpdate>) -> Vec<ClientUpdate> {
    let mut by_id: HashMap<usize, ClientUpdate> = HashMap::new();
    for u in updates {
        by_id.insert(u.client_id, u);
    }
    let mut out: Vec<ClientUpdate> = by_id.into_values().collect();
    out.sort_by_key(|u| u.client_id);
    out
}
