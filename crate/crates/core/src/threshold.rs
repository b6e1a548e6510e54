//! F_beta-optimal cosine-similarity threshold learned from scored pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, ConfusionCounts, MetricsReport};

pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_GRID_STEP: f64 = 0.01;

/// A tuned cosine-similarity cutoff and the F_beta it achieved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProfile {
    pub tau: f64,
    pub beta: f64,
    pub f_beta_at_tau: f64,
    pub grid_step: f64,
}

impl Default for ThresholdProfile {
    fn default() -> Self {
        // 0.83 is the tuned MPNet optimum; used until the first local tune.
        Self { tau: 0.83, beta: DEFAULT_BETA, f_beta_at_tau: 0.0, grid_step: DEFAULT_GRID_STEP }
    }
}

/// A similarity score with its duplicate label.
pub type ScoredPair = (f64, bool);

/// Confusion counts and metrics of predicting "duplicate" iff
/// similarity >= tau.
pub fn evaluate_at(
    scored_pairs: &[ScoredPair],
    tau: f64,
    beta: f64,
) -> Result<(ConfusionCounts, MetricsReport)> {
    if scored_pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut counts = ConfusionCounts::default();
    for &(similarity, duplicate) in scored_pairs {
        let predicted = similarity >= tau;
        match (predicted, duplicate) {
            (true, true) => counts.true_hit += 1,
            (true, false) => counts.false_hit += 1,
            (false, false) => counts.true_miss += 1,
            (false, true) => counts.false_miss += 1,
        }
    }
    let metrics = compute_metrics(&counts, beta)?;
    Ok((counts, metrics))
}

/// Sweep tau over the grid {0, grid_step, .., 1} and return the grid point
/// maximizing F_beta. Ties break toward the largest tau (precision-favoring).
pub fn tune(scored_pairs: &[ScoredPair], beta: f64, grid_step: f64) -> Result<ThresholdProfile> {
    if scored_pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let duplicates = scored_pairs.iter().filter(|p| p.1).count();
    if duplicates == 0 || duplicates == scored_pairs.len() {
        return Err(Error::InsufficientLabels);
    }
    let steps = (1.0 / grid_step).round() as usize;
    let mut best_tau = 0.0;
    let mut best_f = -1.0;
    for i in 0..=steps {
        let tau = i as f64 * grid_step;
        let (_, metrics) = evaluate_at(scored_pairs, tau, beta)?;
        if metrics.f_beta >= best_f {
            best_f = metrics.f_beta;
            best_tau = tau;
        }
    }
    Ok(ThresholdProfile { tau: best_tau, beta, f_beta_at_tau: best_f, grid_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn evaluate_at_direct_enumeration() {
        let pairs = [(0.9, true), (0.8, true), (0.6, false)];
        let (c, _) = evaluate_at(&pairs, 0.7, 0.5).unwrap();
        assert_eq!((c.true_hit, c.false_hit, c.true_miss, c.false_miss), (2, 0, 1, 0));
    }

    #[test]
    fn evaluate_at_degenerate_thresholds() {
        let pairs = [(0.9, true), (0.8, true), (0.6, false), (0.3, false)];
        let (c, _) = evaluate_at(&pairs, 0.0, 0.5).unwrap();
        assert_eq!(c.false_hit, 2);
        assert_eq!(c.true_hit, 2);

        let (c, m) = evaluate_at(&pairs, 0.95, 0.5).unwrap();
        assert_eq!(c.true_hit + c.false_hit, 0);
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn tune_picks_largest_perfect_grid_point() {
        let pairs = [(0.9, true), (0.8, true), (0.6, false)];
        let profile = tune(&pairs, 0.5, 0.01).unwrap();
        assert!((profile.tau - 0.80).abs() < 1e-9);
        assert!((profile.f_beta_at_tau - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tune_inverted_scores_still_returns_argmax() {
        let pairs = [(0.2, true), (0.3, true), (0.8, false), (0.9, false)];
        let profile = tune(&pairs, 0.5, 0.01).unwrap();
        assert!(profile.f_beta_at_tau < 1.0);
        let (_, at) = evaluate_at(&pairs, profile.tau, 0.5).unwrap();
        assert_eq!(at.f_beta, profile.f_beta_at_tau);
    }

    #[test]
    fn tune_rejects_uniform_labels() {
        assert!(matches!(
            tune(&[(0.9, true), (0.8, true)], 0.5, 0.01),
            Err(Error::InsufficientLabels)
        ));
        assert!(matches!(tune(&[], 0.5, 0.01), Err(Error::EmptyInput)));
    }

    /// Naive oracle: evaluate every grid point independently and scan for the
    /// largest-tau maximum.
    fn oracle(pairs: &[ScoredPair], beta: f64, step: f64) -> (f64, f64) {
        let steps = (1.0 / step).round() as usize;
        let mut best = (0.0, -1.0);
        for i in 0..=steps {
            let tau = i as f64 * step;
            let mut th = 0.0;
            let mut fh = 0.0;
            let mut fm = 0.0;
            for &(s, d) in pairs {
                if s >= tau {
                    if d { th += 1.0 } else { fh += 1.0 }
                } else if d {
                    fm += 1.0
                }
            }
            let p = if th + fh > 0.0 { th / (th + fh) } else { 0.0 };
            let r = if th + fm > 0.0 { th / (th + fm) } else { 0.0 };
            let b2 = beta * beta;
            let f = if b2 * p + r == 0.0 { 0.0 } else { (1.0 + b2) * p * r / (b2 * p + r) };
            if f >= best.1 {
                best = (tau, f);
            }
        }
        best
    }

    pub(crate) fn random_pairs(rng: &mut ChaCha8Rng) -> Vec<ScoredPair> {
        let n = rng.gen_range(4..60);
        let mut pairs: Vec<ScoredPair> = (0..n)
            .map(|_| {
                let dup = rng.gen_bool(0.5);
                let s = if dup {
                    rng.gen_range(0.3..1.0)
                } else {
                    rng.gen_range(0.0..0.8)
                };
                (s, dup)
            })
            .collect();
        // force at least one of each label
        pairs.push((rng.gen_range(0.5..1.0), true));
        pairs.push((rng.gen_range(0.0..0.5), false));
        pairs
    }

    #[test]
    fn tune_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let pairs = random_pairs(&mut rng);
            let profile = tune(&pairs, 0.5, 0.01).unwrap();
            let (tau, f) = oracle(&pairs, 0.5, 0.01);
            assert_eq!(profile.tau, tau);
            assert_eq!(profile.f_beta_at_tau, f);
        }
    }

    #[test]
    fn tune_result_dominates_every_grid_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs = random_pairs(&mut rng);
        let profile = tune(&pairs, 0.5, 0.01).unwrap();
        for i in 0..=100 {
            let tau = i as f64 * 0.01;
            let (_, m) = evaluate_at(&pairs, tau, 0.5).unwrap();
            assert!(profile.f_beta_at_tau >= m.f_beta);
        }
    }

    #[test]
    fn duplicating_pair_set_leaves_tau_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pairs = random_pairs(&mut rng);
        let doubled: Vec<_> = pairs.iter().chain(&pairs).copied().collect();
        let a = tune(&pairs, 0.5, 0.01).unwrap();
        let b = tune(&doubled, 0.5, 0.01).unwrap();
        assert_eq!(a.tau, b.tau);
        assert_eq!(a.f_beta_at_tau, b.f_beta_at_tau);
    }
}
