//! Trainable linear adapter over frozen provider embeddings.
//!
//! The adapter is trained with a multitask objective: contrastive loss over
//! all labeled pairs pushes non-duplicates apart, and multiple-negatives
//! ranking loss over duplicate pairs pulls positives together against
//! in-batch negatives. Distances are cosine throughout, matching the cache's
//! similarity machinery. Optimization is plain seeded SGD.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed, EmbeddingProvider, EmbeddingVector, normalize};
use crate::error::{Error, Result};

/// Linear map out_dim x in_dim applied to provider embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterModel {
    in_dim: usize,
    out_dim: usize,
    /// row-major flattening of the weight matrix
    weights: Vec<f64>,
}

impl AdapterModel {
    /// Fresh adapter: the identity map when square, the first `out_dim` rows
    /// of the identity otherwise.
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        let mut weights = vec![0.0; in_dim * out_dim];
        for i in 0..out_dim.min(in_dim) {
            weights[i * in_dim + i] = 1.0;
        }
        Self { in_dim, out_dim, weights }
    }

    pub fn from_flat(out_dim: usize, in_dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != out_dim * in_dim || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("adapter weight vector has wrong length or non-finite entries".into()));
        }
        Ok(Self { in_dim, out_dim, weights })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Row-major flat weights, the FL transport format.
    pub fn flat_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_flat_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::LengthMismatch);
        }
        self.weights.copy_from_slice(weights);
        Ok(())
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.out_dim, self.in_dim, &self.weights)
    }

    fn set_matrix(&mut self, m: &DMatrix<f64>) {
        for r in 0..self.out_dim {
            for c in 0..self.in_dim {
                self.weights[r * self.in_dim + c] = m[(r, c)];
            }
        }
    }
}

/// Forward pass: normalize(W * e).
pub fn apply_adapter(model: &AdapterModel, e: &EmbeddingVector) -> Result<EmbeddingVector> {
    if e.dim() != model.in_dim {
        return Err(Error::DimensionMismatch { expected: model.in_dim, got: e.dim() });
    }
    let x = DVector::from_iterator(model.in_dim, e.values().iter().map(|&v| v as f64));
    let y = model.matrix() * x;
    let raw = EmbeddingVector::new(y.iter().map(|&v| v as f32).collect())?;
    normalize(&raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub mnr_scale: f64,
    pub seed: u64,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 128,
            learning_rate: 1e-3,
            margin: 0.5,
            mnr_scale: 20.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub q1: String,
    pub q2: String,
    pub duplicate: bool,
}

/// Final-epoch mean losses from local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalMetrics {
    pub contrastive: f64,
    pub mnr: Option<f64>,
}

fn columns(vectors: &[&EmbeddingVector], dim: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::<f64>::zeros(dim, vectors.len());
    for (j, v) in vectors.iter().enumerate() {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: v.dim() });
        }
        for (i, &x) in v.values().iter().enumerate() {
            m[(i, j)] = x as f64;
        }
    }
    Ok(m)
}

/// d cos(u, v)/du for raw (unnormalized) u, v.
fn cos_grad_u(u: &DVector<f64>, v: &DVector<f64>, cos: f64) -> DVector<f64> {
    let nu = u.norm();
    let nv = v.norm();
    v / (nu * nv) - u * (cos / (nu * nu))
}

/// Contrastive loss over labeled pairs with cosine distance d = 1 - cos:
/// mean of y*d^2 + (1-y)*max(0, margin - d)^2, plus its weight gradient.
pub fn contrastive_loss(
    model: &AdapterModel,
    batch: &[(EmbeddingVector, EmbeddingVector, bool)],
    margin: f64,
) -> Result<(f64, DMatrix<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let w = model.matrix();
    let mut loss = 0.0;
    let mut grad = DMatrix::<f64>::zeros(model.out_dim, model.in_dim);
    let n = batch.len() as f64;
    for (a, b, duplicate) in batch {
        if a.dim() != model.in_dim || b.dim() != model.in_dim {
            return Err(Error::DimensionMismatch {
                expected: model.in_dim,
                got: a.dim().max(b.dim()),
            });
        }
        let xa = DVector::from_iterator(model.in_dim, a.values().iter().map(|&v| v as f64));
        let xb = DVector::from_iterator(model.in_dim, b.values().iter().map(|&v| v as f64));
        let u = &w * &xa;
        let v = &w * &xb;
        if u.norm() < 1e-12 || v.norm() < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let cos = u.dot(&v) / (u.norm() * v.norm());
        let d = 1.0 - cos;
        let dl_dd = if *duplicate {
            loss += d * d;
            2.0 * d
        } else {
            let hinge = (margin - d).max(0.0);
            loss += hinge * hinge;
            -2.0 * hinge
        };
        let dl_dcos = -dl_dd / n;
        if dl_dcos != 0.0 {
            let du = cos_grad_u(&u, &v, cos) * dl_dcos;
            let dv = cos_grad_u(&v, &u, cos) * dl_dcos;
            grad.ger(1.0, &du, &xa, 1.0);
            grad.ger(1.0, &dv, &xb, 1.0);
        }
    }
    Ok((loss / n, grad))
}

/// Multiple-negatives ranking loss over positive pairs: every other positive
/// in the batch serves as a negative for each anchor.
///
/// With s_ij = scale * cos(W a_i, W p_j):
/// loss = mean_i [ -s_ii + log sum_j exp(s_ij) ].
pub fn mnr_loss(
    model: &AdapterModel,
    batch: &[(EmbeddingVector, EmbeddingVector)],
    scale: f64,
) -> Result<(f64, DMatrix<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: batch.len() });
    }
    let n = batch.len();
    let w = model.matrix();
    let anchors: Vec<&EmbeddingVector> = batch.iter().map(|(a, _)| a).collect();
    let positives: Vec<&EmbeddingVector> = batch.iter().map(|(_, p)| p).collect();
    let xa = columns(&anchors, model.in_dim)?;
    let xp = columns(&positives, model.in_dim)?;
    let u = &w * &xa; // out x n
    let v = &w * &xp;

    let mut u_hat = u.clone();
    let mut v_hat = v.clone();
    let mut u_norms = vec![0.0; n];
    let mut v_norms = vec![0.0; n];
    for j in 0..n {
        u_norms[j] = u.column(j).norm();
        v_norms[j] = v.column(j).norm();
        if u_norms[j] < 1e-12 || v_norms[j] < 1e-12 {
            return Err(Error::ZeroVector);
        }
        u_hat.column_mut(j).scale_mut(1.0 / u_norms[j]);
        v_hat.column_mut(j).scale_mut(1.0 / v_norms[j]);
    }

    let cos = u_hat.transpose() * &v_hat; // n x n
    let mut loss = 0.0;
    // dL/d s_ij, already including the 1/n batch mean
    let mut g = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let row_max = (0..n).map(|j| cos[(i, j)]).fold(f64::NEG_INFINITY, f64::max) * scale;
        let mut sum_exp = 0.0;
        for j in 0..n {
            sum_exp += (scale * cos[(i, j)] - row_max).exp();
        }
        let lse = row_max + sum_exp.ln();
        loss += -scale * cos[(i, i)] + lse;
        for j in 0..n {
            let softmax = (scale * cos[(i, j)] - row_max).exp() / sum_exp;
            let delta = if i == j { 1.0 } else { 0.0 };
            g[(i, j)] = scale * (softmax - delta) / n as f64;
        }
    }
    loss /= n as f64;

    // dL/d u_hat = v_hat * G^T, dL/d v_hat = u_hat * G
    let dl_duhat = &v_hat * g.transpose();
    let dl_dvhat = &u_hat * &g;

    // backprop through column normalization: du = (g - (u_hat . g) u_hat)/|u|
    let mut dl_du = DMatrix::<f64>::zeros(model.out_dim, n);
    let mut dl_dv = DMatrix::<f64>::zeros(model.out_dim, n);
    for j in 0..n {
        let gu = dl_duhat.column(j);
        let uh = u_hat.column(j);
        let proj = uh.dot(&gu);
        for i in 0..model.out_dim {
            dl_du[(i, j)] = (gu[i] - proj * uh[i]) / u_norms[j];
        }
        let gv = dl_dvhat.column(j);
        let vh = v_hat.column(j);
        let proj = vh.dot(&gv);
        for i in 0..model.out_dim {
            dl_dv[(i, j)] = (gv[i] - proj * vh[i]) / v_norms[j];
        }
    }

    let grad = &dl_du * xa.transpose() + &dl_dv * xp.transpose();
    Ok((loss, grad))
}

enum Batch {
    Contrastive(Vec<usize>),
    Mnr(Vec<usize>),
}

/// Train the adapter on labeled pairs with seeded mini-batch SGD,
/// alternating contrastive and MNR batches round-robin. Deterministic given
/// the seed. Returns the updated model and the final epoch's mean losses.
pub fn train_local(
    model: &AdapterModel,
    pairs: &[LabeledPair],
    provider: &dyn EmbeddingProvider,
    hp: &TrainingHyperparams,
) -> Result<(AdapterModel, LocalMetrics)> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData);
    }
    let mut embeddings: HashMap<&str, EmbeddingVector> = HashMap::new();
    for pair in pairs {
        for text in [pair.q1.as_str(), pair.q2.as_str()] {
            if !embeddings.contains_key(text) {
                embeddings.insert(text, embed(provider, text)?);
            }
        }
    }

    let mut trained = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let dup_indices: Vec<usize> =
        (0..pairs.len()).filter(|&i| pairs[i].duplicate).collect();
    let mut metrics = LocalMetrics { contrastive: 0.0, mnr: None };

    for _epoch in 0..hp.epochs {
        let mut all: Vec<usize> = (0..pairs.len()).collect();
        all.shuffle(&mut rng);
        let mut dups = dup_indices.clone();
        dups.shuffle(&mut rng);

        let contrastive_batches: Vec<Vec<usize>> =
            all.chunks(hp.batch_size).map(|c| c.to_vec()).collect();
        // in-batch negatives need at least two rows
        let mnr_batches: Vec<Vec<usize>> = dups
            .chunks(hp.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect();

        let mut schedule = Vec::new();
        let mut ci = contrastive_batches.into_iter();
        let mut mi = mnr_batches.into_iter();
        loop {
            let c = ci.next();
            let m = mi.next();
            if c.is_none() && m.is_none() {
                break;
            }
            if let Some(c) = c {
                schedule.push(Batch::Contrastive(c));
            }
            if let Some(m) = m {
                schedule.push(Batch::Mnr(m));
            }
        }

        let mut c_sum = 0.0;
        let mut c_count = 0usize;
        let mut m_sum = 0.0;
        let mut m_count = 0usize;
        let mut w = trained.matrix();
        for batch in schedule {
            match batch {
                Batch::Contrastive(idx) => {
                    let data: Vec<_> = idx
                        .iter()
                        .map(|&i| {
                            (
                                embeddings[pairs[i].q1.as_str()].clone(),
                                embeddings[pairs[i].q2.as_str()].clone(),
                                pairs[i].duplicate,
                            )
                        })
                        .collect();
                    let (loss, grad) = contrastive_loss(&trained, &data, hp.margin)?;
                    w -= grad * hp.learning_rate;
                    trained.set_matrix(&w);
                    c_sum += loss;
                    c_count += 1;
                }
                Batch::Mnr(idx) => {
                    let data: Vec<_> = idx
                        .iter()
                        .map(|&i| {
                            (
                                embeddings[pairs[i].q1.as_str()].clone(),
                                embeddings[pairs[i].q2.as_str()].clone(),
                            )
                        })
                        .collect();
                    let (loss, grad) = mnr_loss(&trained, &data, hp.mnr_scale)?;
                    w -= grad * hp.learning_rate;
                    trained.set_matrix(&w);
                    m_sum += loss;
                    m_count += 1;
                }
            }
        }
        metrics.contrastive = if c_count > 0 { c_sum / c_count as f64 } else { 0.0 };
        metrics.mnr = (m_count > 0).then(|| m_sum / m_count as f64);
    }

    Ok((trained, metrics))
}
