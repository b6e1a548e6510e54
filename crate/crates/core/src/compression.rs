//! PCA fitting and projection for embedding compression.
//!
//! The model is fit once from a training corpus and then applied as a fixed
//! projection layer; it is not refit as the cache grows. Projected vectors
//! are re-normalized so cached comparisons stay pure cosine.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::embedding::{EmbeddingVector, normalize};
use crate::error::{Error, Result};

pub const DEFAULT_COMPRESSED_DIM: usize = 64;

pub const MPCA_MAGIC: &[u8; 4] = b"MPCA";
pub const MPCA_VERSION: u16 = 1;

/// Mean vector plus orthonormal component rows projecting in_dim -> k.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    in_dim: usize,
    k: usize,
    mean: DVector<f64>,
    /// k x in_dim, rows orthonormal, ordered by descending explained variance.
    components: DMatrix<f64>,
    explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }
}

/// Fit a PCA model on `samples`, keeping the top `k` principal components of
/// the sample covariance.
///
/// Sign convention: each component's largest-magnitude coordinate is made
/// positive, ties broken by lowest index, so fits are deterministic.
pub fn fit_pca(samples: &[EmbeddingVector], k: usize) -> Result<PcaModel> {
    if samples.len() < 2 || samples.len() < k {
        return Err(Error::TooFewSamples { need: k.max(2), got: samples.len() });
    }
    if k == 0 {
        return Err(Error::KTooLarge { k, dim: 0 });
    }
    let in_dim = samples[0].dim();
    if k > in_dim {
        return Err(Error::KTooLarge { k, dim: in_dim });
    }
    for s in samples {
        if s.dim() != in_dim {
            return Err(Error::DimensionMismatch { expected: in_dim, got: s.dim() });
        }
    }

    let n = samples.len();
    let mut mean = DVector::<f64>::zeros(in_dim);
    for s in samples {
        for (i, &v) in s.values().iter().enumerate() {
            mean[i] += v as f64;
        }
    }
    mean /= n as f64;

    // sample covariance with 1/(n-1)
    let mut cov = DMatrix::<f64>::zeros(in_dim, in_dim);
    for s in samples {
        let centered =
            DVector::from_iterator(in_dim, s.values().iter().map(|&v| v as f64)) - &mean;
        cov.syger(1.0 / (n as f64 - 1.0), &centered, &centered, 1.0);
    }
    // syger fills the lower triangle; mirror it
    for i in 0..in_dim {
        for j in (i + 1)..in_dim {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    if cov.iter().all(|&v| v.abs() < 1e-300) {
        return Err(Error::DegenerateData);
    }

    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..in_dim).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));

    let mut components = DMatrix::<f64>::zeros(k, in_dim);
    let mut explained_variance = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let col = eigen.eigenvectors.column(idx);
        let mut max_abs = 0.0;
        let mut max_i = 0;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_i = i;
            }
        }
        let flip = if col[max_i] < 0.0 { -1.0 } else { 1.0 };
        for (i, &v) in col.iter().enumerate() {
            components[(row, i)] = flip * v;
        }
        explained_variance.push(eigen.eigenvalues[idx].max(0.0));
    }

    Ok(PcaModel { in_dim, k, mean, components, explained_variance })
}

/// Project `e` into the PCA subspace and re-normalize. Projecting the mean
/// itself (or anything orthogonal to every component after centering) yields
/// the flagged compressed-zero vector.
pub fn project(model: &PcaModel, e: &EmbeddingVector) -> Result<EmbeddingVector> {
    if e.dim() != model.in_dim {
        return Err(Error::DimensionMismatch { expected: model.in_dim, got: e.dim() });
    }
    let centered =
        DVector::from_iterator(model.in_dim, e.values().iter().map(|&v| v as f64)) - &model.mean;
    let projected = &model.components * centered;
    // inputs are f32, so anything below f32 noise scale is genuinely zero
    if projected.norm() < 1e-6 {
        return Ok(EmbeddingVector::zero(model.k));
    }
    let raw = EmbeddingVector::new(projected.iter().map(|&v| v as f32).collect())?;
    normalize(&raw)
}

/// Reconstruct an input-space vector from its (pre-normalization) projection.
/// Used by tests to measure reconstruction error.
pub fn reconstruct(model: &PcaModel, e: &EmbeddingVector) -> Result<Vec<f64>> {
    if e.dim() != model.in_dim {
        return Err(Error::DimensionMismatch { expected: model.in_dim, got: e.dim() });
    }
    let centered =
        DVector::from_iterator(model.in_dim, e.values().iter().map(|&v| v as f64)) - &model.mean;
    let projected = &model.components * centered;
    let back = model.components.transpose() * projected + &model.mean;
    Ok(back.iter().copied().collect())
}

impl PcaModel {
    /// Binary block: magic "MPCA", version u16, in_dim u32, k u32, then
    /// mean, components (row-major), explained_variance as LE f32.
    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(MPCA_MAGIC)?;
        w.write_all(&MPCA_VERSION.to_le_bytes())?;
        w.write_all(&(self.in_dim as u32).to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        for &v in self.mean.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for row in 0..self.k {
            for col in 0..self.in_dim {
                w.write_all(&(self.components[(row, col)] as f32).to_le_bytes())?;
            }
        }
        for &v in &self.explained_variance {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::CorruptFile("truncated MPCA block".into()))?;
        if &magic != MPCA_MAGIC {
            return Err(Error::CorruptFile("bad MPCA magic".into()));
        }
        let version = read_u16(r)?;
        if version != MPCA_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let in_dim = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        if k == 0 || in_dim == 0 || k > in_dim {
            return Err(Error::CorruptFile("invalid MPCA dimensions".into()));
        }
        let mean = DVector::from_iterator(in_dim, (0..in_dim).map(|_| 0.0));
        let mut model = PcaModel {
            in_dim,
            k,
            mean,
            components: DMatrix::zeros(k, in_dim),
            explained_variance: Vec::with_capacity(k),
        };
        for i in 0..in_dim {
            model.mean[i] = read_f32(r)? as f64;
        }
        for row in 0..k {
            for col in 0..in_dim {
                model.components[(row, col)] = read_f32(r)? as f64;
            }
        }
        for _ in 0..k {
            model.explained_variance.push(read_f32(r)? as f64);
        }
        Ok(model)
    }
}

fn read_u16(r: &mut dyn Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut dyn Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn ev(values: Vec<f32>) -> EmbeddingVector {
        EmbeddingVector::new(values).unwrap()
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<EmbeddingVector> {
        (0..n)
            .map(|_| ev((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
            .collect()
    }

    #[test]
    fn line_data_recovers_direction() {
        // points on y = 2x: covariance eigenvector is [1,2]/sqrt(5)
        let samples: Vec<_> = [-2.0f32, -1.0, 0.5, 1.0, 2.0]
            .iter()
            .map(|&t| ev(vec![t, 2.0 * t]))
            .collect();
        let model = fit_pca(&samples, 1).unwrap();
        let c = model.components();
        let expected = [1.0 / 5.0f64.sqrt(), 2.0 / 5.0f64.sqrt()];
        assert!((c[(0, 0)] - expected[0]).abs() < 1e-9);
        assert!((c[(0, 1)] - expected[1]).abs() < 1e-9);
        for s in &samples {
            let back = reconstruct(&model, s).unwrap();
            assert!((back[0] - s.values()[0] as f64).abs() < 1e-6);
            assert!((back[1] - s.values()[1] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn full_rank_projection_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = random_samples(&mut rng, 20, 6);
        let model = fit_pca(&samples, 6).unwrap();
        for s in &samples {
            let back = reconstruct(&model, s).unwrap();
            for (b, &orig) in back.iter().zip(s.values()) {
                assert!((b - orig as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = random_samples(&mut rng, 5, 3);
        assert!(matches!(fit_pca(&samples, 4), Err(Error::KTooLarge { .. })));
        assert!(matches!(fit_pca(&samples[..1], 1), Err(Error::TooFewSamples { .. })));
        let constant = vec![ev(vec![1.0, 1.0]), ev(vec![1.0, 1.0])];
        assert!(matches!(fit_pca(&constant, 1), Err(Error::DegenerateData)));
    }

    #[test]
    fn orthonormal_components_sorted_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = random_samples(&mut rng, 50, 12);
        let model = fit_pca(&samples, 5).unwrap();
        let c = model.components();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..12).map(|d| c[(i, d)] * c[(j, d)]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-6);
            }
        }
        let ev = model.explained_variance();
        for w in ev.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn projected_training_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = random_samples(&mut rng, 30, 8);
        let model = fit_pca(&samples, 4).unwrap();
        let mut acc = vec![0.0f64; 4];
        for s in &samples {
            let centered = DVector::from_iterator(8, s.values().iter().map(|&v| v as f64))
                - model.mean();
            let p = model.components() * centered;
            for (a, &v) in acc.iter_mut().zip(p.iter()) {
                *a += v;
            }
        }
        for a in acc {
            assert!((a / 30.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_projects_to_compressed_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = random_samples(&mut rng, 10, 4);
        let model = fit_pca(&samples, 2).unwrap();
        let mean = ev(model.mean().iter().map(|&v| v as f32).collect());
        let p = project(&model, &mean).unwrap();
        assert!(p.is_zero());
    }

    #[test]
    fn rank_k_data_preserves_cosine() {
        // vectors in a 3-dim subspace of an 8-dim space, zero mean by
        // symmetry pairs
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let basis: Vec<Vec<f64>> = vec![
            (0..8).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
            (0..8).map(|i| if i == 3 { 1.0 } else { 0.0 }).collect(),
            (0..8).map(|i| if i == 6 { 1.0 } else { 0.0 }).collect(),
        ];
        let mut samples = Vec::new();
        for _ in 0..30 {
            let coeffs: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..8)
                .map(|d| (0..3).map(|b| coeffs[b] * basis[b][d]).sum::<f64>() as f32)
                .collect();
            samples.push(ev(v.clone()));
            samples.push(ev(v.iter().map(|x| -x).collect()));
        }
        let model = fit_pca(&samples, 3).unwrap();
        for pair in samples.chunks(2).take(10) {
            let a = &samples[3];
            let b = &pair[0];
            if a.is_zero() || b.is_zero() {
                continue;
            }
            let orig = cosine_similarity(a, b).unwrap();
            let pa = project(&model, a).unwrap();
            let pb = project(&model, b).unwrap();
            if pa.is_zero() || pb.is_zero() {
                continue;
            }
            let proj = cosine_similarity(&pa, &pb).unwrap();
            assert!((orig - proj).abs() < 1e-5, "cosine drift {orig} vs {proj}");
        }
    }

    #[test]
    fn fit_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut samples = random_samples(&mut rng, 40, 6);
        let a = fit_pca(&samples, 3).unwrap();
        samples.shuffle(&mut rng);
        let b = fit_pca(&samples, 3).unwrap();
        for i in 0..3 {
            for j in 0..6 {
                assert!((a.components()[(i, j)] - b.components()[(i, j)]).abs() < 1e-9);
            }
        }
        for (x, y) in a.mean().iter().zip(b.mean().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples = random_samples(&mut rng, 20, 5);
        let model = fit_pca(&samples, 2).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let loaded = PcaModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.in_dim(), 5);
        assert_eq!(loaded.k(), 2);
        // f32 round trip: loaded params match to f32 precision
        for i in 0..2 {
            for j in 0..5 {
                assert_eq!(
                    loaded.components()[(i, j)],
                    model.components()[(i, j)] as f32 as f64
                );
            }
        }
        // second trip is bit-exact
        let mut buf2 = Vec::new();
        loaded.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn serialization_rejects_bad_magic_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = random_samples(&mut rng, 10, 4);
        let model = fit_pca(&samples, 2).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            PcaModel::read_from(&mut bad.as_slice()),
            Err(Error::CorruptFile(_))
        ));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            PcaModel::read_from(&mut &truncated[..]),
            Err(Error::CorruptFile(_))
        ));
    }

    #[test]
    fn payload_shrinks_by_compression_ratio() {
        assert_eq!(768 * 4, 3072);
        assert_eq!(64 * 4, 256);
        let saving = 1.0 - 256.0 / 3072.0;
        assert!(saving >= 0.83);
    }
}
