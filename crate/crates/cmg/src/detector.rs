//! Per-cluster Gaussians over normal latent features and the minimum
//! squared Mahalanobis distance used as the anomaly score.

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{CmgError, Result};
use crate::numerics::{cholesky, forward_substitute, kmeans, Matrix};

const BANK_MAGIC: &[u8; 4] = b"CMGB";
const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct GaussianCluster {
    mean: Vec<f64>,
    cov: Matrix,
    chol: Matrix,
    size: usize,
}

/// Cluster means and shrunk covariances fit on normal features. The
/// Cholesky factor of each covariance is cached at fit time; scoring uses
/// triangular solves, never explicit inverses.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBank {
    dim: usize,
    clusters: Vec<GaussianCluster>,
}

fn shrunk_covariance(rows: &[&[f64]], mean: &[f64], shrink_eps: f64) -> Result<Matrix> {
    let d = mean.len();
    let n = rows.len();
    let mut cov = Matrix::zeros(d, d);
    if n >= 2 {
        for row in rows {
            for a in 0..d {
                let da = row[a] - mean[a];
                for b in a..d {
                    let v = cov.get(a, b) + da * (row[b] - mean[b]);
                    cov.set(a, b, v);
                }
            }
        }
        let denom = (n - 1) as f64;
        for a in 0..d {
            for b in a..d {
                let v = cov.get(a, b) / denom;
                cov.set(a, b, v);
                cov.set(b, a, v);
            }
        }
    }
    // Scale-aware ridge: shrink toward (trace/d) I, falling back to the
    // unit scale when the sample covariance is identically zero.
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let scale = if trace > 0.0 { trace / d as f64 } else { 1.0 };
    for i in 0..d {
        cov.set(i, i, cov.get(i, i) + shrink_eps * scale);
    }
    Ok(cov)
}

/// Clusters the features with seeded k-means, then fits a mean and shrunk
/// sample covariance per cluster. Shrinkage keeps every covariance
/// invertible even for clusters smaller than the dimension.
pub fn fit(features: &Matrix, m: usize, seed: u64, shrink_eps: f64) -> Result<GaussianBank> {
    let n = features.rows();
    if m == 0 || n < m {
        return Err(CmgError::Domain(format!(
            "detector needs 1 <= m <= n, got m={m}, n={n}"
        )));
    }
    if shrink_eps <= 0.0 {
        return Err(CmgError::Config("shrink_eps must be > 0".into()));
    }
    let d = features.cols();
    let clustering = kmeans(features, m, seed, 200)?;
    let mut clusters = Vec::with_capacity(m);
    for c in 0..m {
        let rows: Vec<&[f64]> = (0..n)
            .filter(|&i| clustering.assignments[i] == c)
            .map(|i| features.row(i))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; d];
        for row in &rows {
            for (mv, &rv) in mean.iter_mut().zip(row.iter()) {
                *mv += rv;
            }
        }
        for mv in mean.iter_mut() {
            *mv /= rows.len() as f64;
        }
        let cov = shrunk_covariance(&rows, &mean, shrink_eps)?;
        let chol = cholesky(&cov)?;
        clusters.push(GaussianCluster { mean, cov, chol, size: rows.len() });
    }
    Ok(GaussianBank { dim: d, clusters })
}

impl GaussianBank {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_mean(&self, k: usize) -> &[f64] {
        &self.clusters[k].mean
    }

    pub fn cluster_covariance(&self, k: usize) -> &Matrix {
        &self.clusters[k].cov
    }

    /// Minimum squared Mahalanobis distance of `z` over the clusters;
    /// higher means more anomalous. Computed as || L^{-1} (z - mu) ||^2
    /// from the cached factor, so the result is never negative.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(CmgError::Shape(format!(
                "feature of length {} against bank of dimension {}",
                z.len(),
                self.dim
            )));
        }
        let mut best = f64::INFINITY;
        for cluster in &self.clusters {
            let diff: Vec<f64> = z.iter().zip(&cluster.mean).map(|(a, b)| a - b).collect();
            let y = forward_substitute(&cluster.chol, &diff);
            let q: f64 = y.iter().map(|v| v * v).sum();
            if q < best {
                best = q;
            }
        }
        Ok(best)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(BANK_MAGIC)
            .u32(BANK_VERSION)
            .u32(self.clusters.len() as u32)
            .u32(self.dim as u32);
        for cluster in &self.clusters {
            w.u32(cluster.size as u32);
            w.f64_slice(&cluster.mean);
            w.f64_slice(cluster.cov.data());
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(BANK_MAGIC)?;
        r.expect_version(BANK_VERSION)?;
        let m = r.read_u32()? as usize;
        let dim = r.read_u32()? as usize;
        let mut clusters = Vec::with_capacity(m);
        for _ in 0..m {
            let size = r.read_u32()? as usize;
            let mean = r.read_f64_vec(dim)?;
            let data = r.read_f64_vec(dim * dim)?;
            let cov = Matrix::from_vec(dim, dim, data).map_err(|e| CmgError::Parse {
                offset: r.offset(),
                message: format!("bad covariance: {e}"),
            })?;
            let chol = cholesky(&cov)?;
            clusters.push(GaussianCluster { mean, cov, chol, size });
        }
        r.finish()?;
        Ok(GaussianBank { dim, clusters })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, Oracle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_cluster_mean_and_covariance_match_oracle() {
        let features = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![2.0, 2.0],
        ])
        .unwrap();
        let shrink = 1e-3;
        let bank = fit(&features, 1, 0, shrink).unwrap();
        assert_close(bank.cluster_mean(0)[0], 1.0, 1e-12);
        assert_close(bank.cluster_mean(0)[1], 1.0, 1e-12);
        // Direct covariance oracle: deviations are all (+-1, +-1).
        let sample = [[4.0 / 3.0, 0.0], [0.0, 4.0 / 3.0]];
        let trace = sample[0][0] + sample[1][1];
        let shrink_term = shrink * trace / 2.0;
        let cov = bank.cluster_covariance(0);
        assert_close(cov.get(0, 0), sample[0][0] + shrink_term, 1e-12);
        assert_close(cov.get(1, 1), sample[1][1] + shrink_term, 1e-12);
        assert_close(cov.get(0, 1), 0.0, 1e-12);
    }

    #[test]
    fn identical_rows_give_pure_ridge() {
        let features = Matrix::from_rows(&vec![vec![3.0, -1.0]; 5]).unwrap();
        let bank = fit(&features, 1, 0, 1e-3).unwrap();
        let cov = bank.cluster_covariance(0);
        assert_close(cov.get(0, 0), 1e-3, 1e-15);
        assert_close(cov.get(1, 1), 1e-3, 1e-15);
        assert_close(cov.get(0, 1), 0.0, 1e-15);
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let features = Oracle::random_matrix(40, 4, &mut rng);
        let a = fit(&features, 3, 11, 1e-3).unwrap();
        let b = fit(&features, 3, 11, 1e-3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn score_at_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let features = Oracle::random_matrix(30, 3, &mut rng);
        let bank = fit(&features, 2, 5, 1e-3).unwrap();
        for k in 0..bank.cluster_count() {
            let s = bank.score(&bank.cluster_mean(k).to_vec()).unwrap();
            assert_close(s, 0.0, 1e-20);
        }
    }

    #[test]
    fn unit_step_with_identity_covariance_scores_one() {
        // Identical rows with shrink 1.0 force the covariance to exactly I.
        let features = Matrix::from_rows(&vec![vec![0.5, 0.5]; 4]).unwrap();
        let bank = fit(&features, 1, 0, 1.0).unwrap();
        let z = vec![1.5, 0.5];
        assert_close(bank.score(&z).unwrap(), 1.0, 1e-12);
    }

    #[test]
    fn score_matches_solve_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = rng.gen_range(1..=8);
            let sigma = Oracle::random_spd(d, &mut rng);
            let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let chol = cholesky(&sigma).unwrap();
            let bank = GaussianBank {
                dim: d,
                clusters: vec![GaussianCluster {
                    mean: mean.clone(),
                    cov: sigma.clone(),
                    chol,
                    size: 1,
                }],
            };
            let ours = bank.score(&z).unwrap();
            let diff: Vec<f64> = z.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let oracle = Oracle::quadratic_form_gauss_jordan(&sigma, &diff);
            assert_close(ours, oracle, 1e-9);
        }
    }

    #[test]
    fn adding_a_cluster_never_raises_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features = Oracle::random_matrix(30, 3, &mut rng);
        let one = fit(&features, 1, 7, 1e-3).unwrap();
        let mut more = fit(&features, 3, 7, 1e-3).unwrap();
        // Superset bank: the 3-cluster bank plus the single-cluster Gaussian.
        more.clusters.extend(one.clusters.iter().cloned());
        for _ in 0..20 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert!(more.score(&z).unwrap() <= one.score(&z).unwrap() + 1e-12);
        }
    }

    #[test]
    fn score_invariant_under_joint_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let features = Oracle::random_matrix(25, 3, &mut rng);
        let bank = fit(&features, 2, 3, 1e-3).unwrap();
        let offset = [10.0, -4.0, 2.5];
        let mut shifted_bank = bank.clone();
        for cluster in &mut shifted_bank.clusters {
            for (m, o) in cluster.mean.iter_mut().zip(offset) {
                *m += o;
            }
        }
        for _ in 0..10 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z_shift: Vec<f64> = z.iter().zip(offset).map(|(a, o)| a + o).collect();
            assert_close(
                bank.score(&z).unwrap(),
                shifted_bank.score(&z_shift).unwrap(),
                1e-9,
            );
        }
    }

    #[test]
    fn isotropic_single_cluster_tracks_euclidean_rank() {
        let features = Matrix::from_rows(&vec![vec![0.0, 0.0]; 6]).unwrap();
        let bank = fit(&features, 1, 0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let points: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let mut scored: Vec<(f64, f64)> = points
            .iter()
            .map(|z| {
                let euclid: f64 = z.iter().map(|v| v * v).sum();
                (bank.score(z).unwrap(), euclid)
            })
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in scored.windows(2) {
            assert!(w[0].1 <= w[1].1 + 1e-12, "euclidean order must match");
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let features = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let bank = fit(&features, 1, 0, 1e-3).unwrap();
        assert!(matches!(bank.score(&[1.0, 2.0, 3.0]), Err(CmgError::Shape(_))));
    }

    #[test]
    fn n_less_than_m_is_domain_error() {
        let features = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(fit(&features, 3, 0, 1e-3), Err(CmgError::Domain(_))));
    }

    #[test]
    fn bank_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let features = Oracle::random_matrix(30, 4, &mut rng);
        let bank = fit(&features, 2, 1, 1e-3).unwrap();
        let back = GaussianBank::from_bytes(&bank.to_bytes()).unwrap();
        assert_eq!(bank, back);
    }
}
