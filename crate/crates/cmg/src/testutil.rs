//! Independent oracle implementations and helpers for the test suites.
//!
//! Everything in here deliberately avoids the code paths it is used to
//! check: the ranking oracles count pairs and sweep thresholds naively,
//! the pseudo-inverse oracle goes through a Jacobi eigendecomposition
//! instead of the Cholesky solver, and the quadratic-form oracle uses
//! Gauss-Jordan elimination.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Label, Matrix, ScoredLabels};

pub fn assert_close(actual: f64, expected: f64, tol: f64) {
    assert!(
        (actual - expected).abs() <= tol,
        "expected {expected}, got {actual} (tol {tol})"
    );
}

/// Relative error with a floor on the denominator, for gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

pub fn rand_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = crate::numerics::norm(&v);
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub struct Oracle;

impl Oracle {
    pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    pub fn random_normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| Self::gaussian(rng)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Random symmetric positive-definite matrix B^T B + I.
    pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let b = Self::random_matrix(n, n, rng);
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    s += b.get(k, i) * b.get(k, j);
                }
                a.set(i, j, s);
            }
        }
        a
    }

    pub fn random_scored(n: usize, rng: &mut ChaCha8Rng) -> ScoredLabels {
        loop {
            let labels: Vec<Label> = (0..n)
                .map(|_| if rng.gen_bool(0.4) { Label::Anomaly } else { Label::Normal })
                .collect();
            if labels.iter().any(|l| *l == Label::Anomaly)
                && labels.iter().any(|l| *l == Label::Normal)
            {
                // Quantized scores so tie handling actually gets exercised.
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64 / 10.0).collect();
                return ScoredLabels::new(scores, labels).unwrap();
            }
        }
    }

    /// AUROC by brute-force pair counting with half credit for ties.
    pub fn auroc_pairwise(s: &ScoredLabels) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, li) in s.labels.iter().enumerate() {
            if *li != Label::Anomaly {
                continue;
            }
            for (j, lj) in s.labels.iter().enumerate() {
                if *lj != Label::Normal {
                    continue;
                }
                pairs += 1.0;
                if s.scores[i] > s.scores[j] {
                    wins += 1.0;
                } else if s.scores[i] == s.scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// AUPRC by an exhaustive threshold sweep: every distinct score is a
    /// threshold, counts are recomputed from scratch at each one.
    pub fn auprc_threshold_sweep(s: &ScoredLabels) -> f64 {
        let mut thresholds: Vec<f64> = s.scores.clone();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = s.labels.iter().filter(|l| **l == Label::Anomaly).count() as f64;
        let mut prev_recall = 0.0;
        let mut area = 0.0;
        for t in thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (score, label) in s.scores.iter().zip(&s.labels) {
                if *score >= t {
                    match label {
                        Label::Anomaly => tp += 1.0,
                        Label::Normal => fp += 1.0,
                    }
                }
            }
            let recall = tp / pos;
            let precision = tp / (tp + fp);
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    /// Solves (A + eps I) x = b through an eigendecomposition pseudo-inverse.
    pub fn pinv_solve_regularized(a: &Matrix, b: &[f64], eps: f64) -> Vec<f64> {
        let n = a.rows();
        let mut reg = a.clone();
        for i in 0..n {
            reg.set(i, i, reg.get(i, i) + eps);
        }
        let (eigvals, eigvecs) = Self::jacobi_eigen(&reg);
        // x = V diag(1/lambda) V^T b, dropping near-zero eigenvalues.
        let mut vtb = vec![0.0; n];
        for k in 0..n {
            for i in 0..n {
                vtb[k] += eigvecs.get(i, k) * b[i];
            }
        }
        let max_ev = eigvals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cutoff = max_ev * 1e-14;
        let mut x = vec![0.0; n];
        for k in 0..n {
            if eigvals[k].abs() <= cutoff {
                continue;
            }
            let coef = vtb[k] / eigvals[k];
            for i in 0..n {
                x[i] += eigvecs.get(i, k) * coef;
            }
        }
        x
    }

    /// Classic cyclic Jacobi eigendecomposition for symmetric matrices.
    /// Returns (eigenvalues, eigenvector columns).
    pub fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
        let n = a.rows();
        let mut m = a.clone();
        let mut v = Matrix::zeros(n, n);
        for i in 0..n {
            v.set(i, i, 1.0);
        }
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    off += m.get(i, j).powi(2);
                }
            }
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = m.get(p, q);
                    if apq.abs() < 1e-30 {
                        continue;
                    }
                    let app = m.get(p, p);
                    let aqq = m.get(q, q);
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m.get(k, p);
                        let mkq = m.get(k, q);
                        m.set(k, p, c * mkp - s * mkq);
                        m.set(k, q, s * mkp + c * mkq);
                    }
                    for k in 0..n {
                        let mpk = m.get(p, k);
                        let mqk = m.get(q, k);
                        m.set(p, k, c * mpk - s * mqk);
                        m.set(q, k, s * mpk + c * mqk);
                    }
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
        let eigvals: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
        (eigvals, v)
    }

    /// Quadratic form d^T S^{-1} d by Gauss-Jordan elimination with partial
    /// pivoting, independent of the Cholesky path used by the detector.
    pub fn quadratic_form_gauss_jordan(sigma: &Matrix, d: &[f64]) -> f64 {
        let n = sigma.rows();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = sigma.row(i).to_vec();
                row.push(d[i]);
                row
            })
            .collect();
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if aug[r][col].abs() > aug[pivot][col].abs() {
                    pivot = r;
                }
            }
            aug.swap(col, pivot);
            let pv = aug[col][col];
            for c in col..=n {
                aug[col][c] /= pv;
            }
            for r in 0..n {
                if r != col && aug[r][col] != 0.0 {
                    let factor = aug[r][col];
                    for c in col..=n {
                        aug[r][c] -= factor * aug[col][c];
                    }
                }
            }
        }
        let x: Vec<f64> = (0..n).map(|i| aug[i][n]).collect();
        d.iter().zip(&x).map(|(a, b)| a * b).sum()
    }
}
