//! Dense linear algebra, statistics, and ranking metrics shared by the rest
//! of the crate. Everything here is a pure function over immutable inputs;
//! no learning logic lives in this module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CmgError, Result};

/// Row-major dense matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CmgError::Shape(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CmgError::Domain("matrix contains a non-finite entry".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CmgError::Shape("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CmgError::Shape("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CmgError::Shape(format!(
            "cosine_sim length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(CmgError::Domain("cosine_sim of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub(crate) fn cholesky(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(CmgError::Shape("cholesky needs a square matrix".into()));
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(CmgError::Numerical(format!(
                        "cholesky pivot {s} at index {i}; matrix not positive definite"
                    )));
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves L y = b by forward substitution.
pub(crate) fn forward_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    y
}

/// Solves L^T x = y by back substitution.
pub(crate) fn back_substitute(l: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Solves (A + eps·I) x = b for symmetric positive semi-definite A.
pub fn ridge_solve(a: &Matrix, b: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(CmgError::Shape("ridge_solve needs a square matrix".into()));
    }
    if a.rows() != b.len() {
        return Err(CmgError::Shape(format!(
            "ridge_solve rhs length {} vs matrix size {}",
            b.len(),
            a.rows()
        )));
    }
    if eps < 0.0 {
        return Err(CmgError::Domain("ridge_solve eps must be >= 0".into()));
    }
    let n = a.rows();
    let mut reg = a.clone();
    for i in 0..n {
        reg.set(i, i, reg.get(i, i) + eps);
    }
    let l = cholesky(&reg)
        .map_err(|_| CmgError::Numerical("ridge_solve: factorization failed after regularization".into()))?;
    let y = forward_substitute(&l, b);
    let x = back_substitute(&l, &y);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CmgError::Numerical("ridge_solve produced a non-finite solution".into()));
    }
    Ok(x)
}

/// Shannon entropy, in bits, of the bin-frequency distribution of `values`
/// discretized into `bins` equal-width bins over `range`. Values outside the
/// range are clipped into it; empty bins contribute nothing.
pub fn histogram_entropy(values: &[f64], bins: usize, range: (f64, f64)) -> Result<f64> {
    if values.is_empty() {
        return Err(CmgError::Domain("histogram_entropy of empty input".into()));
    }
    if bins < 2 {
        return Err(CmgError::Domain("histogram_entropy needs at least 2 bins".into()));
    }
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(CmgError::Domain("histogram_entropy range must satisfy lo < hi".into()));
    }
    let mut counts = vec![0usize; bins];
    let width = hi - lo;
    for &v in values {
        let c = v.clamp(lo, hi);
        let mut idx = ((c - lo) / width * bins as f64).floor() as usize;
        if idx >= bins {
            idx = bins - 1;
        }
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    Ok(h.max(0.0))
}

fn pairwise_distances(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let mut s = 0.0;
            for k in 0..x.cols() {
                let diff = x.get(i, k) - x.get(j, k);
                s += diff * diff;
            }
            let dist = s.sqrt();
            d.set(i, j, dist);
            d.set(j, i, dist);
        }
    }
    d
}

fn double_center(d: &mut Matrix) {
    let n = d.rows();
    let mut row_means = vec![0.0; n];
    let mut grand = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += d.get(i, j);
        }
        row_means[i] = s / n as f64;
        grand += s;
    }
    grand /= (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            let v = d.get(i, j) - row_means[i] - row_means[j] + grand;
            d.set(i, j, v);
        }
    }
}

/// Sample distance correlation between the rows of `x` and `y`, in [0, 1].
/// Returns 0 when either distance variance vanishes (constant sample).
pub fn distance_correlation(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(CmgError::Shape(format!(
            "distance_correlation row mismatch: {} vs {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 4 {
        return Err(CmgError::Domain("distance_correlation needs at least 4 rows".into()));
    }
    let n = x.rows();
    let mut a = pairwise_distances(x);
    let mut b = pairwise_distances(y);
    double_center(&mut a);
    double_center(&mut b);
    let n2 = (n * n) as f64;
    let mut dcov2 = 0.0;
    let mut dvar_x = 0.0;
    let mut dvar_y = 0.0;
    for (av, bv) in a.data().iter().zip(b.data()) {
        dcov2 += av * bv;
        dvar_x += av * av;
        dvar_y += bv * bv;
    }
    dcov2 /= n2;
    dvar_x /= n2;
    dvar_y /= n2;
    if dvar_x <= 0.0 || dvar_y <= 0.0 {
        return Ok(0.0);
    }
    let r2 = (dcov2 / (dvar_x * dvar_y).sqrt()).max(0.0);
    Ok(r2.sqrt().min(1.0))
}

/// Binary ground-truth tag for a scored sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomaly,
}

/// Anomaly scores paired with ground-truth labels, the input to the
/// ranking metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(CmgError::Shape("scores and labels must have equal length".into()));
        }
        Ok(ScoredLabels { scores, labels })
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|l| **l == Label::Anomaly).count();
        (pos, self.labels.len() - pos)
    }

    fn check_both_classes(&self) -> Result<(usize, usize)> {
        let (pos, neg) = self.class_counts();
        if pos == 0 || neg == 0 {
            return Err(CmgError::Domain("ranking metrics need both label classes".into()));
        }
        Ok((pos, neg))
    }
}

/// Area under the ROC curve with the anomaly class as positive, computed
/// from mid-ranks so ties earn half credit.
pub fn auroc(s: &ScoredLabels) -> Result<f64> {
    let (pos, neg) = s.check_both_classes()?;
    let n = s.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s.scores[i].partial_cmp(&s.scores[j]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && s.scores[order[j]] == s.scores[order[i]] {
            j += 1;
        }
        // 1-based mid-rank shared by the tie group [i, j)
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if s.labels[idx] == Label::Anomaly {
                rank_sum_pos += mid_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve (anomaly positive), step-wise:
/// thresholds sweep the distinct scores in decreasing order and each recall
/// increment is weighted by the precision at the new threshold.
pub fn auprc(s: &ScoredLabels) -> Result<f64> {
    let (pos, _neg) = s.check_both_classes()?;
    let n = s.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s.scores[j].partial_cmp(&s.scores[i]).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && s.scores[order[j]] == s.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            match s.labels[idx] {
                Label::Anomaly => tp += 1,
                Label::Normal => fp += 1,
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Result of a k-means run: per-point cluster ids plus the final centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &Matrix) -> usize {
    let mut best = 0;
    let mut best_d = squared_dist(point, centroids.row(0));
    for c in 1..centroids.rows() {
        let d = squared_dist(point, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Lloyd's algorithm with seeded initialization. Initial centroids are k
/// pairwise-distinct points chosen from a seeded permutation (falling back
/// to duplicates only when fewer distinct points exist); empty clusters are
/// re-seeded from the point farthest from its own centroid. Deterministic
/// for a fixed (points, k, seed, max_iter).
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<KmeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(CmgError::Domain("kmeans needs k >= 1".into()));
    }
    if k > n {
        return Err(CmgError::Domain(format!("kmeans k={k} exceeds point count {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &idx in &perm {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().all(|&c| points.row(c) != points.row(idx)) {
            chosen.push(idx);
        }
    }
    for &idx in &perm {
        if chosen.len() == k {
            break;
        }
        if !chosen.contains(&idx) {
            chosen.push(idx);
        }
    }
    let mut centroids = Matrix::zeros(k, points.cols());
    for (c, &idx) in chosen.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(points.row(idx));
    }

    let mut assignments = vec![0usize; n];
    let mut prev_assignments: Option<Vec<usize>> = None;
    for _ in 0..max_iter {
        for i in 0..n {
            assignments[i] = nearest_centroid(points.row(i), &centroids);
        }
        // Re-seed empty clusters from the farthest point.
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        let mut claimed: Vec<usize> = Vec::new();
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let mut far_idx = None;
            let mut far_d = -1.0;
            for i in 0..n {
                if claimed.contains(&i) || sizes[assignments[i]] <= 1 {
                    continue;
                }
                let d = squared_dist(points.row(i), centroids.row(assignments[i]));
                if d > far_d {
                    far_d = d;
                    far_idx = Some(i);
                }
            }
            if let Some(i) = far_idx {
                sizes[assignments[i]] -= 1;
                assignments[i] = c;
                sizes[c] = 1;
                centroids.row_mut(c).copy_from_slice(points.row(i));
                claimed.push(i);
            }
        }
        if prev_assignments.as_deref() == Some(&assignments[..]) {
            break;
        }
        prev_assignments = Some(assignments.clone());
        // Mean update.
        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assignments[i];
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for v in sums.row_mut(c).iter_mut() {
                    *v /= counts[c] as f64;
                }
                centroids.row_mut(c).copy_from_slice(sums.row(c));
            }
        }
    }
    for i in 0..n {
        assignments[i] = nearest_centroid(points.row(i), &centroids);
    }
    Ok(KmeansResult { assignments, centroids })
}

/// Within-cluster sum of squared distances for a k-means result.
pub fn kmeans_inertia(points: &Matrix, result: &KmeansResult) -> f64 {
    (0..points.rows())
        .map(|i| squared_dist(points.row(i), result.centroids.row(result.assignments[i])))
        .sum()
}
