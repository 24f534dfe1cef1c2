//! Small trainable encoders plus the cross-modal contrastive matching
//! objective and the view-pair (SSD-style) objective. Gradients are exact
//! and hand-derived; the finite-difference tests hold them to 1e-4.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{CmgError, Result};
use crate::numerics::{cosine_sim, norm, Matrix};
use crate::randutil::{gaussian, shuffle, stage_rng};
use crate::synthdata::{region_pixel_indices, PairedSample};

const ENCODER_MAGIC: &[u8; 4] = b"CMGE";
const ENCODER_VERSION: u32 = 1;

/// Shared embedding width and MLP hidden width for all encoders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { embed_dim: 32, hidden_dim: 64 }
    }
}

/// Hyperparameters for one gradient-descent training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub lambda_global: f64,
    pub augment_noise_sigma: f64,
    pub augment_region_dropout_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.5,
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 64,
            seed: 1,
            weight_decay: 1e-4,
            lambda_global: 1.0,
            augment_noise_sigma: 0.05,
            augment_region_dropout_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(CmgError::Config("temperature must be > 0".into()));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 || self.lambda_global < 0.0 {
            return Err(CmgError::Config("rates and weights must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(CmgError::Config("batch_size must be at least 2".into()));
        }
        if self.augment_noise_sigma < 0.0 {
            return Err(CmgError::Config("augment_noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_region_dropout_prob) {
            return Err(CmgError::Config("augment_region_dropout_prob must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Affine,
    OneHidden,
}

/// Affine map `Wx + b` or one-hidden-layer MLP `W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

/// Forward activations cached for the backward pass.
pub struct ForwardCache {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

/// Parameter gradients shaped like an encoder's parameters.
#[derive(Debug, Clone)]
pub struct EncoderGrad {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl Encoder {
    pub fn affine(input_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (1.0 / input_dim as f64).sqrt();
        let mut w1 = Matrix::zeros(output_dim, input_dim);
        for v in w1.data_mut() {
            *v = scale * gaussian(rng);
        }
        Encoder {
            kind: EncoderKind::Affine,
            input_dim,
            hidden_dim: 0,
            output_dim,
            w1,
            b1: vec![0.0; output_dim],
            w2: Matrix::zeros(0, 0),
            b2: Vec::new(),
        }
    }

    pub fn one_hidden(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let s1 = (2.0 / input_dim as f64).sqrt();
        let s2 = (2.0 / hidden_dim as f64).sqrt();
        let mut w1 = Matrix::zeros(hidden_dim, input_dim);
        for v in w1.data_mut() {
            *v = s1 * gaussian(rng);
        }
        let mut w2 = Matrix::zeros(output_dim, hidden_dim);
        for v in w2.data_mut() {
            *v = s2 * gaussian(rng);
        }
        Encoder {
            kind: EncoderKind::OneHidden,
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; output_dim],
        }
    }

    /// Rebuilds an encoder from a flat parameter vector (the checkpoint layout).
    pub fn from_params(
        kind: EncoderKind,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        params: &[f64],
    ) -> Result<Self> {
        let mut enc = match kind {
            EncoderKind::Affine => Encoder {
                kind,
                input_dim,
                hidden_dim: 0,
                output_dim,
                w1: Matrix::zeros(output_dim, input_dim),
                b1: vec![0.0; output_dim],
                w2: Matrix::zeros(0, 0),
                b2: Vec::new(),
            },
            EncoderKind::OneHidden => Encoder {
                kind,
                input_dim,
                hidden_dim,
                output_dim,
                w1: Matrix::zeros(hidden_dim, input_dim),
                b1: vec![0.0; hidden_dim],
                w2: Matrix::zeros(output_dim, hidden_dim),
                b2: vec![0.0; output_dim],
            },
        };
        if params.len() != enc.param_count() {
            return Err(CmgError::Shape(format!(
                "expected {} parameters, got {}",
                enc.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CmgError::Domain("non-finite encoder parameter".into()));
        }
        for (i, &p) in params.iter().enumerate() {
            enc.set_param(i, p);
        }
        Ok(enc)
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        let n1 = self.w1.data().len();
        let n2 = n1 + self.b1.len();
        let n3 = n2 + self.w2.data().len();
        if idx < n1 {
            self.w1.data()[idx]
        } else if idx < n2 {
            self.b1[idx - n1]
        } else if idx < n3 {
            self.w2.data()[idx - n2]
        } else {
            self.b2[idx - n3]
        }
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        let n1 = self.w1.data().len();
        let n2 = n1 + self.b1.len();
        let n3 = n2 + self.w2.data().len();
        if idx < n1 {
            self.w1.data_mut()[idx] = v;
        } else if idx < n2 {
            self.b1[idx - n1] = v;
        } else if idx < n3 {
            self.w2.data_mut()[idx - n2] = v;
        } else {
            self.b2[idx - n3] = v;
        }
    }

    pub fn params(&self) -> Vec<f64> {
        (0..self.param_count()).map(|i| self.get_param(i)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim {
            return Err(CmgError::Shape(format!(
                "encoder expects input of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        match self.kind {
            EncoderKind::Affine => {
                let mut z = self.b1.clone();
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo += crate::numerics::dot(self.w1.row(o), x);
                }
                Ok((z, ForwardCache { hidden_pre: Vec::new(), hidden: Vec::new() }))
            }
            EncoderKind::OneHidden => {
                let mut pre = self.b1.clone();
                for (h, ph) in pre.iter_mut().enumerate() {
                    *ph += crate::numerics::dot(self.w1.row(h), x);
                }
                let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
                let mut z = self.b2.clone();
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo += crate::numerics::dot(self.w2.row(o), &hidden);
                }
                Ok((z, ForwardCache { hidden_pre: pre, hidden }))
            }
        }
    }

    /// Accumulates parameter gradients for one sample given the loss
    /// gradient `dz` on the encoder output.
    pub fn backward(&self, x: &[f64], cache: &ForwardCache, dz: &[f64], grad: &mut EncoderGrad) {
        match self.kind {
            EncoderKind::Affine => {
                for o in 0..self.output_dim {
                    grad.b1[o] += dz[o];
                    let row = grad.w1.row_mut(o);
                    for (i, xi) in x.iter().enumerate() {
                        row[i] += dz[o] * xi;
                    }
                }
            }
            EncoderKind::OneHidden => {
                let mut dh = vec![0.0; self.hidden_dim];
                for o in 0..self.output_dim {
                    grad.b2[o] += dz[o];
                    let row = grad.w2.row_mut(o);
                    for h in 0..self.hidden_dim {
                        row[h] += dz[o] * cache.hidden[h];
                        dh[h] += dz[o] * self.w2.get(o, h);
                    }
                }
                for h in 0..self.hidden_dim {
                    if cache.hidden_pre[h] <= 0.0 {
                        dh[h] = 0.0;
                    }
                    grad.b1[h] += dh[h];
                    let row = grad.w1.row_mut(h);
                    for (i, xi) in x.iter().enumerate() {
                        row[i] += dh[h] * xi;
                    }
                }
            }
        }
    }

    /// One SGD step; weight decay applies to the weight matrices only.
    pub fn apply_grad(&mut self, grad: &EncoderGrad, lr: f64, weight_decay: f64) {
        for (w, g) in self.w1.data_mut().iter_mut().zip(grad.w1.data()) {
            *w -= lr * (g + weight_decay * *w);
        }
        for (b, g) in self.b1.iter_mut().zip(&grad.b1) {
            *b -= lr * g;
        }
        for (w, g) in self.w2.data_mut().iter_mut().zip(grad.w2.data()) {
            *w -= lr * (g + weight_decay * *w);
        }
        for (b, g) in self.b2.iter_mut().zip(&grad.b2) {
            *b -= lr * g;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(ENCODER_MAGIC).u32(ENCODER_VERSION);
        w.u8(match self.kind {
            EncoderKind::Affine => 0,
            EncoderKind::OneHidden => 1,
        });
        w.u32(self.input_dim as u32)
            .u32(self.hidden_dim as u32)
            .u32(self.output_dim as u32)
            .f64_slice(&self.params());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(ENCODER_MAGIC)?;
        r.expect_version(ENCODER_VERSION)?;
        let kind = match r.read_u8()? {
            0 => EncoderKind::Affine,
            1 => EncoderKind::OneHidden,
            k => {
                return Err(CmgError::Parse {
                    offset: r.offset() - 1,
                    message: format!("unknown encoder kind {k}"),
                })
            }
        };
        let input_dim = r.read_u32()? as usize;
        let hidden_dim = r.read_u32()? as usize;
        let output_dim = r.read_u32()? as usize;
        let count = match kind {
            EncoderKind::Affine => output_dim * input_dim + output_dim,
            EncoderKind::OneHidden => {
                hidden_dim * input_dim + hidden_dim + output_dim * hidden_dim + output_dim
            }
        };
        let params = r.read_f64_vec(count)?;
        r.finish()?;
        Encoder::from_params(kind, input_dim, hidden_dim, output_dim, &params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl EncoderGrad {
    pub fn zeros_like(enc: &Encoder) -> Self {
        EncoderGrad {
            w1: Matrix::zeros(enc.w1.rows(), enc.w1.cols()),
            b1: vec![0.0; enc.b1.len()],
            w2: Matrix::zeros(enc.w2.rows(), enc.w2.cols()),
            b2: vec![0.0; enc.b2.len()],
        }
    }

    pub fn reset(&mut self) {
        for v in self.w1.data_mut() {
            *v = 0.0;
        }
        for v in self.b1.iter_mut() {
            *v = 0.0;
        }
        for v in self.w2.data_mut() {
            *v = 0.0;
        }
        for v in self.b2.iter_mut() {
            *v = 0.0;
        }
    }

    pub fn get(&self, idx: usize) -> f64 {
        let n1 = self.w1.data().len();
        let n2 = n1 + self.b1.len();
        let n3 = n2 + self.w2.data().len();
        if idx < n1 {
            self.w1.data()[idx]
        } else if idx < n2 {
            self.b1[idx - n1]
        } else if idx < n3 {
            self.w2.data()[idx - n2]
        } else {
            self.b2[idx - n3]
        }
    }
}

/// Gradient of cosine similarity folded into the two accumulators:
/// `du += coeff * d sim/d u`, `dv += coeff * d sim/d v`.
fn cosine_backward(u: &[f64], v: &[f64], sim: f64, coeff: f64, du: &mut [f64], dv: &mut [f64]) {
    let nu = norm(u);
    let nv = norm(v);
    let inv = 1.0 / (nu * nv);
    for k in 0..u.len() {
        du[k] += coeff * (v[k] * inv - sim * u[k] / (nu * nu));
        dv[k] += coeff * (u[k] * inv - sim * v[k] / (nv * nv));
    }
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Contrastive matching loss over aligned text/image embedding batches.
///
/// Per row i the loss is `-sim(zT_i, zI_i)/tau + log sum_{j != i}
/// exp(sim(zT_i, zI_j)/tau)`, averaged over rows; the positive pair is
/// excluded from the denominator, so at n = 2 the loss can go negative.
/// Returns the loss and its gradients with respect to both embedding
/// matrices.
pub fn contrastive_loss(z_t: &Matrix, z_i: &Matrix, tau: f64) -> Result<(f64, Matrix, Matrix)> {
    if z_t.rows() != z_i.rows() || z_t.cols() != z_i.cols() {
        return Err(CmgError::Shape("embedding batches must be aligned".into()));
    }
    let n = z_t.rows();
    if n < 2 {
        return Err(CmgError::Domain("contrastive loss needs at least 2 rows".into()));
    }
    if tau <= 0.0 {
        return Err(CmgError::Domain("temperature must be positive".into()));
    }
    let mut sims = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sims.set(i, j, cosine_sim(z_t.row(i), z_i.row(j))?);
        }
    }
    let mut loss = 0.0;
    let mut d_sims = Matrix::zeros(n, n);
    for i in 0..n {
        let negatives: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sims.get(i, j) / tau).collect();
        let lse = log_sum_exp(&negatives);
        loss += -sims.get(i, i) / tau + lse;
        d_sims.set(i, i, -1.0 / (n as f64 * tau));
        for j in 0..n {
            if j == i {
                continue;
            }
            let p = (sims.get(i, j) / tau - lse).exp();
            d_sims.set(i, j, p / (n as f64 * tau));
        }
    }
    loss /= n as f64;
    let mut d_zt = Matrix::zeros(n, z_t.cols());
    let mut d_zi = Matrix::zeros(n, z_i.cols());
    for i in 0..n {
        for j in 0..n {
            let coeff = d_sims.get(i, j);
            if coeff == 0.0 {
                continue;
            }
            // Split borrows: gradient rows live in different matrices.
            let mut du = vec![0.0; z_t.cols()];
            let mut dv = vec![0.0; z_i.cols()];
            cosine_backward(z_t.row(i), z_i.row(j), sims.get(i, j), coeff, &mut du, &mut dv);
            for (a, b) in d_zt.row_mut(i).iter_mut().zip(&du) {
                *a += b;
            }
            for (a, b) in d_zi.row_mut(j).iter_mut().zip(&dv) {
                *a += b;
            }
        }
    }
    if !loss.is_finite() {
        return Err(CmgError::Numerical("contrastive loss is non-finite".into()));
    }
    Ok((loss, d_zt, d_zi))
}

/// View-pair objective used by the image-only baseline and the latent
/// stage: the contrastive form applied to two augmented views of the same
/// batch.
pub fn ssd_loss(z_a: &Matrix, z_b: &Matrix, tau: f64) -> Result<(f64, Matrix, Matrix)> {
    contrastive_loss(z_a, z_b, tau)
}

/// Cosine similarity of one text embedding against every candidate image
/// embedding. The corpus-level normalization of the matching score is a
/// shared positive constant for a fixed pool, so ranking by raw cosine
/// preserves the argmax.
pub fn matching_scores(z_t: &[f64], candidates: &Matrix) -> Result<Vec<f64>> {
    if candidates.rows() == 0 {
        return Err(CmgError::Domain("matching_scores needs candidates".into()));
    }
    (0..candidates.rows()).map(|j| cosine_sim(z_t, candidates.row(j))).collect()
}

/// Additive Gaussian pixel noise plus (with the given probability) zeroing
/// one uniformly chosen grid region.
pub fn augment_image(
    image: &[f64],
    side: usize,
    grid: usize,
    noise_sigma: f64,
    region_dropout_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out: Vec<f64> = image.iter().map(|v| v + noise_sigma * gaussian(rng)).collect();
    if region_dropout_prob > 0.0 && rng.gen_range(0.0..1.0) < region_dropout_prob {
        let region = rng.gen_range(0..grid * grid);
        for p in region_pixel_indices(side, grid, region) {
            out[p] = 0.0;
        }
    }
    out
}

/// Per-epoch record of a training stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub loss: Vec<f64>,
    pub metric: Vec<f64>,
}

pub struct MatchingModels {
    pub image_enc: Encoder,
    pub text_enc: Encoder,
    pub log: TrainLog,
}

/// Fraction of texts whose top-scoring image within a candidate chunk
/// belongs to the text's own class. Chunks of `chunk_size` candidates.
pub fn retrieval_accuracy(
    samples: &[&PairedSample],
    image_enc: &Encoder,
    text_enc: &Encoder,
    chunk_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(CmgError::Domain("retrieval over an empty set".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in samples.chunks(chunk_size) {
        let mut image_rows = Vec::with_capacity(chunk.len());
        for s in chunk {
            image_rows.push(image_enc.forward(&s.image)?);
        }
        let images = Matrix::from_rows(&image_rows)?;
        for s in chunk {
            let zt = text_enc.forward(&s.text)?;
            let scores = matching_scores(&zt, &images)?;
            let mut best = 0;
            for (j, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = j;
                }
            }
            if chunk[best].class_id == s.class_id {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Trains the cross-modal matching encoders by mini-batch gradient descent
/// on the contrastive loss. A fifth of the input is held out and scored for
/// text-to-image retrieval after every epoch. Deterministic for a fixed
/// (data, config, seed).
pub fn train_matching(
    train: &[PairedSample],
    cfg: &TrainConfig,
    arch: &ArchConfig,
) -> Result<MatchingModels> {
    cfg.validate()?;
    if train.len() < 4 {
        return Err(CmgError::Domain("train_matching needs at least 4 samples".into()));
    }
    let image_dim = train[0].image.len();
    let text_dim = train[0].text.len();

    let mut init_rng = stage_rng(cfg.seed, 10);
    let mut image_enc = Encoder::one_hidden(image_dim, arch.hidden_dim, arch.embed_dim, &mut init_rng);
    let mut text_enc = Encoder::affine(text_dim, arch.embed_dim, &mut init_rng);

    let mut split_rng = stage_rng(cfg.seed, 11);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    shuffle(&mut indices, &mut split_rng);
    let n_eval = train.len() / 5;
    let (eval_idx, train_idx) = indices.split_at(n_eval);
    let eval_samples: Vec<&PairedSample> = if eval_idx.is_empty() {
        train_idx.iter().map(|&i| &train[i]).collect()
    } else {
        eval_idx.iter().map(|&i| &train[i]).collect()
    };
    let mut order: Vec<usize> = train_idx.to_vec();

    let mut epoch_rng = stage_rng(cfg.seed, 12);
    let mut grad_i = EncoderGrad::zeros_like(&image_enc);
    let mut grad_t = EncoderGrad::zeros_like(&text_enc);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut epoch_rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut zt_rows = Vec::with_capacity(batch.len());
            let mut zi_rows = Vec::with_capacity(batch.len());
            let mut caches_t = Vec::with_capacity(batch.len());
            let mut caches_i = Vec::with_capacity(batch.len());
            for &idx in batch {
                let (zt, ct) = text_enc.forward_cached(&train[idx].text)?;
                let (zi, ci) = image_enc.forward_cached(&train[idx].image)?;
                zt_rows.push(zt);
                zi_rows.push(zi);
                caches_t.push(ct);
                caches_i.push(ci);
            }
            let z_t = Matrix::from_rows(&zt_rows)
                .map_err(|_| CmgError::Diverged { stage: "matching", epoch })?;
            let z_i = Matrix::from_rows(&zi_rows)
                .map_err(|_| CmgError::Diverged { stage: "matching", epoch })?;
            let (loss, d_zt, d_zi) = contrastive_loss(&z_t, &z_i, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(CmgError::Diverged { stage: "matching", epoch });
            }
            grad_t.reset();
            grad_i.reset();
            for (k, &idx) in batch.iter().enumerate() {
                text_enc.backward(&train[idx].text, &caches_t[k], d_zt.row(k), &mut grad_t);
                image_enc.backward(&train[idx].image, &caches_i[k], d_zi.row(k), &mut grad_i);
            }
            text_enc.apply_grad(&grad_t, cfg.learning_rate, cfg.weight_decay);
            image_enc.apply_grad(&grad_i, cfg.learning_rate, cfg.weight_decay);
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();
        }
        log.loss.push(if seen > 0 { epoch_loss / seen as f64 } else { 0.0 });
        log.metric.push(retrieval_accuracy(&eval_samples, &image_enc, &text_enc, 64)?);
    }
    Ok(MatchingModels { image_enc, text_enc, log })
}
