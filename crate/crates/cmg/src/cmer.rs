//! Local guidance: enumerate grid masks, pick the masked variant that best
//! matches the paired text, train a detector that reproduces that choice
//! from pixels alone, and audit the entropy reduction.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::codec::{ByteReader, ByteWriter};
use crate::encoders::{matching_scores, Encoder, TrainConfig, TrainLog};
use crate::error::{CmgError, Result};
use crate::numerics::{histogram_entropy, Matrix};
use crate::randutil::{gaussian, shuffle, stage_rng};
use crate::synthdata::{region_pixel_indices, PairedSample};

const RID_MAGIC: &[u8; 4] = b"CMGR";
const RID_VERSION: u32 = 1;

/// Hidden widths of the redundant-region detector.
pub const RID_WIDTHS: [usize; 3] = [512, 256, 128];

/// Pixel-value histogram bins used by the entropy audit.
pub const ENTROPY_BINS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Replace the region's pixels with 0.
    Hard,
    /// Scale the region's pixels by a small constant.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub grid: usize,
    pub mode: MaskMode,
    pub soft_constant: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { grid: 2, mode: MaskMode::Soft, soft_constant: 0.1 }
    }
}

impl MaskSpec {
    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(CmgError::Config("mask grid must be at least 2".into()));
        }
        if self.mode == MaskMode::Soft && !(self.soft_constant > 0.0 && self.soft_constant < 1.0) {
            return Err(CmgError::Config("soft_constant must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// All masked variants of one image: variant m masks region m.
pub fn enumerate_masks(image: &[f64], side: usize, spec: &MaskSpec) -> Result<Vec<Vec<f64>>> {
    if side * side != image.len() {
        return Err(CmgError::Shape(format!(
            "image of length {} is not {side}x{side}",
            image.len()
        )));
    }
    if side % spec.grid != 0 {
        return Err(CmgError::Shape(format!(
            "image side {side} not divisible by grid {}",
            spec.grid
        )));
    }
    let mut variants = Vec::with_capacity(spec.regions());
    for region in 0..spec.regions() {
        let mut v = image.to_vec();
        for p in region_pixel_indices(side, spec.grid, region) {
            v[p] = match spec.mode {
                MaskMode::Hard => 0.0,
                MaskMode::Soft => v[p] * spec.soft_constant,
            };
        }
        variants.push(v);
    }
    Ok(variants)
}

/// The masked variants of one training image together with the one-hot
/// label of the text-selected variant.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub variants: Vec<Vec<f64>>,
    pub label: Vec<f64>,
}

impl MaskSet {
    pub fn label_index(&self) -> usize {
        self.label.iter().position(|&v| v == 1.0).unwrap_or(0)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let ones = self.label.iter().filter(|&&v| v == 1.0).count();
        let zeros = self.label.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != self.label.len() || self.label.len() != self.variants.len() {
            return Err(CmgError::Data("mask-set label is not one-hot over the variants".into()));
        }
        Ok(())
    }
}

/// Index of the variant whose embedding best matches the text embedding,
/// plus the one-hot label. Ties resolve to the lowest index.
pub fn select_best_mask(
    text: &[f64],
    variants: &[Vec<f64>],
    text_enc: &Encoder,
    image_enc: &Encoder,
) -> Result<(usize, Vec<f64>)> {
    if variants.is_empty() {
        return Err(CmgError::Domain("select_best_mask needs variants".into()));
    }
    let zt = text_enc.forward(text)?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        rows.push(image_enc.forward(v)?);
    }
    let scores = matching_scores(&zt, &Matrix::from_rows(&rows)?)?;
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    let mut label = vec![0.0; variants.len()];
    label[best] = 1.0;
    Ok((best, label))
}

/// Builds a labeled mask set for every training sample.
pub fn build_mask_sets(
    samples: &[PairedSample],
    side: usize,
    spec: &MaskSpec,
    text_enc: &Encoder,
    image_enc: &Encoder,
) -> Result<Vec<MaskSet>> {
    samples
        .iter()
        .map(|s| {
            let variants = enumerate_masks(&s.image, side, spec)?;
            let (_, label) = select_best_mask(&s.text, &variants, text_enc, image_enc)?;
            Ok(MaskSet { variants, label })
        })
        .collect()
}

/// Three hidden fully-connected layers (512/256/128, rectified) over the
/// flattened masked image, with a scalar output score.
#[derive(Debug, Clone, PartialEq)]
pub struct RidModel {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    layers: Vec<(Matrix, Vec<f64>)>,
}

impl RidModel {
    pub fn new(input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut in_dim = input_dim;
        for &w in RID_WIDTHS.iter() {
            let scale = (2.0 / in_dim as f64).sqrt();
            let mut m = Matrix::zeros(w, in_dim);
            for v in m.data_mut() {
                *v = scale * gaussian(rng);
            }
            layers.push((m, vec![0.0; w]));
            in_dim = w;
        }
        layers.push((Matrix::zeros(1, in_dim), vec![0.0; 1]));
        let scale = (1.0 / in_dim as f64).sqrt();
        for v in layers.last_mut().unwrap().0.data_mut() {
            *v = scale * gaussian(rng);
        }
        RidModel { input_dim, widths: RID_WIDTHS.to_vec(), layers }
    }

    /// All-zero parameters; every input scores 0.
    pub fn zeroed(input_dim: usize) -> Self {
        let mut layers = Vec::new();
        let mut in_dim = input_dim;
        for &w in RID_WIDTHS.iter() {
            layers.push((Matrix::zeros(w, in_dim), vec![0.0; w]));
            in_dim = w;
        }
        layers.push((Matrix::zeros(1, in_dim), vec![0.0; 1]));
        RidModel { input_dim, widths: RID_WIDTHS.to_vec(), layers }
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
        if x.len() != self.input_dim {
            return Err(CmgError::Shape(format!(
                "rid expects input of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let mut next = b.clone();
            for (o, nv) in next.iter_mut().enumerate() {
                *nv += crate::numerics::dot(w.row(o), &cur);
            }
            if li + 1 < self.layers.len() {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            activations.push(next.clone());
            cur = next;
        }
        Ok((cur[0], activations))
    }

    /// Backprop of d(score) * dscore into parameter gradients.
    fn backward(&self, x: &[f64], activations: &[Vec<f64>], dscore: f64, grads: &mut RidGrad) {
        let mut delta = vec![dscore];
        for li in (0..self.layers.len()).rev() {
            let input: &[f64] = if li == 0 { x } else { &activations[li - 1] };
            let (w, _) = &self.layers[li];
            let (gw, gb) = &mut grads.layers[li];
            let mut d_input = vec![0.0; input.len()];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                let row = gw.row_mut(o);
                for (i, xi) in input.iter().enumerate() {
                    row[i] += d * xi;
                    d_input[i] += d * w.get(o, i);
                }
            }
            if li > 0 {
                // Rectifier mask on the previous layer's activation.
                for (dv, av) in d_input.iter_mut().zip(&activations[li - 1]) {
                    if *av <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            delta = d_input;
        }
    }

    fn apply_grad(&mut self, grads: &RidGrad, lr: f64, weight_decay: f64) {
        for ((w, b), (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            for (wv, gv) in w.data_mut().iter_mut().zip(gw.data()) {
                *wv -= lr * (gv + weight_decay * *wv);
            }
            for (bv, gv) in b.iter_mut().zip(gb) {
                *bv -= lr * gv;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.data().len() + b.len()).sum()
    }

    pub fn get_param(&self, mut idx: usize) -> f64 {
        for (w, b) in &self.layers {
            if idx < w.data().len() {
                return w.data()[idx];
            }
            idx -= w.data().len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, v: f64) {
        for (w, b) in &mut self.layers {
            if idx < w.data().len() {
                w.data_mut()[idx] = v;
                return;
            }
            idx -= w.data().len();
            if idx < b.len() {
                b[idx] = v;
                return;
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(RID_MAGIC).u32(RID_VERSION).u32(self.input_dim as u32);
        w.u32(self.widths.len() as u32);
        for &width in &self.widths {
            w.u32(width as u32);
        }
        for (m, b) in &self.layers {
            w.f64_slice(m.data()).f64_slice(b);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(RID_MAGIC)?;
        r.expect_version(RID_VERSION)?;
        let input_dim = r.read_u32()? as usize;
        let n_widths = r.read_u32()? as usize;
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(r.read_u32()? as usize);
        }
        let mut layers = Vec::new();
        let mut in_dim = input_dim;
        for &w in widths.iter().chain(std::iter::once(&1)) {
            let data = r.read_f64_vec(w * in_dim)?;
            let m = Matrix::from_vec(w, in_dim, data).map_err(|e| CmgError::Parse {
                offset: r.offset(),
                message: format!("bad layer: {e}"),
            })?;
            let b = r.read_f64_vec(w)?;
            layers.push((m, b));
            in_dim = w;
        }
        r.finish()?;
        Ok(RidModel { input_dim, widths, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct RidGrad {
    layers: Vec<(Matrix, Vec<f64>)>,
}

impl RidGrad {
    fn zeros_like(model: &RidModel) -> Self {
        RidGrad {
            layers: model
                .layers
                .iter()
                .map(|(w, b)| (Matrix::zeros(w.rows(), w.cols()), vec![0.0; b.len()]))
                .collect(),
        }
    }

    fn reset(&mut self) {
        for (w, b) in &mut self.layers {
            for v in w.data_mut() {
                *v = 0.0;
            }
            for v in b.iter_mut() {
                *v = 0.0;
            }
        }
    }
}

/// Cross-entropy of the labeled variant against the softmax over the M
/// variant scores, plus the gradient on each variant's score.
pub fn rid_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + m - logits[label];
    let mut d = Vec::with_capacity(logits.len());
    for (k, e) in exps.iter().enumerate() {
        let p = e / total;
        d.push(p - if k == label { 1.0 } else { 0.0 });
    }
    (loss, d)
}

pub struct RidTrainResult {
    pub model: RidModel,
    /// loss per epoch, training-set accuracy per epoch.
    pub log: TrainLog,
    /// Accuracy per epoch on the internal held-out fifth.
    pub heldout_acc: Vec<f64>,
}

fn rid_accuracy(model: &RidModel, sets: &[&MaskSet]) -> Result<f64> {
    if sets.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for set in sets {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, v) in set.variants.iter().enumerate() {
            let s = model.score(v)?;
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        if best == set.label_index() {
            hits += 1;
        }
    }
    Ok(hits as f64 / sets.len() as f64)
}

/// Trains the redundant-region detector on labeled mask sets with mini-batch
/// gradient descent on the softmax cross-entropy over variant scores. This
/// loss trains the detector only; it never touches the latent space.
pub fn train_rid(mask_sets: &[MaskSet], cfg: &TrainConfig) -> Result<RidTrainResult> {
    cfg.validate()?;
    if mask_sets.is_empty() {
        return Err(CmgError::Domain("train_rid needs mask sets".into()));
    }
    for set in mask_sets {
        set.check_invariants()?;
    }
    let input_dim = mask_sets[0].variants[0].len();
    let mut init_rng = stage_rng(cfg.seed, 20);
    let mut model = RidModel::new(input_dim, &mut init_rng);

    let mut split_rng = stage_rng(cfg.seed, 21);
    let mut indices: Vec<usize> = (0..mask_sets.len()).collect();
    shuffle(&mut indices, &mut split_rng);
    let n_eval = mask_sets.len() / 5;
    let (eval_idx, train_idx) = indices.split_at(n_eval);
    let train_refs: Vec<&MaskSet> = train_idx.iter().map(|&i| &mask_sets[i]).collect();
    let eval_refs: Vec<&MaskSet> = if eval_idx.is_empty() {
        train_refs.clone()
    } else {
        eval_idx.iter().map(|&i| &mask_sets[i]).collect()
    };

    let mut epoch_rng = stage_rng(cfg.seed, 22);
    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    let mut grads = RidGrad::zeros_like(&model);
    let mut log = TrainLog::default();
    let mut heldout = Vec::new();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut epoch_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.reset();
            let mut batch_loss = 0.0;
            for &bi in batch {
                let set = train_refs[bi];
                let mut logits = Vec::with_capacity(set.variants.len());
                let mut caches = Vec::with_capacity(set.variants.len());
                for v in &set.variants {
                    let (s, acts) = model.forward_cached(v)?;
                    logits.push(s);
                    caches.push(acts);
                }
                let (loss, dlogits) = rid_cross_entropy(&logits, set.label_index());
                batch_loss += loss;
                for (k, v) in set.variants.iter().enumerate() {
                    if dlogits[k] != 0.0 {
                        model.backward(v, &caches[k], dlogits[k] / batch.len() as f64, &mut grads);
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(CmgError::Diverged { stage: "rid", epoch });
            }
            model.apply_grad(&grads, cfg.learning_rate, cfg.weight_decay);
            epoch_loss += batch_loss;
        }
        log.loss.push(epoch_loss / train_refs.len().max(1) as f64);
        log.metric.push(rid_accuracy(&model, &train_refs)?);
        heldout.push(rid_accuracy(&model, &eval_refs)?);
    }
    Ok(RidTrainResult { model, log, heldout_acc: heldout })
}

/// Test-time masking: enumerate the variants of the image, score each with
/// the detector, and return the argmax variant. Single pass; ties resolve
/// to the lowest region index.
pub fn rid_mask(image: &[f64], rid: &RidModel, side: usize, spec: &MaskSpec) -> Result<Vec<f64>> {
    let region = rid_region(image, rid, side, spec)?;
    let variants = enumerate_masks(image, side, spec)?;
    Ok(variants.into_iter().nth(region).unwrap())
}

/// Region index the detector would mask for this image.
pub fn rid_region(image: &[f64], rid: &RidModel, side: usize, spec: &MaskSpec) -> Result<usize> {
    let variants = enumerate_masks(image, side, spec)?;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, v) in variants.iter().enumerate() {
        let s = rid.score(v)?;
        if s > best_score {
            best_score = s;
            best = k;
        }
    }
    Ok(best)
}

/// Per-sample histogram entropies of raw and masked images, in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub mean_raw: f64,
    pub mean_masked: f64,
    pub pairs: Vec<(f64, f64)>,
}

/// Entropy audit over parallel raw/masked image lists. Under a hard mask
/// the zeroed positions are excluded from both histograms, so the audit
/// compares surviving content instead of rewarding constant fill; under a
/// soft mask every pixel counts.
pub fn entropy_audit(
    raw: &[Vec<f64>],
    masked: &[Vec<f64>],
    bins: usize,
    mode: MaskMode,
) -> Result<EntropyReport> {
    if raw.is_empty() {
        return Err(CmgError::Domain("entropy_audit of empty input".into()));
    }
    if raw.len() != masked.len() {
        return Err(CmgError::Shape("raw and masked lists must be parallel".into()));
    }
    let mut pairs = Vec::with_capacity(raw.len());
    for (r, m) in raw.iter().zip(masked) {
        if r.len() != m.len() {
            return Err(CmgError::Shape("raw/masked image size mismatch".into()));
        }
        let (h_raw, h_masked) = match mode {
            MaskMode::Soft => (
                histogram_entropy(r, bins, (0.0, 1.0))?,
                histogram_entropy(m, bins, (0.0, 1.0))?,
            ),
            MaskMode::Hard => {
                let surviving: Vec<usize> =
                    (0..m.len()).filter(|&p| m[p] != 0.0).collect();
                if surviving.is_empty() {
                    (0.0, 0.0)
                } else {
                    let rv: Vec<f64> = surviving.iter().map(|&p| r[p]).collect();
                    let mv: Vec<f64> = surviving.iter().map(|&p| m[p]).collect();
                    (
                        histogram_entropy(&rv, bins, (0.0, 1.0))?,
                        histogram_entropy(&mv, bins, (0.0, 1.0))?,
                    )
                }
            }
        };
        pairs.push((h_raw, h_masked));
    }
    let n = pairs.len() as f64;
    let mean_raw = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_masked = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(EntropyReport { mean_raw, mean_masked, pairs })
}
