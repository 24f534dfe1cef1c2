//! End-to-end orchestration: the training recipe, image-only test scoring,
//! the five-variant ablation harness, and the redundancy audits.

use std::path::{Path, PathBuf};

use crate::cmer::{
    build_mask_sets, entropy_audit, rid_mask, train_rid, EntropyReport, MaskMode, MaskSet,
    MaskSpec, RidModel, ENTROPY_BINS,
};
use crate::cmle::{build_group_weights, cluster_texts, global_loss, GroupWeights};
use crate::config::KvFile;
use crate::detector::{fit, GaussianBank};
use crate::encoders::{
    augment_image, ssd_loss, train_matching, ArchConfig, Encoder, EncoderGrad, TrainConfig,
    TrainLog,
};
use crate::error::{CmgError, Result};
use crate::numerics::{auprc, auroc, distance_correlation, Label, Matrix, ScoredLabels};
use crate::randutil::{derive_seed, gaussian, shuffle, stage_rng};
use crate::report::{mean_and_ci, AuditRow, Curve, Failure, MetricsReport, VariantResult, VariantSummary};
use crate::synthdata::Dataset;

/// The ablation variants: the image-only baseline, each guidance stage on
/// its own, the full method, and the full method with the structure loss
/// swapped for direct feature matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Ssd,
    SsdEr,
    SsdLe,
    Cmg,
    CmgMse,
}

pub const ALL_VARIANTS: [Variant; 5] =
    [Variant::Ssd, Variant::SsdEr, Variant::SsdLe, Variant::Cmg, Variant::CmgMse];

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ssd => "SSD",
            Variant::SsdEr => "SSD_ER",
            Variant::SsdLe => "SSD_LE",
            Variant::Cmg => "CMG",
            Variant::CmgMse => "CMG_MSE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('+', "_").as_str() {
            "SSD" => Ok(Variant::Ssd),
            "SSD_ER" => Ok(Variant::SsdEr),
            "SSD_LE" => Ok(Variant::SsdLe),
            "CMG" => Ok(Variant::Cmg),
            "CMG_MSE" => Ok(Variant::CmgMse),
            _ => Err(CmgError::Config(format!(
                "unknown variant '{s}' (expected SSD, SSD_ER, SSD_LE, CMG, or CMG_MSE)"
            ))),
        }
    }

    /// Masking stage: train-time mask selection plus the region detector.
    pub fn has_er(&self) -> bool {
        matches!(self, Variant::SsdEr | Variant::Cmg | Variant::CmgMse)
    }

    /// Structure-transfer stage with per-group reconstruction weights.
    pub fn has_le(&self) -> bool {
        matches!(self, Variant::SsdLe | Variant::Cmg)
    }

    pub fn has_mse(&self) -> bool {
        matches!(self, Variant::CmgMse)
    }

    /// The cross-modal matching encoders are needed by every stage that
    /// consumes text.
    pub fn needs_matching(&self) -> bool {
        !matches!(self, Variant::Ssd)
    }
}

/// Aggregated configuration for a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: crate::synthdata::GenConfig,
    pub arch: ArchConfig,
    pub matching: TrainConfig,
    pub latent: TrainConfig,
    pub rid: TrainConfig,
    pub mask: MaskSpec,
    pub k_text: usize,
    pub m_detector: usize,
    pub ridge_eps: f64,
    pub shrink_eps: f64,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: crate::synthdata::GenConfig::default(),
            arch: ArchConfig::default(),
            matching: TrainConfig {
                learning_rate: 0.05,
                epochs: 60,
                ..TrainConfig::default()
            },
            latent: TrainConfig {
                learning_rate: 0.01,
                epochs: 60,
                lambda_global: 5e-4,
                ..TrainConfig::default()
            },
            rid: TrainConfig {
                learning_rate: 0.05,
                epochs: 40,
                batch_size: 32,
                ..TrainConfig::default()
            },
            mask: MaskSpec::default(),
            k_text: 6,
            m_detector: 6,
            ridge_eps: 1e-3,
            shrink_eps: 1e-3,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.matching.validate()?;
        self.latent.validate()?;
        self.rid.validate()?;
        self.mask.validate()?;
        if self.k_text == 0 || self.m_detector == 0 {
            return Err(CmgError::Config("k_text and m_detector must be >= 1".into()));
        }
        if self.ridge_eps <= 0.0 || self.shrink_eps <= 0.0 {
            return Err(CmgError::Config("ridge_eps and shrink_eps must be > 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(CmgError::Config("need at least one seed".into()));
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let d = RunConfig::default();
        let mask_mode = match kv.get_str("mask_mode", "soft").as_str() {
            "soft" => MaskMode::Soft,
            "hard" => MaskMode::Hard,
            other => {
                return Err(CmgError::Config(format!(
                    "mask_mode must be 'soft' or 'hard', got '{other}'"
                )))
            }
        };
        let cfg = RunConfig {
            gen: d.gen.clone(),
            arch: ArchConfig {
                embed_dim: kv.get_usize("embed_dim", d.arch.embed_dim)?,
                hidden_dim: kv.get_usize("hidden_dim", d.arch.hidden_dim)?,
            },
            matching: TrainConfig {
                temperature: kv.get_f64("match_tau", d.matching.temperature)?,
                learning_rate: kv.get_f64("match_lr", d.matching.learning_rate)?,
                epochs: kv.get_usize("match_epochs", d.matching.epochs)?,
                batch_size: kv.get_usize("match_batch", d.matching.batch_size)?,
                weight_decay: kv.get_f64("match_weight_decay", d.matching.weight_decay)?,
                ..d.matching.clone()
            },
            latent: TrainConfig {
                temperature: kv.get_f64("latent_tau", d.latent.temperature)?,
                learning_rate: kv.get_f64("latent_lr", d.latent.learning_rate)?,
                epochs: kv.get_usize("latent_epochs", d.latent.epochs)?,
                batch_size: kv.get_usize("latent_batch", d.latent.batch_size)?,
                weight_decay: kv.get_f64("latent_weight_decay", d.latent.weight_decay)?,
                lambda_global: kv.get_f64("lambda_global", d.latent.lambda_global)?,
                augment_noise_sigma: kv.get_f64("augment_noise_sigma", d.latent.augment_noise_sigma)?,
                augment_region_dropout_prob: kv
                    .get_f64("augment_region_dropout_prob", d.latent.augment_region_dropout_prob)?,
                ..d.latent.clone()
            },
            rid: TrainConfig {
                learning_rate: kv.get_f64("rid_lr", d.rid.learning_rate)?,
                epochs: kv.get_usize("rid_epochs", d.rid.epochs)?,
                batch_size: kv.get_usize("rid_batch", d.rid.batch_size)?,
                weight_decay: kv.get_f64("rid_weight_decay", d.rid.weight_decay)?,
                ..d.rid.clone()
            },
            mask: MaskSpec {
                grid: kv.get_usize("mask_grid", d.mask.grid)?,
                mode: mask_mode,
                soft_constant: kv.get_f64("soft_constant", d.mask.soft_constant)?,
            },
            k_text: kv.get_usize("k_text", d.k_text)?,
            m_detector: kv.get_usize("m_detector", d.m_detector)?,
            ridge_eps: kv.get_f64("ridge_eps", d.ridge_eps)?,
            shrink_eps: kv.get_f64("shrink_eps", d.shrink_eps)?,
            seeds: kv.get_u64_list("seeds", &d.seeds)?,
            out_dir: None,
        };
        kv.reject_unknown()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "embed_dim = {}\nhidden_dim = {}\nmatch_tau = {}\nmatch_lr = {}\nmatch_epochs = {}\n\
             match_batch = {}\nmatch_weight_decay = {}\nlatent_tau = {}\nlatent_lr = {}\n\
             latent_epochs = {}\nlatent_batch = {}\nlatent_weight_decay = {}\nlambda_global = {}\n\
             augment_noise_sigma = {}\naugment_region_dropout_prob = {}\nrid_lr = {}\n\
             rid_epochs = {}\nrid_batch = {}\nrid_weight_decay = {}\nmask_grid = {}\n\
             mask_mode = {}\nsoft_constant = {}\nk_text = {}\nm_detector = {}\nridge_eps = {}\n\
             shrink_eps = {}\nseeds = {}\n",
            self.arch.embed_dim,
            self.arch.hidden_dim,
            self.matching.temperature,
            self.matching.learning_rate,
            self.matching.epochs,
            self.matching.batch_size,
            self.matching.weight_decay,
            self.latent.temperature,
            self.latent.learning_rate,
            self.latent.epochs,
            self.latent.batch_size,
            self.latent.weight_decay,
            self.latent.lambda_global,
            self.latent.augment_noise_sigma,
            self.latent.augment_region_dropout_prob,
            self.rid.learning_rate,
            self.rid.epochs,
            self.rid.batch_size,
            self.rid.weight_decay,
            self.mask.grid,
            match self.mask.mode {
                MaskMode::Soft => "soft",
                MaskMode::Hard => "hard",
            },
            self.mask.soft_constant,
            self.k_text,
            self.m_detector,
            self.ridge_eps,
            self.shrink_eps,
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        )
    }
}

/// The deployable artifacts of one training run. Exactly the stages the
/// variant uses are present.
pub struct ModelBundle {
    pub variant: Variant,
    pub seed: u64,
    pub image_side: usize,
    pub mask: MaskSpec,
    pub matching_image: Option<Encoder>,
    pub matching_text: Option<Encoder>,
    pub rid: Option<RidModel>,
    pub weights: Option<GroupWeights>,
    pub e2: Encoder,
    pub bank: GaussianBank,
}

impl ModelBundle {
    /// Artifact presence must match the variant's stage set exactly.
    pub fn check_gating(&self) -> Result<()> {
        let v = self.variant;
        let ok = self.matching_image.is_some() == v.needs_matching()
            && self.matching_text.is_some() == v.needs_matching()
            && self.rid.is_some() == v.has_er()
            && self.weights.is_some() == v.has_le();
        if !ok {
            return Err(CmgError::Data(format!(
                "bundle artifacts do not match variant {}",
                v.name()
            )));
        }
        Ok(())
    }
}

/// Per-stage training curves of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLogs {
    pub matching: Option<TrainLog>,
    pub rid: Option<TrainLog>,
    pub rid_heldout: Option<Vec<f64>>,
    /// loss per epoch of the latent stage; metric carries the per-epoch
    /// test AUROC when the variant tracks it (SSD and CMG).
    pub latent: TrainLog,
}

pub struct TrainedModels {
    pub bundle: ModelBundle,
    pub logs: RunLogs,
}

enum Guidance {
    None,
    Structure(GroupWeights),
    MseTargets(Matrix),
}

struct EpochTracker {
    test_inputs: Vec<Vec<f64>>,
    test_labels: Vec<Label>,
    m: usize,
    shrink_eps: f64,
    det_seed: u64,
}

/// Trains the latent image encoder on the (possibly masked) training
/// images: contrastive view pairs plus `lambda_global` times the guidance
/// term, full-batch, per step.
fn train_latent(
    inputs: &[Vec<f64>],
    guidance: &Guidance,
    cfg: &TrainConfig,
    arch: &ArchConfig,
    side: usize,
    grid: usize,
    tracker: Option<&EpochTracker>,
) -> Result<(Encoder, TrainLog)> {
    cfg.validate()?;
    if inputs.len() < 2 {
        return Err(CmgError::Domain("latent training needs at least 2 samples".into()));
    }
    let input_dim = inputs[0].len();
    let mut init_rng = stage_rng(cfg.seed, 30);
    let mut enc = Encoder::one_hidden(input_dim, arch.hidden_dim, arch.embed_dim, &mut init_rng);
    let mut aug_rng = stage_rng(cfg.seed, 31);
    let mut shuffle_rng = stage_rng(cfg.seed, 32);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grads = EncoderGrad::zeros_like(&enc);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            grads.reset();
            let mut za_rows = Vec::with_capacity(batch.len());
            let mut zb_rows = Vec::with_capacity(batch.len());
            let mut views_a = Vec::with_capacity(batch.len());
            let mut views_b = Vec::with_capacity(batch.len());
            let mut caches_a = Vec::with_capacity(batch.len());
            let mut caches_b = Vec::with_capacity(batch.len());
            for &idx in batch {
                let va = augment_image(
                    &inputs[idx],
                    side,
                    grid,
                    cfg.augment_noise_sigma,
                    cfg.augment_region_dropout_prob,
                    &mut aug_rng,
                );
                let vb = augment_image(
                    &inputs[idx],
                    side,
                    grid,
                    cfg.augment_noise_sigma,
                    cfg.augment_region_dropout_prob,
                    &mut aug_rng,
                );
                let (za, ca) = enc.forward_cached(&va)?;
                let (zb, cb) = enc.forward_cached(&vb)?;
                za_rows.push(za);
                zb_rows.push(zb);
                views_a.push(va);
                views_b.push(vb);
                caches_a.push(ca);
                caches_b.push(cb);
            }
            let z_a = Matrix::from_rows(&za_rows)
                .map_err(|_| CmgError::Diverged { stage: "latent", epoch })?;
            let z_b = Matrix::from_rows(&zb_rows)
                .map_err(|_| CmgError::Diverged { stage: "latent", epoch })?;
            let (view_loss, d_za, d_zb) = ssd_loss(&z_a, &z_b, cfg.temperature)?;
            for (k, _) in batch.iter().enumerate() {
                enc.backward(&views_a[k], &caches_a[k], d_za.row(k), &mut grads);
                enc.backward(&views_b[k], &caches_b[k], d_zb.row(k), &mut grads);
            }

            let mut guidance_loss = 0.0;
            match guidance {
                Guidance::None => {}
                Guidance::Structure(weights) => {
                    for block in &weights.groups {
                        let mut rows = Vec::with_capacity(block.members.len());
                        let mut caches = Vec::with_capacity(block.members.len());
                        for &i in &block.members {
                            let (z, c) = enc.forward_cached(&inputs[i])?;
                            rows.push(z);
                            caches.push(c);
                        }
                        let features = Matrix::from_rows(&rows)
                            .map_err(|_| CmgError::Diverged { stage: "latent", epoch })?;
                        let (gl, d_f) = global_loss(&features, &block.w)?;
                        guidance_loss += gl;
                        for (k, &i) in block.members.iter().enumerate() {
                            let scaled: Vec<f64> =
                                d_f.row(k).iter().map(|v| v * cfg.lambda_global).collect();
                            enc.backward(&inputs[i], &caches[k], &scaled, &mut grads);
                        }
                    }
                }
                Guidance::MseTargets(targets) => {
                    for (i, input) in inputs.iter().enumerate() {
                        let (z, cache) = enc.forward_cached(input)?;
                        let mut d: Vec<f64> = Vec::with_capacity(z.len());
                        for (zc, tc) in z.iter().zip(targets.row(i)) {
                            let r = zc - tc;
                            guidance_loss += r * r;
                            d.push(2.0 * r * cfg.lambda_global);
                        }
                        enc.backward(input, &cache, &d, &mut grads);
                    }
                }
            }

            let total = view_loss + cfg.lambda_global * guidance_loss;
            if !total.is_finite() {
                return Err(CmgError::Diverged { stage: "latent", epoch });
            }
            enc.apply_grad(&grads, cfg.learning_rate, cfg.weight_decay);
            epoch_loss += total;
            steps += 1;
        }
        log.loss.push(if steps > 0 { epoch_loss / steps as f64 } else { 0.0 });
        if let Some(t) = tracker {
            let mut rows = Vec::with_capacity(inputs.len());
            for input in inputs {
                rows.push(enc.forward(input)?);
            }
            let features = Matrix::from_rows(&rows)?;
            let bank = fit(&features, t.m, t.det_seed, t.shrink_eps)?;
            let mut scores = Vec::with_capacity(t.test_inputs.len());
            for img in &t.test_inputs {
                scores.push(bank.score(&enc.forward(img)?)?);
            }
            let scored = ScoredLabels::new(scores, t.test_labels.clone())?;
            log.metric.push(auroc(&scored)?);
        }
    }
    Ok((enc, log))
}

fn random_orthonormal(dim: usize, seed: u64) -> Matrix {
    let mut rng = stage_rng(seed, 0);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
        for r in &rows {
            let proj = crate::numerics::dot(&v, r);
            for (vc, rc) in v.iter_mut().zip(r) {
                *vc -= proj * rc;
            }
        }
        let n = crate::numerics::norm(&v);
        if n > 1e-8 {
            for vc in v.iter_mut() {
                *vc /= n;
            }
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows).unwrap()
}

/// Runs the full training recipe for one variant: matching encoders, mask
/// selection, the region detector, text clustering and reconstruction
/// weights, the latent encoder, and finally the Gaussian bank on the
/// latent features of the (masked) training images. Stages outside the
/// variant's set are skipped.
pub fn train_cmg(dataset: &Dataset, cfg: &RunConfig, variant: Variant, run_seed: u64) -> Result<TrainedModels> {
    cfg.validate()?;
    dataset.check_invariants()?;
    if dataset.train_normal.is_empty() {
        return Err(CmgError::Data("dataset has no training samples".into()));
    }
    let side = dataset.config.image_side;
    let train = &dataset.train_normal;
    let mut logs = RunLogs::default();

    // Matching encoders.
    let mut matching_image = None;
    let mut matching_text = None;
    if variant.needs_matching() {
        let mcfg = TrainConfig { seed: run_seed, ..cfg.matching.clone() };
        let models = train_matching(train, &mcfg, &cfg.arch)?;
        logs.matching = Some(models.log);
        matching_image = Some(models.image_enc);
        matching_text = Some(models.text_enc);
    }

    // Mask selection and the region detector.
    let mut rid = None;
    let mut mask_sets: Option<Vec<MaskSet>> = None;
    if variant.has_er() {
        let sets = build_mask_sets(
            train,
            side,
            &cfg.mask,
            matching_text.as_ref().unwrap(),
            matching_image.as_ref().unwrap(),
        )?;
        let rcfg = TrainConfig { seed: run_seed, ..cfg.rid.clone() };
        let result = train_rid(&sets, &rcfg)?;
        logs.rid = Some(result.log);
        logs.rid_heldout = Some(result.heldout_acc);
        rid = Some(result.model);
        mask_sets = Some(sets);
    }

    // Text clustering and per-group reconstruction weights.
    let mut weights = None;
    if variant.has_le() {
        let text_enc = matching_text.as_ref().unwrap();
        let mut rows = Vec::with_capacity(train.len());
        for s in train {
            rows.push(text_enc.forward(&s.text)?);
        }
        let z_t = Matrix::from_rows(&rows)?;
        let k = cfg.k_text.min(z_t.rows());
        let assignment = cluster_texts(&z_t, k, derive_seed(run_seed, 1))?;
        let gw = build_group_weights(&z_t, &assignment, cfg.ridge_eps)?;
        gw.check_invariants()?;
        weights = Some(gw);
    }

    // Latent-stage inputs: text-selected masked images for masking
    // variants, raw images otherwise.
    let inputs: Vec<Vec<f64>> = match &mask_sets {
        Some(sets) => sets.iter().map(|s| s.variants[s.label_index()].clone()).collect(),
        None => train.iter().map(|s| s.image.clone()).collect(),
    };

    let guidance = if variant.has_le() {
        Guidance::Structure(weights.clone().unwrap())
    } else if variant.has_mse() {
        let text_enc = matching_text.as_ref().unwrap();
        let p = random_orthonormal(cfg.arch.embed_dim, derive_seed(run_seed, 4));
        let mut targets = Matrix::zeros(train.len(), cfg.arch.embed_dim);
        for (i, s) in train.iter().enumerate() {
            let zt = text_enc.forward(&s.text)?;
            for c in 0..cfg.arch.embed_dim {
                targets.set(i, c, crate::numerics::dot(p.row(c), &zt));
            }
        }
        Guidance::MseTargets(targets)
    } else {
        Guidance::None
    };

    // Per-epoch test AUROC, tracked for the baseline and the full method.
    let tracker = if matches!(variant, Variant::Ssd | Variant::Cmg) {
        let mut test_inputs = Vec::new();
        let mut test_labels = Vec::new();
        for (samples, label) in [
            (&dataset.test_normal, Label::Normal),
            (&dataset.test_anomaly, Label::Anomaly),
        ] {
            for s in samples.iter() {
                let img = if let Some(r) = &rid {
                    rid_mask(&s.image, r, side, &cfg.mask)?
                } else {
                    s.image.clone()
                };
                test_inputs.push(img);
                test_labels.push(label);
            }
        }
        Some(EpochTracker {
            test_inputs,
            test_labels,
            m: cfg.m_detector,
            shrink_eps: cfg.shrink_eps,
            det_seed: derive_seed(run_seed, 2),
        })
    } else {
        None
    };

    let lcfg = TrainConfig { seed: run_seed, ..cfg.latent.clone() };
    let (e2, latent_log) = train_latent(
        &inputs,
        &guidance,
        &lcfg,
        &cfg.arch,
        side,
        cfg.mask.grid,
        tracker.as_ref(),
    )?;
    logs.latent = latent_log;

    // Gaussian bank over the latent features of the training inputs.
    let mut rows = Vec::with_capacity(inputs.len());
    for input in &inputs {
        rows.push(e2.forward(input)?);
    }
    let features = Matrix::from_rows(&rows)?;
    let m = cfg.m_detector.min(features.rows());
    let bank = fit(&features, m, derive_seed(run_seed, 2), cfg.shrink_eps)?;

    let bundle = ModelBundle {
        variant,
        seed: run_seed,
        image_side: side,
        mask: cfg.mask.clone(),
        matching_image,
        matching_text,
        rid,
        weights,
        e2,
        bank,
    };
    bundle.check_gating()?;
    Ok(TrainedModels { bundle, logs })
}

/// Scores test images. Only the vision modality is consumed: for masking
/// variants the region detector picks the masked variant, the latent
/// encoder embeds it, and the bank returns the minimum Mahalanobis
/// distance. Ground-truth labels pass through untouched, for evaluation
/// only.
pub fn test_scores(bundle: &ModelBundle, images: &[Vec<f64>], labels: &[Label]) -> Result<ScoredLabels> {
    if images.len() != labels.len() {
        return Err(CmgError::Shape("images and labels must be parallel".into()));
    }
    let mut scores = Vec::with_capacity(images.len());
    for image in images {
        let input = if let Some(rid) = &bundle.rid {
            rid_mask(image, rid, bundle.image_side, &bundle.mask)?
        } else {
            image.clone()
        };
        let z = bundle.e2.forward(&input)?;
        scores.push(bundle.bank.score(&z)?);
    }
    ScoredLabels::new(scores, labels.to_vec())
}

/// Flattened test images and their labels, normals first.
pub fn test_set(dataset: &Dataset) -> (Vec<Vec<f64>>, Vec<Label>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for s in &dataset.test_normal {
        images.push(s.image.clone());
        labels.push(Label::Normal);
    }
    for s in &dataset.test_anomaly {
        images.push(s.image.clone());
        labels.push(Label::Anomaly);
    }
    (images, labels)
}

/// Entropy audit of the text-selected training masks against the raw
/// training images.
pub fn cmer_entropy_report(dataset: &Dataset, bundle: &ModelBundle) -> Result<EntropyReport> {
    let (text_enc, image_enc) = match (&bundle.matching_text, &bundle.matching_image) {
        (Some(t), Some(i)) => (t, i),
        _ => {
            return Err(CmgError::Domain(
                "entropy audit needs a bundle with matching encoders".into(),
            ))
        }
    };
    let sets = build_mask_sets(
        &dataset.train_normal,
        dataset.config.image_side,
        &bundle.mask,
        text_enc,
        image_enc,
    )?;
    let raw: Vec<Vec<f64>> = dataset.train_normal.iter().map(|s| s.image.clone()).collect();
    let masked: Vec<Vec<f64>> = sets.iter().map(|s| s.variants[s.label_index()].clone()).collect();
    entropy_audit(&raw, &masked, ENTROPY_BINS, bundle.mask.mode)
}

/// Distance correlations of raw and masked image matrices against a shared
/// noise matrix.
pub fn redundancy_dcors(raw: &Matrix, masked: &Matrix, noise: &Matrix) -> Result<(f64, f64)> {
    Ok((distance_correlation(raw, noise)?, distance_correlation(masked, noise)?))
}

/// Redundancy audit on the test images: detector-masked images should
/// correlate less with injected noise than the raw images do.
pub fn redundancy_audit(dataset: &Dataset, bundle: &ModelBundle) -> Result<(f64, f64)> {
    let rid = bundle
        .rid
        .as_ref()
        .ok_or_else(|| CmgError::Domain("redundancy audit needs a bundle with the masking stage".into()))?;
    let (images, _) = test_set(dataset);
    let mut raw_rows = Vec::with_capacity(images.len());
    let mut masked_rows = Vec::with_capacity(images.len());
    for image in &images {
        raw_rows.push(image.clone());
        masked_rows.push(rid_mask(image, rid, bundle.image_side, &bundle.mask)?);
    }
    let raw = Matrix::from_rows(&raw_rows)?;
    let masked = Matrix::from_rows(&masked_rows)?;
    let mut noise_rng = stage_rng(derive_seed(bundle.seed, 3), 0);
    let mut noise = Matrix::zeros(raw.rows(), raw.cols());
    for v in noise.data_mut() {
        *v = gaussian(&mut noise_rng);
    }
    redundancy_dcors(&raw, &masked, &noise)
}

/// Runs every variant across every seed, evaluates AUROC/AUPR, attaches
/// the audits and training curves, and aggregates seed means with 95%
/// intervals. A failing run is recorded and does not abort the others.
pub fn ablate(dataset: &Dataset, cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let (images, labels) = test_set(dataset);
    let mut report = MetricsReport { seeds: cfg.seeds.clone(), ..MetricsReport::default() };
    for variant in ALL_VARIANTS {
        for &seed in &cfg.seeds {
            match run_one(dataset, cfg, variant, seed, &images, &labels, &mut report) {
                Ok(()) => {}
                Err(e) => {
                    report.failures.push(Failure { variant, seed, message: e.to_string() });
                }
            }
        }
    }
    for variant in ALL_VARIANTS {
        let aurocs: Vec<f64> = report
            .results
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.auroc)
            .collect();
        if aurocs.is_empty() {
            continue;
        }
        let auprs: Vec<f64> = report
            .results
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.aupr)
            .collect();
        let (mean_auroc, ci_auroc) = mean_and_ci(&aurocs);
        let (mean_aupr, ci_aupr) = mean_and_ci(&auprs);
        report.summaries.push(VariantSummary { variant, mean_auroc, ci_auroc, mean_aupr, ci_aupr });
    }
    Ok(report)
}

fn run_one(
    dataset: &Dataset,
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    images: &[Vec<f64>],
    labels: &[Label],
    report: &mut MetricsReport,
) -> Result<()> {
    let trained = train_cmg(dataset, cfg, variant, seed)?;
    let scored = test_scores(&trained.bundle, images, labels)?;
    let roc = auroc(&scored)?;
    let pr = auprc(&scored)?;
    if !roc.is_finite() || !pr.is_finite() {
        return Err(CmgError::Numerical("non-finite metric".into()));
    }
    report.results.push(VariantResult { variant, seed, auroc: roc, aupr: pr });
    let logs = &trained.logs;
    if let Some(log) = &logs.matching {
        report.curves.push(Curve {
            name: "retrieval_acc".into(),
            variant,
            seed,
            values: log.metric.clone(),
        });
    }
    if let Some(log) = &logs.rid {
        report.curves.push(Curve {
            name: "rid_train_acc".into(),
            variant,
            seed,
            values: log.metric.clone(),
        });
    }
    if let Some(heldout) = &logs.rid_heldout {
        report.curves.push(Curve {
            name: "rid_heldout_acc".into(),
            variant,
            seed,
            values: heldout.clone(),
        });
    }
    report.curves.push(Curve {
        name: "latent_loss".into(),
        variant,
        seed,
        values: logs.latent.loss.clone(),
    });
    if !logs.latent.metric.is_empty() {
        report.curves.push(Curve {
            name: "epoch_auroc".into(),
            variant,
            seed,
            values: logs.latent.metric.clone(),
        });
    }
    if variant == Variant::Cmg {
        let entropy = cmer_entropy_report(dataset, &trained.bundle)?;
        report.entropy.push(AuditRow { seed, raw: entropy.mean_raw, masked: entropy.mean_masked });
        let (dcor_raw, dcor_masked) = redundancy_audit(dataset, &trained.bundle)?;
        report.dcor.push(AuditRow { seed, raw: dcor_raw, masked: dcor_masked });
    }
    Ok(())
}

const MANIFEST_FILE: &str = "manifest.txt";

/// Writes a bundle as a directory: a manifest plus one file per artifact.
pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = format!(
        "variant = {}\nseed = {}\nimage_side = {}\nmask_grid = {}\nmask_mode = {}\nsoft_constant = {}\n",
        bundle.variant.name(),
        bundle.seed,
        bundle.image_side,
        bundle.mask.grid,
        match bundle.mask.mode {
            MaskMode::Soft => "soft",
            MaskMode::Hard => "hard",
        },
        bundle.mask.soft_constant
    );
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    if let Some(enc) = &bundle.matching_image {
        enc.save(&dir.join("e1_image.cmge"))?;
    }
    if let Some(enc) = &bundle.matching_text {
        enc.save(&dir.join("e1_text.cmge"))?;
    }
    if let Some(rid) = &bundle.rid {
        rid.save(&dir.join("rid.cmgr"))?;
    }
    if let Some(w) = &bundle.weights {
        w.save(&dir.join("weights.cmgw"))?;
    }
    bundle.e2.save(&dir.join("e2.cmge"))?;
    bundle.bank.save(&dir.join("bank.cmgb"))?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let kv = KvFile::parse(&manifest_text)?;
    let variant = Variant::parse(&kv.get_str("variant", ""))?;
    let seed = kv.get_u64("seed", 0)?;
    let image_side = kv.get_usize("image_side", 0)?;
    let mode = match kv.get_str("mask_mode", "soft").as_str() {
        "hard" => MaskMode::Hard,
        _ => MaskMode::Soft,
    };
    let mask = MaskSpec {
        grid: kv.get_usize("mask_grid", 2)?,
        mode,
        soft_constant: kv.get_f64("soft_constant", 0.1)?,
    };
    kv.reject_unknown()?;
    let load_enc = |name: &str| Encoder::load(&dir.join(name));
    let bundle = ModelBundle {
        variant,
        seed,
        image_side,
        mask,
        matching_image: if variant.needs_matching() { Some(load_enc("e1_image.cmge")?) } else { None },
        matching_text: if variant.needs_matching() { Some(load_enc("e1_text.cmge")?) } else { None },
        rid: if variant.has_er() { Some(RidModel::load(&dir.join("rid.cmgr"))?) } else { None },
        weights: if variant.has_le() {
            Some(GroupWeights::load(&dir.join("weights.cmgw"))?)
        } else {
            None
        },
        e2: load_enc("e2.cmge")?,
        bank: GaussianBank::load(&dir.join("bank.cmgb"))?,
    };
    bundle.check_gating()?;
    Ok(bundle)
}

/// Text report for a scored test set.
pub fn scores_report(scored: &ScoredLabels) -> Result<String> {
    let mut out = String::new();
    out.push_str("format = cmg-scores\nversion = 1\n");
    out.push_str(&format!("count = {}\n", scored.scores.len()));
    out.push_str(&format!("auroc = {}\n", auroc(scored)?));
    out.push_str(&format!("aupr = {}\n", auprc(scored)?));
    out.push_str("[scores]\n");
    for (i, (score, label)) in scored.scores.iter().zip(&scored.labels).enumerate() {
        let tag = match label {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
        };
        out.push_str(&format!("{i} {tag} {score}\n"));
    }
    Ok(out)
}

/// Text report for the two audits of one bundle.
pub fn audit_report(dataset: &Dataset, bundle: &ModelBundle) -> Result<String> {
    let entropy = cmer_entropy_report(dataset, bundle)?;
    let (dcor_raw, dcor_masked) = redundancy_audit(dataset, bundle)?;
    Ok(format!(
        "format = cmg-audit\nversion = 1\nvariant = {}\nseed = {}\nmean_h_raw = {}\n\
         mean_h_masked = {}\ndcor_raw_noise = {}\ndcor_masked_noise = {}\n",
        bundle.variant.name(),
        bundle.seed,
        entropy.mean_raw,
        entropy.mean_masked,
        dcor_raw,
        dcor_masked
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::Oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variant_names_round_trip() {
        for v in ALL_VARIANTS {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert_eq!(Variant::parse("ssd+er").unwrap(), Variant::SsdEr);
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn run_config_kv_round_trip() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(matches!(
            RunConfig::from_kv("latent_lrr = 0.1\n"),
            Err(CmgError::Config(_))
        ));
    }

    #[test]
    fn identity_masking_gives_equal_dcors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw = Oracle::random_matrix(20, 9, &mut rng);
        let noise = Oracle::random_normal_matrix(20, 9, &mut rng);
        let (a, b) = redundancy_dcors(&raw, &raw, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orthonormal_projection_is_orthonormal() {
        let p = random_orthonormal(6, 3);
        for i in 0..6 {
            for j in 0..6 {
                let d = crate::numerics::dot(p.row(i), p.row(j));
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-10, "({i},{j}): {d}");
            }
        }
    }
}
