//! Synthetic paired image/text datasets with controllable signal regions,
//! background clutter, and held-out anomaly classes.
//!
//! Each sample is a single-channel image grid: one grid region carries a
//! class-specific prototype patch, every other region carries background
//! clutter, and Gaussian pixel noise is added on top. The signal region is
//! chosen per sample, so nothing about the layout can be memorized by
//! position alone. A two-dimensional attribute latent modulates both the
//! patch and the paired text around its class centroid, so the text space
//! carries the same within-class structure as the image content rather
//! than being a noisy point mass per class.
//!
//! Clutter is drawn from a small pool of shared background styles chosen
//! independently of the class. Backgrounds therefore make samples of
//! different classes look alike (and anomalies look familiar), which is
//! exactly the redundancy the masking and structure-transfer stages are
//! meant to defeat; texts never mention the background.

use std::path::Path;

use rand::Rng;

use crate::codec::{ByteReader, ByteWriter};
use crate::config::KvFile;
use crate::error::{CmgError, Result};
use crate::randutil::{gaussian, stage_rng};

const DATASET_MAGIC: &[u8; 4] = b"CMGD";
const DATASET_VERSION: u32 = 1;

/// Generator configuration. `grid` is the mask partition side, so a grid of
/// 2 gives 4 regions and 3 gives 9.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub image_side: usize,
    pub grid: usize,
    pub text_dim: usize,
    pub n_classes_normal: usize,
    pub n_classes_anomaly: usize,
    pub samples_per_class: usize,
    pub signal_strength: f64,
    pub clutter_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_side: 12,
            grid: 2,
            text_dim: 8,
            n_classes_normal: 6,
            n_classes_anomaly: 3,
            samples_per_class: 80,
            signal_strength: 0.8,
            clutter_strength: 0.35,
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(CmgError::Config("grid must be at least 2".into()));
        }
        if self.image_side == 0 || self.image_side % self.grid != 0 {
            return Err(CmgError::Config(format!(
                "image_side {} must be a positive multiple of grid {}",
                self.image_side, self.grid
            )));
        }
        if self.text_dim == 0
            || self.n_classes_normal == 0
            || self.n_classes_anomaly == 0
            || self.samples_per_class == 0
        {
            return Err(CmgError::Config("all counts must be at least 1".into()));
        }
        if !(self.signal_strength > self.clutter_strength && self.clutter_strength > 0.0) {
            return Err(CmgError::Config(
                "need signal_strength > clutter_strength > 0".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(CmgError::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let d = GenConfig::default();
        let cfg = GenConfig {
            image_side: kv.get_usize("image_side", d.image_side)?,
            grid: kv.get_usize("grid", d.grid)?,
            text_dim: kv.get_usize("text_dim", d.text_dim)?,
            n_classes_normal: kv.get_usize("n_classes_normal", d.n_classes_normal)?,
            n_classes_anomaly: kv.get_usize("n_classes_anomaly", d.n_classes_anomaly)?,
            samples_per_class: kv.get_usize("samples_per_class", d.samples_per_class)?,
            signal_strength: kv.get_f64("signal_strength", d.signal_strength)?,
            clutter_strength: kv.get_f64("clutter_strength", d.clutter_strength)?,
            noise_sigma: kv.get_f64("noise_sigma", d.noise_sigma)?,
            seed: kv.get_u64("seed", d.seed)?,
        };
        kv.reject_unknown()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "image_side = {}\ngrid = {}\ntext_dim = {}\nn_classes_normal = {}\n\
             n_classes_anomaly = {}\nsamples_per_class = {}\nsignal_strength = {}\n\
             clutter_strength = {}\nnoise_sigma = {}\nseed = {}\n",
            self.image_side,
            self.grid,
            self.text_dim,
            self.n_classes_normal,
            self.n_classes_anomaly,
            self.samples_per_class,
            self.signal_strength,
            self.clutter_strength,
            self.noise_sigma,
            self.seed
        )
    }
}

/// One normal training item: an image grid plus its aligned text vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub class_id: usize,
    pub signal_region: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train_normal: Vec<PairedSample>,
    pub test_normal: Vec<PairedSample>,
    pub test_anomaly: Vec<PairedSample>,
    pub config: GenConfig,
}

impl Dataset {
    /// Checks the split contracts: anomaly classes disjoint from training
    /// classes, test normals drawn from training classes.
    pub fn check_invariants(&self) -> Result<()> {
        let train_classes: Vec<usize> = self.train_normal.iter().map(|s| s.class_id).collect();
        for s in &self.test_anomaly {
            if train_classes.contains(&s.class_id) {
                return Err(CmgError::Data(format!(
                    "anomaly class {} appears in training classes",
                    s.class_id
                )));
            }
        }
        for s in &self.test_normal {
            if !train_classes.contains(&s.class_id) {
                return Err(CmgError::Data(format!(
                    "test-normal class {} missing from training classes",
                    s.class_id
                )));
            }
        }
        Ok(())
    }
}

/// Pixel offsets of one grid region in a flattened `side`x`side` image.
pub fn region_pixel_indices(side: usize, grid: usize, region: usize) -> Vec<usize> {
    let block = side / grid;
    let row0 = (region / grid) * block;
    let col0 = (region % grid) * block;
    let mut out = Vec::with_capacity(block * block);
    for r in row0..row0 + block {
        for c in col0..col0 + block {
            out.push(r * side + c);
        }
    }
    out
}

pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let n_classes = config.n_classes_normal + config.n_classes_anomaly;
    let block = config.image_side / config.grid;
    let patch_pixels = block * block;

    // Class prototype patches are mixtures of a shared pool of texture
    // atoms, so the held-out anomaly classes are novel combinations of
    // familiar content rather than out-of-range pixels. Two per-class
    // variation directions are driven by the attribute latent.
    const PATCH_ATOMS: usize = 6;
    let mut proto_rng = stage_rng(config.seed, 1);
    let atoms: Vec<Vec<f64>> = (0..PATCH_ATOMS)
        .map(|_| (0..patch_pixels).map(|_| proto_rng.gen_range(0.2..1.0)).collect())
        .collect();
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut patch_dirs: Vec<[Vec<f64>; 2]> = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let mut mix: Vec<f64> = (0..PATCH_ATOMS).map(|_| proto_rng.gen_range(0.05..1.0)).collect();
        let total: f64 = mix.iter().sum();
        for w in mix.iter_mut() {
            *w /= total;
        }
        prototypes.push(
            (0..patch_pixels)
                .map(|k| {
                    let blend: f64 = mix.iter().zip(&atoms).map(|(w, a)| w * a[k]).sum();
                    config.signal_strength * blend
                })
                .collect(),
        );
        let mut dir = || -> Vec<f64> {
            (0..patch_pixels)
                .map(|_| config.signal_strength * proto_rng.gen_range(-0.25..0.25))
                .collect()
        };
        patch_dirs.push([dir(), dir()]);
    }

    // Class text centroids, re-drawn until pairwise separation clears the
    // noise floor so clustering stays well-posed, plus per-class attribute
    // directions in text space mirroring the patch variation.
    let mut centroid_rng = stage_rng(config.seed, 2);
    let min_sep = (6.0 * config.noise_sigma).max(1e-6);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut text_dirs: Vec<[Vec<f64>; 4]> = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        loop {
            let cand: Vec<f64> = (0..config.text_dim).map(|_| gaussian(&mut centroid_rng)).collect();
            let ok = centroids.iter().all(|c| {
                let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= min_sep
            });
            if ok {
                centroids.push(cand);
                break;
            }
        }
        let mut unit_dir = || -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..config.text_dim).map(|_| gaussian(&mut centroid_rng)).collect();
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    return v.iter().map(|x| x / n).collect();
                }
            }
        };
        // Two directions mirrored in the image patch, two text-only ones:
        // phrasing varies in ways no image could predict.
        text_dirs.push([unit_dir(), unit_dir(), unit_dir(), unit_dir()]);
    }

    // Shared background styles: full-image clutter textures sampled
    // independently of the class.
    const CLUTTER_STYLES: usize = 4;
    const CLUTTER_JITTER: f64 = 0.25;
    let mut style_rng = stage_rng(config.seed, 4);
    let styles: Vec<Vec<f64>> = (0..CLUTTER_STYLES)
        .map(|_| {
            (0..config.pixels())
                .map(|_| style_rng.gen_range(0.0..config.clutter_strength))
                .collect()
        })
        .collect();

    let mut sample_rng = stage_rng(config.seed, 3);
    let regions = config.regions();
    let n_test = config.samples_per_class / 5;
    let mut train_normal = Vec::new();
    let mut test_normal = Vec::new();
    let mut test_anomaly = Vec::new();
    // Spread of the text attribute directions; small against the centroid
    // spacing so clustering stays class-aligned, large against the noise so
    // within-class geometry is informative.
    const TEXT_ATTR_GAIN: f64 = 0.5;
    // Text-only variation (phrasing) outweighs the image-predictable part,
    // as it does for real captions.
    const TEXT_NUISANCE_GAIN: f64 = 1.2;
    for class_id in 0..n_classes {
        for s in 0..config.samples_per_class {
            let signal_region = sample_rng.gen_range(0..regions);
            let a1 = sample_rng.gen_range(-1.0..1.0);
            let a2 = sample_rng.gen_range(-1.0..1.0);
            let b1 = sample_rng.gen_range(-1.0..1.0);
            let b2 = sample_rng.gen_range(-1.0..1.0);
            let style = &styles[sample_rng.gen_range(0..CLUTTER_STYLES)];
            let mut image = vec![0.0; config.pixels()];
            for region in 0..regions {
                let idxs = region_pixel_indices(config.image_side, config.grid, region);
                if region == signal_region {
                    let [d1, d2] = &patch_dirs[class_id];
                    for (k, &p) in idxs.iter().enumerate() {
                        image[p] = prototypes[class_id][k] + a1 * d1[k] + a2 * d2[k];
                    }
                } else {
                    for &p in &idxs {
                        image[p] = style[p]
                            + config.clutter_strength
                                * sample_rng.gen_range(-CLUTTER_JITTER..CLUTTER_JITTER);
                    }
                }
            }
            for v in image.iter_mut() {
                *v = (*v + config.noise_sigma * gaussian(&mut sample_rng)).clamp(0.0, 1.0);
            }
            let [u1, u2, v1, v2] = &text_dirs[class_id];
            let text: Vec<f64> = (0..config.text_dim)
                .map(|c| {
                    centroids[class_id][c]
                        + TEXT_ATTR_GAIN * (a1 * u1[c] + a2 * u2[c])
                        + TEXT_NUISANCE_GAIN * (b1 * v1[c] + b2 * v2[c])
                        + config.noise_sigma * gaussian(&mut sample_rng)
                })
                .collect();
            let sample = PairedSample { image, text, class_id, signal_region };
            if class_id < config.n_classes_normal {
                // Last fifth of each normal class held out for testing.
                if s + n_test >= config.samples_per_class {
                    test_normal.push(sample);
                } else {
                    train_normal.push(sample);
                }
            } else {
                test_anomaly.push(sample);
            }
        }
    }
    let dataset = Dataset { train_normal, test_normal, test_anomaly, config: config.clone() };
    dataset.check_invariants()?;
    Ok(dataset)
}

fn write_samples(w: &mut ByteWriter, samples: &[PairedSample]) {
    w.u32(samples.len() as u32);
    for s in samples {
        w.u32(s.class_id as u32);
        w.u32(s.signal_region as u32);
        w.f64_slice(&s.image);
        w.f64_slice(&s.text);
    }
}

fn read_samples(r: &mut ByteReader<'_>, pixels: usize, text_dim: usize) -> Result<Vec<PairedSample>> {
    let count = r.read_u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = r.read_u32()? as usize;
        let signal_region = r.read_u32()? as usize;
        let image = r.read_f64_vec(pixels)?;
        let text = r.read_f64_vec(text_dim)?;
        out.push(PairedSample { image, text, class_id, signal_region });
    }
    Ok(out)
}

pub fn to_bytes(dataset: &Dataset) -> Vec<u8> {
    let c = &dataset.config;
    let mut w = ByteWriter::new();
    w.magic(DATASET_MAGIC).u32(DATASET_VERSION);
    w.u32(c.image_side as u32)
        .u32(c.grid as u32)
        .u32(c.text_dim as u32)
        .u32(c.n_classes_normal as u32)
        .u32(c.n_classes_anomaly as u32)
        .u32(c.samples_per_class as u32)
        .f64(c.signal_strength)
        .f64(c.clutter_strength)
        .f64(c.noise_sigma)
        .u64(c.seed);
    write_samples(&mut w, &dataset.train_normal);
    write_samples(&mut w, &dataset.test_normal);
    write_samples(&mut w, &dataset.test_anomaly);
    w.into_bytes()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    r.expect_version(DATASET_VERSION)?;
    let config = GenConfig {
        image_side: r.read_u32()? as usize,
        grid: r.read_u32()? as usize,
        text_dim: r.read_u32()? as usize,
        n_classes_normal: r.read_u32()? as usize,
        n_classes_anomaly: r.read_u32()? as usize,
        samples_per_class: r.read_u32()? as usize,
        signal_strength: r.read_f64()?,
        clutter_strength: r.read_f64()?,
        noise_sigma: r.read_f64()?,
        seed: r.read_u64()?,
    };
    config.validate().map_err(|e| CmgError::Parse {
        offset: r.offset(),
        message: format!("invalid embedded config: {e}"),
    })?;
    let train_normal = read_samples(&mut r, config.pixels(), config.text_dim)?;
    let test_normal = read_samples(&mut r, config.pixels(), config.text_dim)?;
    let test_anomaly = read_samples(&mut r, config.pixels(), config.text_dim)?;
    r.finish()?;
    let dataset = Dataset { train_normal, test_normal, test_anomaly, config };
    dataset.check_invariants()?;
    Ok(dataset)
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(dataset))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;

    fn small_config() -> GenConfig {
        GenConfig { samples_per_class: 20, ..GenConfig::default() }
    }

    #[test]
    fn split_arithmetic() {
        let cfg = GenConfig { n_classes_normal: 6, samples_per_class: 50, ..GenConfig::default() };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.train_normal.len(), 240);
        assert_eq!(d.test_normal.len(), 60);
        assert_eq!(d.test_anomaly.len(), 50 * cfg.n_classes_anomaly);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(to_bytes(&a), to_bytes(&b));
    }

    #[test]
    fn signal_region_brighter_than_rest() {
        let cfg = GenConfig::default();
        let d = generate(&cfg).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for s in d.train_normal.iter().chain(&d.test_normal).chain(&d.test_anomaly) {
            let idxs = region_pixel_indices(cfg.image_side, cfg.grid, s.signal_region);
            let in_mean: f64 = idxs.iter().map(|&p| s.image[p]).sum::<f64>() / idxs.len() as f64;
            let out_count = cfg.pixels() - idxs.len();
            let out_mean: f64 = (s.image.iter().sum::<f64>()
                - idxs.iter().map(|&p| s.image[p]).sum::<f64>())
                / out_count as f64;
            if in_mean > out_mean {
                hits += 1;
            }
            total += 1;
        }
        assert!(
            hits as f64 / total as f64 >= 0.95,
            "signal region brighter in only {hits}/{total} samples"
        );
    }

    #[test]
    fn class_disjointness_holds() {
        let d = generate(&small_config()).unwrap();
        d.check_invariants().unwrap();
    }

    #[test]
    fn text_centroids_separated() {
        let cfg = small_config();
        let d = generate(&cfg).unwrap();
        // Recover per-class empirical centroids and check pairwise spacing.
        let n_classes = cfg.n_classes_normal + cfg.n_classes_anomaly;
        let mut sums = vec![vec![0.0; cfg.text_dim]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for s in d.train_normal.iter().chain(&d.test_normal).chain(&d.test_anomaly) {
            counts[s.class_id] += 1;
            for (a, b) in sums[s.class_id].iter_mut().zip(&s.text) {
                *a += b;
            }
        }
        for (sum, count) in sums.iter_mut().zip(&counts) {
            for v in sum.iter_mut() {
                *v /= *count as f64;
            }
        }
        for i in 0..n_classes {
            for j in i + 1..n_classes {
                let diff: Vec<f64> = sums[i].iter().zip(&sums[j]).map(|(a, b)| a - b).collect();
                assert!(
                    norm(&diff) >= 6.0 * cfg.noise_sigma,
                    "centroids {i} and {j} too close"
                );
            }
        }
    }

    #[test]
    fn signal_region_linearly_separates_classes() {
        // Nearest-centroid on the signal-region pixels is a linear rule; it
        // should recover the class when the signal dominates the clutter.
        let cfg = GenConfig {
            signal_strength: 0.8,
            clutter_strength: 0.2,
            ..small_config()
        };
        let d = generate(&cfg).unwrap();
        let n_classes = cfg.n_classes_normal + cfg.n_classes_anomaly;
        let block = cfg.image_side / cfg.grid;
        let patch = block * block;
        let mut sums = vec![vec![0.0; patch]; n_classes];
        let mut counts = vec![0usize; n_classes];
        let all: Vec<&PairedSample> =
            d.train_normal.iter().chain(&d.test_normal).chain(&d.test_anomaly).collect();
        for s in &all {
            let idxs = region_pixel_indices(cfg.image_side, cfg.grid, s.signal_region);
            counts[s.class_id] += 1;
            for (k, &p) in idxs.iter().enumerate() {
                sums[s.class_id][k] += s.image[p];
            }
        }
        for (sum, count) in sums.iter_mut().zip(&counts) {
            for v in sum.iter_mut() {
                *v /= *count as f64;
            }
        }
        let mut correct = 0;
        for s in &all {
            let idxs = region_pixel_indices(cfg.image_side, cfg.grid, s.signal_region);
            let feat: Vec<f64> = idxs.iter().map(|&p| s.image[p]).collect();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in sums.iter().enumerate() {
                let d2: f64 = centroid.iter().zip(&feat).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            if best == s.class_id {
                correct += 1;
            }
        }
        let acc = correct as f64 / all.len() as f64;
        assert!(acc >= 0.9, "signal-region classifier accuracy {acc}");
    }

    #[test]
    fn round_trip_is_lossless() {
        let d = generate(&small_config()).unwrap();
        let bytes = to_bytes(&d);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let d = generate(&small_config()).unwrap();
        let mut bytes = to_bytes(&d);
        bytes.truncate(bytes.len() - 7);
        assert!(matches!(from_bytes(&bytes), Err(CmgError::Parse { .. })));
    }

    #[test]
    fn future_version_is_version_error() {
        let d = generate(&small_config()).unwrap();
        let mut bytes = to_bytes(&d);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(CmgError::Version { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn config_from_kv_round_trip() {
        let cfg = GenConfig::default();
        let parsed = GenConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GenConfig { grid: 5, image_side: 12, ..GenConfig::default() };
        assert!(matches!(generate(&cfg), Err(CmgError::Config(_))));
        let cfg = GenConfig { clutter_strength: 0.9, ..GenConfig::default() };
        assert!(matches!(generate(&cfg), Err(CmgError::Config(_))));
    }
}
