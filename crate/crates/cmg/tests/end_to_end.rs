//! Trained-model behaviour on generated data: mask selection quality,
//! detector behaviour, clustering purity, bundle round trips, and the
//! image-only test path. A reduced-size run config keeps these fast; the
//! full-size directional claims live in the acceptance suite.

use std::sync::OnceLock;

use cmg::cmer::{build_mask_sets, rid_region, train_rid, MaskSet};
use cmg::cmle::cluster_texts;
use cmg::encoders::{train_matching, MatchingModels, TrainConfig};
use cmg::numerics::{Label, Matrix};
use cmg::pipeline::{
    load_bundle, save_bundle, test_scores, test_set, train_cmg, RunConfig, TrainedModels, Variant,
    ALL_VARIANTS,
};
use cmg::synthdata::{generate, Dataset};

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.matching.epochs = 12;
    cfg.latent.epochs = 10;
    cfg.rid.epochs = 6;
    cfg.seeds = vec![1];
    cfg
}

struct Fixture {
    cfg: RunConfig,
    dataset: Dataset,
    matching: MatchingModels,
    mask_sets: Vec<MaskSet>,
    cmg_small: TrainedModels,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = small_cfg();
        let dataset = generate(&cfg.gen).unwrap();
        let mcfg = TrainConfig { seed: 1, ..cfg.matching.clone() };
        let matching = train_matching(&dataset.train_normal, &mcfg, &cfg.arch).unwrap();
        let mask_sets = build_mask_sets(
            &dataset.train_normal,
            cfg.gen.image_side,
            &cfg.mask,
            &matching.text_enc,
            &matching.image_enc,
        )
        .unwrap();
        let cmg_small = train_cmg(&dataset, &cfg, Variant::Cmg, 1).unwrap();
        Fixture { cfg, dataset, matching, mask_sets, cmg_small }
    })
}

#[test]
fn retrieval_reaches_target_within_epoch_budget() {
    // Full-size matching run; the reduced fixture config is not enough here.
    let cfg = RunConfig::default();
    let dataset = generate(&cfg.gen).unwrap();
    let mcfg = TrainConfig { seed: 11, ..cfg.matching };
    assert!(mcfg.epochs <= 100);
    let models = train_matching(&dataset.train_normal, &mcfg, &cfg.arch).unwrap();
    let best = models.log.metric.iter().cloned().fold(0.0f64, f64::max);
    assert!(best >= 0.9, "top-1 retrieval accuracy {best} below 0.9");
}

#[test]
fn best_mask_avoids_signal_region() {
    let f = fixture();
    let mut avoided = 0;
    for (set, sample) in f.mask_sets.iter().zip(&f.dataset.train_normal) {
        set.check_invariants().unwrap();
        if set.label_index() != sample.signal_region {
            avoided += 1;
        }
    }
    let frac = avoided as f64 / f.mask_sets.len() as f64;
    assert!(frac >= 0.9, "mask selection avoided the signal region in only {frac:.3}");
}

#[test]
fn rid_learns_labels_and_avoids_signal_on_heldout() {
    let f = fixture();
    // Full-length RID training for the accuracy claims.
    let rcfg = TrainConfig { seed: 5, ..RunConfig::default().rid };
    assert!(rcfg.epochs <= 50);
    let result = train_rid(&f.mask_sets, &rcfg).unwrap();
    let final_acc = *result.log.metric.last().unwrap();
    assert!(final_acc >= 0.5, "RID training accuracy {final_acc} below 0.5");

    let mut avoided = 0;
    let heldout: Vec<_> = f.dataset.test_normal.iter().chain(&f.dataset.test_anomaly).collect();
    for sample in &heldout {
        let region =
            rid_region(&sample.image, &result.model, f.cfg.gen.image_side, &f.cfg.mask).unwrap();
        if region != sample.signal_region {
            avoided += 1;
        }
    }
    let frac = avoided as f64 / heldout.len() as f64;
    assert!(frac >= 0.8, "RID masked the signal region too often (avoided {frac:.3})");
}

#[test]
fn text_clusters_recover_classes() {
    let f = fixture();
    let rows: Vec<Vec<f64>> = f
        .dataset
        .train_normal
        .iter()
        .map(|s| f.matching.text_enc.forward(&s.text).unwrap())
        .collect();
    let z_t = Matrix::from_rows(&rows).unwrap();
    let k = f.cfg.gen.n_classes_normal;
    let assignment = cluster_texts(&z_t, k, 7).unwrap();
    // Purity: dominant class share per cluster.
    let mut pure = 0usize;
    let mut total = 0usize;
    for members in &assignment.members {
        if members.is_empty() {
            continue;
        }
        let mut counts = std::collections::BTreeMap::new();
        for &i in members {
            *counts.entry(f.dataset.train_normal[i].class_id).or_insert(0usize) += 1;
        }
        pure += counts.values().max().unwrap();
        total += members.len();
    }
    let purity = pure as f64 / total as f64;
    assert!(purity >= 0.95, "cluster purity {purity:.3} below 0.95");
}

#[test]
fn training_normals_score_below_anomalies() {
    let f = fixture();
    let train_images: Vec<Vec<f64>> = f.dataset.train_normal.iter().map(|s| s.image.clone()).collect();
    let train_labels = vec![Label::Normal; train_images.len()];
    let train_scores = test_scores(&f.cmg_small.bundle, &train_images, &train_labels).unwrap();
    let anomaly_images: Vec<Vec<f64>> = f.dataset.test_anomaly.iter().map(|s| s.image.clone()).collect();
    let anomaly_labels = vec![Label::Anomaly; anomaly_images.len()];
    let anomaly_scores = test_scores(&f.cmg_small.bundle, &anomaly_images, &anomaly_labels).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&train_scores.scores) <= mean(&anomaly_scores.scores),
        "training normals scored above anomalies"
    );
}

#[test]
fn test_path_ignores_text_entirely() {
    let f = fixture();
    // Poison every text field; the scores must not change by a single bit.
    let mut poisoned = f.dataset.clone();
    for s in poisoned
        .train_normal
        .iter_mut()
        .chain(poisoned.test_normal.iter_mut())
        .chain(poisoned.test_anomaly.iter_mut())
    {
        for v in s.text.iter_mut() {
            *v = f64::NAN;
        }
    }
    let (clean_images, labels) = test_set(&f.dataset);
    let (poisoned_images, _) = test_set(&poisoned);
    let a = test_scores(&f.cmg_small.bundle, &clean_images, &labels).unwrap();
    let b = test_scores(&f.cmg_small.bundle, &poisoned_images, &labels).unwrap();
    for (x, y) in a.scores.iter().zip(&b.scores) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn scoring_is_deterministic() {
    let f = fixture();
    let (images, labels) = test_set(&f.dataset);
    let a = test_scores(&f.cmg_small.bundle, &images, &labels).unwrap();
    let b = test_scores(&f.cmg_small.bundle, &images, &labels).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bundle_round_trip_and_gating() {
    let f = fixture();
    let cfg = &f.cfg;
    let dir = tempdir("bundle_round_trip");
    for variant in ALL_VARIANTS {
        let trained = if variant == Variant::Cmg {
            // Reuse the fixture's run for the expensive variant.
            None
        } else {
            Some(train_cmg(&f.dataset, cfg, variant, 1).unwrap())
        };
        let bundle = trained.as_ref().map(|t| &t.bundle).unwrap_or(&f.cmg_small.bundle);
        bundle.check_gating().unwrap();
        assert_eq!(bundle.matching_image.is_some(), variant.needs_matching());
        assert_eq!(bundle.rid.is_some(), variant.has_er());
        assert_eq!(bundle.weights.is_some(), variant.has_le());

        let vdir = dir.join(variant.name());
        save_bundle(bundle, &vdir).unwrap();
        let loaded = load_bundle(&vdir).unwrap();
        loaded.check_gating().unwrap();
        let (images, labels) = test_set(&f.dataset);
        let a = test_scores(bundle, &images, &labels).unwrap();
        let b = test_scores(&loaded, &images, &labels).unwrap();
        assert_eq!(a, b, "reloaded bundle must score identically");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn training_twice_gives_byte_identical_bundles() {
    let f = fixture();
    let a = train_cmg(&f.dataset, &f.cfg, Variant::SsdEr, 3).unwrap();
    let b = train_cmg(&f.dataset, &f.cfg, Variant::SsdEr, 3).unwrap();
    let dir = tempdir("determinism");
    save_bundle(&a.bundle, &dir.join("a")).unwrap();
    save_bundle(&b.bundle, &dir.join("b")).unwrap();
    for entry in std::fs::read_dir(dir.join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        let fa = std::fs::read(dir.join("a").join(&name)).unwrap();
        let fb = std::fs::read(dir.join("b").join(&name)).unwrap();
        assert_eq!(fa, fb, "bundle file {name:?} differs between identical runs");
    }
    assert_eq!(a.logs, b.logs);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn latent_loss_trends_down_for_baseline() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.latent.epochs = 10;
    let trained = train_cmg(&f.dataset, &cfg, Variant::Ssd, 2).unwrap();
    let loss = &trained.logs.latent.loss;
    let mut violations = 0;
    for w in loss.windows(2) {
        if w[1] > w[0] + 1e-12 {
            violations += 1;
        }
    }
    assert!(violations <= 1, "latent loss rose {violations} times in 10 epochs: {loss:?}");
}

fn tempdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("cmg_e2e_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
