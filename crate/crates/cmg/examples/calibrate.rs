use cmg::cmer::{build_mask_sets, rid_region, train_rid};
use cmg::encoders::{train_matching, TrainConfig};
use cmg::numerics::{auroc, Label};
use cmg::pipeline::{
    cmer_entropy_report, redundancy_audit, test_scores, test_set, train_cmg, RunConfig, Variant,
    ALL_VARIANTS,
};
use cmg::synthdata::generate;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let dataset = generate(&cfg.gen).unwrap();
    println!(
        "dataset: {} train, {} test-normal, {} test-anomaly",
        dataset.train_normal.len(),
        dataset.test_normal.len(),
        dataset.test_anomaly.len()
    );

    // Stage 1: matching encoders.
    let t0 = Instant::now();
    let mcfg = TrainConfig { seed: 1, ..cfg.matching.clone() };
    let models = train_matching(&dataset.train_normal, &mcfg, &cfg.arch).unwrap();
    println!(
        "matching: {:.1?}; retrieval tail = {:?}",
        t0.elapsed(),
        &models.log.metric[models.log.metric.len().saturating_sub(5)..]
    );

    // Stage 2: mask selection stats.
    let t0 = Instant::now();
    let sets = build_mask_sets(
        &dataset.train_normal,
        cfg.gen.image_side,
        &cfg.mask,
        &models.text_enc,
        &models.image_enc,
    )
    .unwrap();
    let mut avoid = 0;
    for (set, s) in sets.iter().zip(&dataset.train_normal) {
        if set.label_index() != s.signal_region {
            avoid += 1;
        }
    }
    println!(
        "mask selection: {:.1?}; avoids signal region {}/{} = {:.3}",
        t0.elapsed(),
        avoid,
        sets.len(),
        avoid as f64 / sets.len() as f64
    );
    let mut hist = vec![0usize; 4];
    for set in &sets {
        hist[set.label_index()] += 1;
    }
    println!("label histogram: {hist:?}");

    // Stage 3: RID.
    let t0 = Instant::now();
    let rcfg = TrainConfig { seed: 1, ..cfg.rid.clone() };
    let rid = train_rid(&sets, &rcfg).unwrap();
    println!(
        "rid: {:.1?}; train tail {:?} heldout tail {:?}",
        t0.elapsed(),
        &rid.log.metric[rid.log.metric.len().saturating_sub(3)..],
        &rid.heldout_acc[rid.heldout_acc.len().saturating_sub(3)..]
    );
    let mut heldout_max: f64 = 0.0;
    for &a in &rid.heldout_acc {
        heldout_max = heldout_max.max(a);
    }
    println!("rid heldout max {heldout_max:.3}");
    // How often does the trained RID pick the signal region on held-out data?
    let mut avoid = 0;
    for s in dataset.test_normal.iter().chain(&dataset.test_anomaly) {
        let r = rid_region(&s.image, &rid.model, cfg.gen.image_side, &cfg.mask).unwrap();
        if r != s.signal_region {
            avoid += 1;
        }
    }
    let total = dataset.test_normal.len() + dataset.test_anomaly.len();
    println!("rid avoids signal region on held-out: {:.3}", avoid as f64 / total as f64);

    // Stage 4: variants.
    let (images, labels) = test_set(&dataset);
    for variant in ALL_VARIANTS {
        let t0 = Instant::now();
        let mut rocs = Vec::new();
        for seed in [1u64, 2, 3] {
            let trained = train_cmg(&dataset, &cfg, variant, seed).unwrap();
            let scored = test_scores(&trained.bundle, &images, &labels).unwrap();
            rocs.push(auroc(&scored).unwrap());
            if variant == Variant::Cmg && seed == 1 {
                let e = cmer_entropy_report(&dataset, &trained.bundle).unwrap();
                let (dr, dm) = redundancy_audit(&dataset, &trained.bundle).unwrap();
                println!(
                    "  audits: H_raw {:.4} H_masked {:.4}; dcor raw {:.4} masked {:.4}",
                    e.mean_raw, e.mean_masked, dr, dm
                );
            }
        }
        println!("{:8} {:.1?} aurocs {rocs:?}", variant.name(), t0.elapsed());
    }
    let _ = Label::Normal;
}
