use cmg::cmer::build_mask_sets;
use cmg::encoders::{train_matching, TrainConfig};
use cmg::numerics::auroc;
use cmg::pipeline::{test_scores, test_set, train_cmg, RunConfig, Variant};
use cmg::synthdata::generate;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("le");
    let base = RunConfig::default();
    let dataset = generate(&base.gen).unwrap();
    let (images, labels) = test_set(&dataset);

    match mode {
        "aug" => {
            for clutter in [0.2, 0.35] {
                let mut gen = base.gen.clone();
                gen.clutter_strength = clutter;
                let data = generate(&gen).unwrap();
                let (imgs, labs) = test_set(&data);
                for dropout in [0.0, 0.5] {
                    for variant in [Variant::Ssd, Variant::SsdEr] {
                        let mut cfg = base.clone();
                        cfg.gen = gen.clone();
                        cfg.m_detector = 6;
                        cfg.rid.epochs = 15;
                        cfg.latent.augment_region_dropout_prob = dropout;
                        let t0 = Instant::now();
                        let mut rocs = Vec::new();
                        for seed in [1u64, 2, 3] {
                            let trained = train_cmg(&data, &cfg, variant, seed).unwrap();
                            let scored = test_scores(&trained.bundle, &imgs, &labs).unwrap();
                            rocs.push((auroc(&scored).unwrap() * 1000.0).round() / 1000.0);
                        }
                        let mean = rocs.iter().sum::<f64>() / rocs.len() as f64;
                        println!(
                            "clutter {clutter} dropout {dropout} {:8} {:.0?} mean {mean:.3} {rocs:?}",
                            variant.name(),
                            t0.elapsed()
                        );
                    }
                }
            }
        }
        "variants" => {
            for (lambda, shrink) in [(3e-4, 1e-2)] {
                println!("--- lambda {lambda} shrink {shrink}");
                for variant in [Variant::Ssd, Variant::SsdEr, Variant::SsdLe, Variant::Cmg, Variant::CmgMse] {
                    let mut cfg = base.clone();
                    cfg.shrink_eps = shrink;
                    cfg.latent.lambda_global = lambda;
                    let t0 = Instant::now();
                    let mut rocs = Vec::new();
                    for seed in [1u64, 2, 3] {
                        match train_cmg(&dataset, &cfg, variant, seed) {
                            Ok(trained) => {
                                let scored = test_scores(&trained.bundle, &images, &labels).unwrap();
                                rocs.push((auroc(&scored).unwrap() * 1000.0).round() / 1000.0);
                            }
                            Err(e) => println!("{} seed {seed} FAILED: {e}", variant.name()),
                        }
                    }
                    let mean = rocs.iter().sum::<f64>() / rocs.len().max(1) as f64;
                    println!(
                        "lambda {lambda} {:8} {:.1?} mean {mean:.3} aurocs {rocs:?}",
                        variant.name(),
                        t0.elapsed()
                    );
                }
            }
        }
        "le" => {
            for (k, lambda, shrink) in [
                (6usize, 1e-4, 1e-3),
                (6, 3e-4, 1e-3),
                (6, 3e-4, 1e-2),
                (64, 1e-4, 1e-3),
                (64, 3e-4, 1e-3),
                (64, 3e-4, 1e-2),
                (64, 1e-3, 1e-2),
            ] {
                {
                    let mut cfg = base.clone();
                    cfg.k_text = k;
                    cfg.shrink_eps = shrink;
                    cfg.latent.lambda_global = lambda;
                    let t0 = Instant::now();
                    let mut rocs = Vec::new();
                    for seed in [1u64, 2, 3] {
                        match train_cmg(&dataset, &cfg, Variant::SsdLe, seed) {
                            Ok(trained) => {
                                let scored = test_scores(&trained.bundle, &images, &labels).unwrap();
                                rocs.push((auroc(&scored).unwrap() * 1000.0).round() / 1000.0);
                            }
                            Err(e) => {
                                println!("k {k} lambda {lambda}: seed {seed} FAILED: {e}");
                            }
                        }
                    }
                    let mean = rocs.iter().sum::<f64>() / rocs.len().max(1) as f64;
                    println!(
                        "k {k} lambda {lambda} shrink {shrink}: {:.1?} mean {mean:.3} {rocs:?}",
                        t0.elapsed()
                    );
                }
            }
        }
        "rid" => {
            let mcfg = TrainConfig { seed: 1, ..base.matching.clone() };
            let models = train_matching(&dataset.train_normal, &mcfg, &base.arch).unwrap();
            let sets = build_mask_sets(
                &dataset.train_normal,
                base.gen.image_side,
                &base.mask,
                &models.text_enc,
                &models.image_enc,
            )
            .unwrap();
            for (lr, epochs, batch) in [(0.02, 50, 64), (0.05, 50, 64), (0.05, 50, 32), (0.1, 50, 32)] {
                let rcfg = TrainConfig {
                    seed: 1,
                    learning_rate: lr,
                    epochs,
                    batch_size: batch,
                    ..base.rid.clone()
                };
                let t0 = Instant::now();
                match cmg::cmer::train_rid(&sets, &rcfg) {
                    Ok(r) => {
                        let train_max = r.log.metric.iter().cloned().fold(0.0f64, f64::max);
                        let held_max = r.heldout_acc.iter().cloned().fold(0.0f64, f64::max);
                        println!(
                            "lr {lr} epochs {epochs} batch {batch}: {:.1?} train_max {train_max:.3} held_max {held_max:.3} held_tail {:?}",
                            t0.elapsed(),
                            &r.heldout_acc[r.heldout_acc.len() - 3..]
                        );
                    }
                    Err(e) => println!("lr {lr}: FAILED {e}"),
                }
            }
        }
        other => panic!("unknown mode {other}"),
    }
}
