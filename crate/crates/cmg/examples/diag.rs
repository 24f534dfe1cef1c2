use cmg::cmle::{build_group_weights, cluster_texts, global_loss};
use cmg::numerics::{auroc, Matrix};
use cmg::pipeline::{test_scores, test_set, train_cmg, RunConfig, Variant};
use cmg::synthdata::generate;

fn class_stats(features: &[Vec<f64>], classes: &[usize]) -> (f64, f64) {
    let d = features[0].len();
    let n = features.len();
    let mut grand = vec![0.0; d];
    for f in features {
        for (g, v) in grand.iter_mut().zip(f) {
            *g += v / n as f64;
        }
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<&Vec<f64>>> = Default::default();
    for (f, &c) in features.iter().zip(classes) {
        by_class.entry(c).or_default().push(f);
    }
    let mut within = 0.0;
    let mut between = 0.0;
    for (_, members) in by_class {
        let mut mean = vec![0.0; d];
        for f in &members {
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += v / members.len() as f64;
            }
        }
        for f in &members {
            within += f.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        between += members.len() as f64
            * mean.iter().zip(&grand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    (within / n as f64, between / n as f64)
}

fn main() {
    let mut cfg = RunConfig::default();
    cfg.m_detector = 6;
    cfg.gen.clutter_strength = 0.35;
    let dataset = generate(&cfg.gen).unwrap();
    let (images, labels) = test_set(&dataset);
    let test_classes: Vec<usize> = dataset
        .test_normal
        .iter()
        .chain(&dataset.test_anomaly)
        .map(|s| s.class_id)
        .collect();

    for (name, variant, lambda) in [
        ("SSD", Variant::Ssd, 0.0),
        ("LE-weak", Variant::SsdLe, 0.0005),
        ("LE-mid", Variant::SsdLe, 0.002),
        ("LE-strong", Variant::SsdLe, 0.01),
    ] {
        let mut c = cfg.clone();
        if lambda > 0.0 {
            c.latent.lambda_global = lambda;
        }
        let trained = train_cmg(&dataset, &c, variant, 1).unwrap();
        let scored = test_scores(&trained.bundle, &images, &labels).unwrap();
        let roc = auroc(&scored).unwrap();

        // Feature geometry on the test set.
        let feats: Vec<Vec<f64>> = images
            .iter()
            .map(|img| trained.bundle.e2.forward(img).unwrap())
            .collect();
        let n_norm = dataset.test_normal.len();
        let (w_norm, b_norm) = class_stats(&feats[..n_norm].to_vec(), &test_classes[..n_norm]);
        let mean_norm: f64 =
            scored.scores[..n_norm].iter().sum::<f64>() / n_norm as f64;
        let mean_anom: f64 = scored.scores[n_norm..].iter().sum::<f64>()
            / (scored.scores.len() - n_norm) as f64;

        // How well do the text weights hold on the final train features?
        let text_enc = trained.bundle.matching_text.as_ref();
        let structure_residual = if let Some(te) = text_enc {
            let zt_rows: Vec<Vec<f64>> = dataset
                .train_normal
                .iter()
                .map(|s| te.forward(&s.text).unwrap())
                .collect();
            let zt = Matrix::from_rows(&zt_rows).unwrap();
            let assign = cluster_texts(&zt, c.k_text, 123).unwrap();
            let gw = build_group_weights(&zt, &assign, c.ridge_eps).unwrap();
            let train_feats: Vec<Vec<f64>> = dataset
                .train_normal
                .iter()
                .map(|s| trained.bundle.e2.forward(&s.image).unwrap())
                .collect();
            let mut total = 0.0;
            let mut scale = 0.0;
            for block in &gw.groups {
                let rows: Vec<Vec<f64>> =
                    block.members.iter().map(|&i| train_feats[i].clone()).collect();
                let fm = Matrix::from_rows(&rows).unwrap();
                total += global_loss(&fm, &block.w).unwrap().0;
                for r in &rows {
                    scale += r.iter().map(|v| v * v).sum::<f64>();
                }
            }
            total / scale
        } else {
            f64::NAN
        };

        println!(
            "{name:8} auroc {roc:.3}  within {w_norm:8.2} between {b_norm:8.2} ratio {:.3}  score_norm {mean_norm:9.1} score_anom {mean_anom:9.1}  struct_resid {structure_residual:.4}",
            b_norm / w_norm.max(1e-9),
        );
    }
}
