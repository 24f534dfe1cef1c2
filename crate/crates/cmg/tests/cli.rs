//! CLI flows: data generation, training, scoring, auditing, the ablation
//! report, byte-level determinism of commands, and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cmg")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cmg_cli_{tag}_{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_expect_code(args: &[&str], code: i32) {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {:?}: stderr {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

const SMALL_GEN: &str = "samples_per_class = 20\nseed = 5\n";
const SMALL_RUN: &str =
    "match_epochs = 8\nlatent_epochs = 6\nrid_epochs = 4\nseeds = 9\n";

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn full_flow_and_determinism() {
    let dir = workdir("flow");
    let gen_cfg = dir.join("gen.cfg");
    let run_cfg = dir.join("run.cfg");
    write(&gen_cfg, SMALL_GEN);
    write(&run_cfg, SMALL_RUN);
    let data = dir.join("data.cmgd");
    let data2 = dir.join("data2.cmgd");

    // gen-data twice: byte-identical datasets.
    run_ok(&["gen-data", "--config", gen_cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    run_ok(&["gen-data", "--config", gen_cfg.to_str().unwrap(), "--out", data2.to_str().unwrap()]);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&data2).unwrap());

    // train twice: byte-identical bundle directories.
    let b1 = dir.join("bundle1");
    let b2 = dir.join("bundle2");
    for b in [&b1, &b2] {
        run_ok(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            run_cfg.to_str().unwrap(),
            "--variant",
            "CMG",
            "--out",
            b.to_str().unwrap(),
        ]);
    }
    assert_eq!(dir_bytes(&b1), dir_bytes(&b2), "train must be byte-identical across runs");

    // score twice: byte-identical reports.
    let s1 = dir.join("scores1.txt");
    let s2 = dir.join("scores2.txt");
    for s in [&s1, &s2] {
        run_ok(&[
            "score",
            "--bundle",
            b1.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            s.to_str().unwrap(),
        ]);
    }
    let scores_text = std::fs::read_to_string(&s1).unwrap();
    assert_eq!(scores_text, std::fs::read_to_string(&s2).unwrap());
    assert!(scores_text.starts_with("format = cmg-scores\n"));
    assert!(scores_text.contains("auroc = "));

    // audit writes the entropy and redundancy fields.
    let audit = dir.join("audit.txt");
    run_ok(&[
        "audit",
        "--bundle",
        b1.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        audit.to_str().unwrap(),
    ]);
    let audit_text = std::fs::read_to_string(&audit).unwrap();
    for key in ["mean_h_raw", "mean_h_masked", "dcor_raw_noise", "dcor_masked_noise"] {
        assert!(audit_text.contains(key), "audit report missing {key}");
    }

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablate_single_seed_report_parses_without_ci() {
    let dir = workdir("ablate");
    let gen_cfg = dir.join("gen.cfg");
    let run_cfg = dir.join("run.cfg");
    write(&gen_cfg, SMALL_GEN);
    write(&run_cfg, SMALL_RUN);
    let data = dir.join("data.cmgd");
    run_ok(&["gen-data", "--config", gen_cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    let report_path = dir.join("report.txt");
    run_ok(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--config",
        run_cfg.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&report_path).unwrap();
    let report = cmg::report::MetricsReport::from_text(&text).unwrap();
    assert_eq!(report.seeds, vec![9]);
    assert_eq!(report.results.len(), 5, "five variants, one seed each");
    assert!(report.failures.is_empty(), "failures: {:?}", report.failures);
    for s in &report.summaries {
        assert!(s.ci_auroc.is_none(), "single seed must not produce an interval");
        assert!(s.ci_aupr.is_none());
    }
    // Round trip is lossless.
    assert_eq!(report.to_text(), text);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_errors_exit_with_2() {
    let dir = workdir("cfg_err");
    let bad_cfg = dir.join("bad.cfg");
    write(&bad_cfg, "not_a_real_key = 3\n");
    let out = dir.join("out.cmgd");
    run_expect_code(
        &["gen-data", "--config", bad_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        2,
    );
    // Invalid values too.
    write(&bad_cfg, "grid = 5\nimage_side = 12\n");
    run_expect_code(
        &["gen-data", "--config", bad_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        2,
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn data_errors_exit_with_3() {
    let dir = workdir("data_err");
    let gen_cfg = dir.join("gen.cfg");
    write(&gen_cfg, SMALL_GEN);
    let data = dir.join("data.cmgd");
    run_ok(&["gen-data", "--config", gen_cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    // Truncate the dataset file.
    let bytes = std::fs::read(&data).unwrap();
    std::fs::write(&data, &bytes[..bytes.len() - 9]).unwrap();
    let run_cfg = dir.join("run.cfg");
    write(&run_cfg, SMALL_RUN);
    run_expect_code(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            run_cfg.to_str().unwrap(),
            "--variant",
            "SSD",
            "--out",
            dir.join("b").to_str().unwrap(),
        ],
        3,
    );
    // Missing data file.
    run_expect_code(
        &[
            "train",
            "--data",
            dir.join("nope.cmgd").to_str().unwrap(),
            "--config",
            run_cfg.to_str().unwrap(),
            "--variant",
            "SSD",
            "--out",
            dir.join("b").to_str().unwrap(),
        ],
        3,
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn diverged_training_exits_with_4() {
    let dir = workdir("diverge");
    let gen_cfg = dir.join("gen.cfg");
    write(&gen_cfg, SMALL_GEN);
    let data = dir.join("data.cmgd");
    run_ok(&["gen-data", "--config", gen_cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    let run_cfg = dir.join("run.cfg");
    write(&run_cfg, "match_lr = 1e8\nmatch_epochs = 30\nseeds = 1\n");
    run_expect_code(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            run_cfg.to_str().unwrap(),
            "--variant",
            "CMG",
            "--out",
            dir.join("b").to_str().unwrap(),
        ],
        4,
    );
    std::fs::remove_dir_all(&dir).ok();
}
