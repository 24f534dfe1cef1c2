use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmg::error::{CmgError, Result};
use cmg::pipeline::{
    ablate, audit_report, load_bundle, save_bundle, scores_report, test_scores, train_cmg,
    RunConfig, Variant,
};
use cmg::synthdata::{self, GenConfig};

#[derive(Parser)]
#[command(name = "cmg", version, about = "Language-guided vision anomaly detection on synthetic paired data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    #[command(name = "gen-data")]
    GenData {
        /// Generator config (flat key = value; empty file for defaults).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant and write the model bundle directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run config (flat key = value; empty file for defaults).
        #[arg(long)]
        config: PathBuf,
        /// SSD, SSD_ER, SSD_LE, CMG, or CMG_MSE.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split of a dataset with a trained bundle.
    Score {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all variants across all seeds and write the metrics report.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entropy and redundancy audits of a trained bundle.
    Audit {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CmgError::Config(format!("cannot read config {}: {e}", path.display())))
}

fn write_train_log(dir: &Path, logs: &cmg::pipeline::RunLogs) -> Result<()> {
    let mut out = String::from("format = cmg-trainlog\nversion = 1\n");
    let mut curve = |name: &str, values: &[f64]| {
        out.push_str(&format!("[curve {name}]\n"));
        for v in values {
            out.push_str(&format!("{v}\n"));
        }
    };
    if let Some(log) = &logs.matching {
        curve("matching_loss", &log.loss);
        curve("retrieval_acc", &log.metric);
    }
    if let Some(log) = &logs.rid {
        curve("rid_loss", &log.loss);
        curve("rid_train_acc", &log.metric);
    }
    if let Some(heldout) = &logs.rid_heldout {
        curve("rid_heldout_acc", heldout);
    }
    curve("latent_loss", &logs.latent.loss);
    if !logs.latent.metric.is_empty() {
        curve("epoch_auroc", &logs.latent.metric);
    }
    std::fs::write(dir.join("train_log.txt"), out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = GenConfig::from_kv(&read_config_text(&config)?)?;
            let dataset = synthdata::generate(&cfg)?;
            synthdata::save(&dataset, &out)?;
            println!(
                "wrote {} ({} train / {} test-normal / {} test-anomaly)",
                out.display(),
                dataset.train_normal.len(),
                dataset.test_normal.len(),
                dataset.test_anomaly.len()
            );
        }
        Command::Train { data, config, variant, out } => {
            let dataset = synthdata::load(&data)?;
            let cfg = RunConfig::from_kv(&read_config_text(&config)?)?;
            let variant = Variant::parse(&variant)?;
            let seed = cfg.seeds[0];
            let trained = train_cmg(&dataset, &cfg, variant, seed)?;
            save_bundle(&trained.bundle, &out)?;
            write_train_log(&out, &trained.logs)?;
            println!("wrote bundle {} (variant {}, seed {seed})", out.display(), variant.name());
        }
        Command::Score { bundle, data, out } => {
            let bundle = load_bundle(&bundle)?;
            let dataset = synthdata::load(&data)?;
            let (images, labels) = cmg::pipeline::test_set(&dataset);
            let scored = test_scores(&bundle, &images, &labels)?;
            std::fs::write(&out, scores_report(&scored)?)?;
            println!("wrote {}", out.display());
        }
        Command::Ablate { data, config, out } => {
            let dataset = synthdata::load(&data)?;
            let cfg = RunConfig::from_kv(&read_config_text(&config)?)?;
            let report = ablate(&dataset, &cfg)?;
            std::fs::write(&out, report.to_text())?;
            for s in &report.summaries {
                match s.ci_auroc {
                    Some(ci) => println!(
                        "{:8} auroc {:.4} +- {:.4}  aupr {:.4}",
                        s.variant.name(),
                        s.mean_auroc,
                        ci,
                        s.mean_aupr
                    ),
                    None => println!(
                        "{:8} auroc {:.4}  aupr {:.4}",
                        s.variant.name(),
                        s.mean_auroc,
                        s.mean_aupr
                    ),
                }
            }
            println!("wrote {}", out.display());
        }
        Command::Audit { bundle, data, out } => {
            let bundle = load_bundle(&bundle)?;
            let dataset = synthdata::load(&data)?;
            let report = audit_report(&dataset, &bundle)?;
            std::fs::write(&out, report)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
