//! Structured text reports with stable field names, written as `key =
//! value` lines plus tabular blocks. Floats are printed with Rust's
//! shortest round-trip formatting, so parsing a report reproduces it
//! exactly.

use crate::error::{CmgError, Result};
use crate::pipeline::Variant;

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub auroc: f64,
    pub aupr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean_auroc: f64,
    pub ci_auroc: Option<f64>,
    pub mean_aupr: f64,
    pub ci_aupr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub variant: Variant,
    pub seed: u64,
    pub values: Vec<f64>,
}

/// One audit line: a raw-image value and its masked-image counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub seed: u64,
    pub raw: f64,
    pub masked: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub variant: Variant,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub seeds: Vec<u64>,
    pub results: Vec<VariantResult>,
    pub summaries: Vec<VariantSummary>,
    pub entropy: Vec<AuditRow>,
    pub dcor: Vec<AuditRow>,
    pub curves: Vec<Curve>,
    pub failures: Vec<Failure>,
}

/// Mean and 95% half-width (1.96 sd / sqrt(s)) over per-seed values; the
/// half-width is only defined for two or more seeds.
pub fn mean_and_ci(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(1.96 * var.sqrt() / n.sqrt()))
}

fn opt_to_field(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "-".to_string(),
    }
}

fn field_to_opt(s: &str, line: usize) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    Ok(Some(parse_f64(s, line)?))
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse().map_err(|_| CmgError::Parse {
        offset: line as u64,
        message: format!("line {line}: '{s}' is not a real"),
    })
}

fn parse_u64(s: &str, line: usize) -> Result<u64> {
    s.parse().map_err(|_| CmgError::Parse {
        offset: line as u64,
        message: format!("line {line}: '{s}' is not an integer"),
    })
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("format = cmg-metrics\nversion = 1\n");
        out.push_str(&format!(
            "seeds = {}\n",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        ));
        out.push_str("\n[results]\n");
        for r in &self.results {
            out.push_str(&format!("{} {} {} {}\n", r.variant.name(), r.seed, r.auroc, r.aupr));
        }
        out.push_str("\n[summary]\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                s.variant.name(),
                s.mean_auroc,
                opt_to_field(s.ci_auroc),
                s.mean_aupr,
                opt_to_field(s.ci_aupr)
            ));
        }
        out.push_str("\n[entropy]\n");
        for e in &self.entropy {
            out.push_str(&format!("{} {} {}\n", e.seed, e.raw, e.masked));
        }
        out.push_str("\n[dcor]\n");
        for e in &self.dcor {
            out.push_str(&format!("{} {} {}\n", e.seed, e.raw, e.masked));
        }
        for c in &self.curves {
            out.push_str(&format!("\n[curve {} {} {}]\n", c.name, c.variant.name(), c.seed));
            for v in &c.values {
                out.push_str(&format!("{v}\n"));
            }
        }
        out.push_str("\n[failures]\n");
        for f in &self.failures {
            out.push_str(&format!("{} {} {}\n", f.variant.name(), f.seed, f.message));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut report = MetricsReport::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].to_string();
                if let Some(rest) = section.strip_prefix("curve ") {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(CmgError::Parse {
                            offset: lineno as u64,
                            message: format!("line {lineno}: malformed curve header"),
                        });
                    }
                    report.curves.push(Curve {
                        name: parts[0].to_string(),
                        variant: Variant::parse(parts[1])?,
                        seed: parse_u64(parts[2], lineno)?,
                        values: Vec::new(),
                    });
                }
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "format" if section.is_empty() => {
                        if value != "cmg-metrics" {
                            return Err(CmgError::Parse {
                                offset: lineno as u64,
                                message: format!("line {lineno}: unexpected format '{value}'"),
                            });
                        }
                        continue;
                    }
                    "version" if section.is_empty() => {
                        let found = value.parse().unwrap_or(0);
                        if found != 1 {
                            return Err(CmgError::Version { found, supported: 1 });
                        }
                        continue;
                    }
                    "seeds" if section.is_empty() => {
                        if !value.is_empty() {
                            report.seeds = value
                                .split(',')
                                .map(|s| parse_u64(s.trim(), lineno))
                                .collect::<Result<_>>()?;
                        }
                        continue;
                    }
                    _ => {}
                }
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match section.as_str() {
                "results" => {
                    if parts.len() != 4 {
                        return Err(CmgError::Parse {
                            offset: lineno as u64,
                            message: format!("line {lineno}: results row needs 4 fields"),
                        });
                    }
                    report.results.push(VariantResult {
                        variant: Variant::parse(parts[0])?,
                        seed: parse_u64(parts[1], lineno)?,
                        auroc: parse_f64(parts[2], lineno)?,
                        aupr: parse_f64(parts[3], lineno)?,
                    });
                }
                "summary" => {
                    if parts.len() != 5 {
                        return Err(CmgError::Parse {
                            offset: lineno as u64,
                            message: format!("line {lineno}: summary row needs 5 fields"),
                        });
                    }
                    report.summaries.push(VariantSummary {
                        variant: Variant::parse(parts[0])?,
                        mean_auroc: parse_f64(parts[1], lineno)?,
                        ci_auroc: field_to_opt(parts[2], lineno)?,
                        mean_aupr: parse_f64(parts[3], lineno)?,
                        ci_aupr: field_to_opt(parts[4], lineno)?,
                    });
                }
                "entropy" | "dcor" => {
                    if parts.len() != 3 {
                        return Err(CmgError::Parse {
                            offset: lineno as u64,
                            message: format!("line {lineno}: audit row needs 3 fields"),
                        });
                    }
                    let row = AuditRow {
                        seed: parse_u64(parts[0], lineno)?,
                        raw: parse_f64(parts[1], lineno)?,
                        masked: parse_f64(parts[2], lineno)?,
                    };
                    if section == "entropy" {
                        report.entropy.push(row);
                    } else {
                        report.dcor.push(row);
                    }
                }
                "failures" => {
                    if parts.len() < 3 {
                        return Err(CmgError::Parse {
                            offset: lineno as u64,
                            message: format!("line {lineno}: failure row needs 3+ fields"),
                        });
                    }
                    report.failures.push(Failure {
                        variant: Variant::parse(parts[0])?,
                        seed: parse_u64(parts[1], lineno)?,
                        message: parts[2..].join(" "),
                    });
                }
                s if s.starts_with("curve ") => {
                    let v = parse_f64(line, lineno)?;
                    report.curves.last_mut().unwrap().values.push(v);
                }
                _ => {
                    return Err(CmgError::Parse {
                        offset: lineno as u64,
                        message: format!("line {lineno}: content outside a known section"),
                    });
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> MetricsReport {
        MetricsReport {
            seeds: vec![1, 2],
            results: vec![
                VariantResult { variant: Variant::Ssd, seed: 1, auroc: 0.8125, aupr: 0.7 },
                VariantResult {
                    variant: Variant::Cmg,
                    seed: 2,
                    auroc: 0.987654321,
                    aupr: 0.1234567890123,
                },
            ],
            summaries: vec![VariantSummary {
                variant: Variant::Cmg,
                mean_auroc: 0.9,
                ci_auroc: Some(0.015),
                mean_aupr: 0.95,
                ci_aupr: None,
            }],
            entropy: vec![AuditRow { seed: 1, raw: 3.5, masked: 3.25 }],
            dcor: vec![AuditRow { seed: 1, raw: 0.21, masked: 0.17 }],
            curves: vec![Curve {
                name: "epoch_auroc".into(),
                variant: Variant::Ssd,
                seed: 1,
                values: vec![0.5, 0.625, 0.75],
            }],
            failures: vec![Failure {
                variant: Variant::SsdEr,
                seed: 2,
                message: "training diverged in stage 'rid' at epoch 3".into(),
            }],
        }
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let report = sample_report();
        let text = report.to_text();
        let back = MetricsReport::from_text(&text).unwrap();
        assert_eq!(report, back);
        // And idempotent: re-serializing gives identical bytes.
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn mean_and_ci_basics() {
        let (mean, ci) = mean_and_ci(&[0.5]);
        assert_eq!(mean, 0.5);
        assert!(ci.is_none());
        let (mean, ci) = mean_and_ci(&[0.4, 0.6]);
        assert!((mean - 0.5).abs() < 1e-12);
        let sd = (2.0 * 0.01_f64 / 1.0).sqrt();
        assert!((ci.unwrap() - 1.96 * sd / 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unknown_variant_is_parse_error() {
        let text = "format = cmg-metrics\nversion = 1\nseeds = 1\n[results]\nBOGUS 1 0.5 0.5\n";
        assert!(MetricsReport::from_text(text).is_err());
    }

    #[test]
    fn future_version_is_version_error() {
        let text = "format = cmg-metrics\nversion = 2\n";
        assert!(matches!(
            MetricsReport::from_text(text),
            Err(CmgError::Version { found: 2, supported: 1 })
        ));
    }
}
