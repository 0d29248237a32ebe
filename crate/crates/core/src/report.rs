//! CSV tables and the JSON run manifest.
//!
//! Floats are written with Rust's shortest round-trip formatting. Undefined
//! scores (an empty mask has no precision) are written as empty cells.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::eval::{Region3Report, SuiteReport};
use crate::trainer::RunMetrics;

/// Column order of the per-step metrics file.
pub const METRICS_COLUMNS: [&str; 14] = [
    "step", "ce_label", "ce_domain", "ib", "dis", "it_l", "it_d", "puri", "msr", "total", "alpha", "beta", "gamma", "mask_on",
];

pub const MANIFEST_VERSION: u32 = 1;

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Quotes a text cell when it contains a separator or a quote.
fn text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in &metrics.steps {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step, l.ce_label, l.ce_domain, l.ib, l.dis, l.it_l, l.it_d, l.puri, l.msr, l.total, l.alpha, l.beta, l.gamma, r.mask_on
        );
    }
    out
}

/// One row per variant: accuracy per held-out domain, then mean and std over seeds.
pub fn ablation_csv(report: &SuiteReport) -> String {
    let mut out = String::from("variant");
    for d in &report.domains {
        let _ = write!(out, ",holdout_{d}");
    }
    out.push_str(",mean,std\n");
    for row in &report.rows {
        out.push_str(&text(&row.variant));
        for a in &row.per_domain {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{},{}", row.mean, row.std);
    }
    out
}

/// One row per variant: accuracy per seed averaged over held-out domains.
pub fn seed_stats_csv(report: &SuiteReport) -> String {
    let mut out = String::from("variant");
    for s in &report.seeds {
        let _ = write!(out, ",seed_{s}");
    }
    out.push_str(",mean,std\n");
    for row in &report.rows {
        out.push_str(&text(&row.variant));
        for a in &row.per_seed {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{},{}", row.mean, row.std);
    }
    out
}

/// Every individual training run.
pub fn runs_csv(report: &SuiteReport) -> String {
    let mut out = String::from("variant,holdout,seed,accuracy,mask_on,precision,recall,recall_iii,recall_iv\n");
    for r in &report.runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            text(&r.variant),
            r.holdout,
            r.seed,
            r.accuracy,
            r.mask_on,
            cell(r.recovery.and_then(|m| m.precision)),
            cell(r.recovery.and_then(|m| m.recall)),
            cell(r.recall_iii),
            cell(r.recall_iv),
        );
    }
    out
}

pub fn region3_csv(report: &Region3Report) -> String {
    let mut out = String::from("variant,accuracy,std,recall_iii,recall_iv\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            text(&r.variant),
            r.accuracy,
            r.std,
            cell(r.recall_iii),
            cell(r.recall_iv)
        );
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Package version plus the short config hash, `git describe` style.
pub fn artifact_version(config_hash: &str) -> String {
    let short = &config_hash[..config_hash.len().min(7)];
    format!("{}-g{short}", env!("CARGO_PKG_VERSION"))
}

/// Everything needed to rerun a command: the resolved config, its hash, the
/// command line arguments that are not in the config and the hashes of the
/// inputs and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub artifact_version: String,
    pub command: String,
    pub config_hash: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub args: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&fs::read(path)?),
        })
    }
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let config_hash = config.hash();
        Self {
            manifest_version: MANIFEST_VERSION,
            artifact_version: artifact_version(&config_hash),
            command: command.to_string(),
            config: config.to_text(),
            config_hash,
            seeds: config.seeds.clone(),
            args: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn resolved_config(&self) -> Result<RunConfig, crate::config::ConfigError> {
        RunConfig::from_text(&self.config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_json() + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{AblationRow, MaskRecovery, RunResult};
    use crate::losses::LossBreakdown;
    use crate::trainer::StepRecord;

    fn suite() -> SuiteReport {
        SuiteReport {
            domains: vec![0, 1],
            seeds: vec![3],
            rows: vec![AblationRow {
                variant: "a,b".into(),
                per_domain: vec![0.5, 1.0],
                per_seed: vec![0.75],
                mean: 0.75,
                std: 0.0,
            }],
            runs: vec![RunResult {
                variant: "a,b".into(),
                holdout: 0,
                seed: 3,
                accuracy: 0.5,
                mask_on: 0,
                recovery: Some(MaskRecovery {
                    precision: None,
                    recall: Some(0.0),
                    f1: None,
                    on: 0,
                    target: 4,
                }),
                recall_iii: Some(0.0),
                recall_iv: Some(0.0),
            }],
        }
    }

    #[test]
    fn metrics_header_and_width() {
        let m = RunMetrics {
            steps: vec![StepRecord {
                step: 1,
                loss: LossBreakdown::default(),
                mask_on: 7,
            }],
            degenerate_pairing_steps: 0,
        };
        let csv = metrics_csv(&m);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_COLUMNS.join(","));
        assert_eq!(lines[1].split(',').count(), METRICS_COLUMNS.len());
        assert!(lines[1].starts_with("1,") && lines[1].ends_with(",7"));
    }

    #[test]
    fn tables_quote_and_leave_nulls_empty() {
        let r = suite();
        assert_eq!(ablation_csv(&r), "variant,holdout_0,holdout_1,mean,std\n\"a,b\",0.5,1,0.75,0\n");
        assert_eq!(seed_stats_csv(&r), "variant,seed_3,mean,std\n\"a,b\",0.75,0.75,0\n");
        assert!(runs_csv(&r).ends_with("\"a,b\",0,3,0.5,0,,0,0,0\n"));
    }

    #[test]
    fn manifest_round_trips_and_embeds_config() {
        let cfg = RunConfig::default();
        let mut m = Manifest::new("train", &cfg);
        m.arg("holdout_domain", 2);
        let back = Manifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.resolved_config().unwrap(), cfg);
        assert!(back.artifact_version.starts_with(env!("CARGO_PKG_VERSION")));
        assert_eq!(back.config_hash, cfg.hash());
    }
}
